"""Run directories: config snapshot, per-generation logs and final reports.

Layout of a run directory::

    config.json            config snapshot, written before any evaluation
    stats.csv              one row per generation (0..G)
    archive.jsonl          every evaluated architecture, in evaluation order
    timings.csv            wall-clock seconds per evaluation (not deterministic)
    pareto.csv             first front of the final population
    architectures/ID.json  genotype documents for the front and final population
    architectures/ID.dot   DOT renders of the same
    checkpoints/ID.npz     trained parameters of the same
    stats.svg              optional line chart of the stats

Everything except timings.csv is a function of the config alone.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from . import nsga
from .encoding import serialize, to_dot
from .search import ConfigError, RunState, SearchConfig

STATS_FIELDS = (
    "generation",
    "mean_block_count",
    "mean_test_loss",
    "best_test_loss",
    "min_block_count",
    "front_sizes",
    "archive_size",
)


def load_config(path) -> SearchConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return SearchConfig.from_dict(doc)


def dump_config(config: SearchConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def check_nondominated(individuals) -> None:
    for a in individuals:
        for b in individuals:
            if a is not b and nsga.dominates(a, b):
                raise ValueError(f"{a.identifier} dominates {b.identifier}; not a Pareto front")


def save_npz(path, arrays: dict) -> None:
    """Like ``np.savez`` but with fixed member timestamps, so output is reproducible."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


class RunDirectory:
    def __init__(self, root):
        self.root = Path(root)
        self._archived = 0

    @property
    def arch_dir(self) -> Path:
        return self.root / "architectures"

    @property
    def ckpt_dir(self) -> Path:
        return self.root / "checkpoints"

    def create(self, config: SearchConfig) -> "RunDirectory":
        """Make the directory and write the config snapshot."""
        if self.root.exists() and any(self.root.iterdir()):
            raise FileExistsError(f"{self.root} exists and is not empty")
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "config.json").write_text(dump_config(config))
        (self.root / "archive.jsonl").write_text("")
        (self.root / "timings.csv").write_text("identifier,generation,seconds,epochs\n")
        return self

    # called after every generation
    def record_generation(self, state: RunState) -> None:
        rows = [[s.row()[k] for k in STATS_FIELDS] for s in state.stats]
        (self.root / "stats.csv").write_text(_csv_text(STATS_FIELDS, rows))
        evals = list(state.archive.values())[self._archived :]
        with open(self.root / "archive.jsonl", "a") as f:
            for ev in evals:
                f.write(json.dumps(ev.to_dict(state.config, state.penalty), sort_keys=True) + "\n")
        with open(self.root / "timings.csv", "a") as f:
            for ev in evals:
                f.write(f"{ev.identifier},{ev.generation},{ev.seconds:.4f},{ev.epochs}\n")
        self._archived += len(evals)

    def write_architecture(self, state: RunState, identifier: str) -> None:
        ev = state.archive[identifier]
        self.arch_dir.mkdir(exist_ok=True)
        (self.arch_dir / f"{identifier}.json").write_text(serialize(ev.architecture) + "\n")
        (self.arch_dir / f"{identifier}.dot").write_text(to_dot(ev.architecture))
        if ev.params is not None:
            self.ckpt_dir.mkdir(exist_ok=True)
            save_npz(self.ckpt_dir / f"{identifier}.npz", ev.params.to_arrays())

    def finalize(self, state: RunState, svg: bool = True) -> None:
        front = state.pareto_front()
        check_nondominated(front)
        labels = list(state.config.objectives)
        rows = []
        for ind in front:
            ev = state.archive[ind.identifier]
            rows.append([ind.identifier, *(repr(v) for v in ind.objectives), ev.block_count, ev.param_count,
                         ev.parent or "", ev.diverged])
        header = ["identifier", *labels, "blocks", "params", "parent", "diverged"]
        (self.root / "pareto.csv").write_text(_csv_text(header, rows))
        for ident in sorted({i.identifier for i in front} | {i.identifier for i in state.population}):
            self.write_architecture(state, ident)
        if svg:
            (self.root / "stats.svg").write_text(stats_svg(state.stats))


def read_stats(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def read_archive(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def stats_svg(stats, width: int = 640, height: int = 320) -> str:
    """Two-panel line chart: mean block count and mean test loss per generation."""
    pad = 40
    panel_w = (width - 3 * pad) / 2
    panel_h = height - 2 * pad
    gens = [s.generation for s in stats]
    series = [
        ("mean block count", [s.mean_block_count for s in stats]),
        ("mean test loss", [s.mean_loss for s in stats]),
    ]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    g_lo, g_hi = (min(gens), max(gens)) if gens else (0, 1)
    g_span = (g_hi - g_lo) or 1
    for k, (title, ys) in enumerate(series):
        x0 = pad + k * (panel_w + pad)
        y0 = pad
        parts.append(f'<rect x="{x0:.1f}" y="{y0}" width="{panel_w:.1f}" height="{panel_h}" '
                     f'fill="none" stroke="#888"/>')
        parts.append(f'<text x="{x0:.1f}" y="{y0 - 8}">{title}</text>')
        if not ys:
            continue
        lo, hi = min(ys), max(ys)
        span = (hi - lo) or 1.0
        pts = " ".join(
            f"{x0 + (g - g_lo) / g_span * panel_w:.1f},{y0 + panel_h - (y - lo) / span * panel_h:.1f}"
            for g, y in zip(gens, ys)
        )
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
        parts.append(f'<text x="{x0 + 2:.1f}" y="{y0 + 12}">{hi:.4g}</text>')
        parts.append(f'<text x="{x0 + 2:.1f}" y="{y0 + panel_h - 4}">{lo:.4g}</text>')
        parts.append(f'<text x="{x0 + panel_w / 2:.1f}" y="{y0 + panel_h + 16}">generation</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
