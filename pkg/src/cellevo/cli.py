"""Command-line interface: ``cellevo search|render|dataset|baselines``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .encoding import SEEDS, ParseError, ValidationError, block_count, deserialize, to_dot
from .persist import ConfigError, RunDirectory, load_config
from .search import SearchConfig, evaluate_fitness, make_task_data, run_search
from .tasks import InvalidRange, generate_anbncn, write_dataset

log = logging.getLogger("cellevo")


class CliError(Exception):
    pass


def _config(args) -> SearchConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def cmd_search(args) -> int:
    config = _config(args)  # fails before out_dir exists
    out = Path(args.out)
    created = not out.exists()
    try:
        run = RunDirectory(out).create(config)
    except (FileExistsError, OSError) as exc:
        raise CliError(str(exc)) from None

    def observe(state):
        run.record_generation(state)
        s = state.stats[-1]
        log.info("generation %d: mean blocks %.2f, best loss %.5g, fronts %s",
                 s.generation, s.mean_block_count, s.best_loss, s.front_sizes)

    try:
        state = run_search(config, observer=observe)
        run.finalize(state, svg=not args.no_svg)
    except KeyboardInterrupt:
        if created and args.cleanup:
            shutil.rmtree(out, ignore_errors=True)
        raise
    front = state.pareto_front()
    print(f"wrote {out} ({len(state.archive)} evaluations, {len(front)} on the final front)")
    return 0


def cmd_render(args) -> int:
    try:
        arch = deserialize(Path(args.arch).read_text())
    except OSError as exc:
        raise CliError(f"cannot read {args.arch}: {exc.strerror or exc}") from None
    except ParseError as exc:
        raise CliError(f"{args.arch}: {exc}") from None
    except ValidationError as exc:
        raise CliError(f"{args.arch}: invalid architecture: {exc}") from None
    dot = to_dot(arch)
    if args.out in (None, "-"):
        sys.stdout.write(dot)
    else:
        Path(args.out).write_text(dot)
    return 0


def cmd_dataset(args) -> int:
    rng = np.random.default_rng(args.seed)
    try:
        strings = generate_anbncn(args.count, args.n_min, args.n_max, rng)
    except InvalidRange as exc:
        raise CliError(str(exc)) from None
    manifest = {"count": args.count, "n_min": args.n_min, "n_max": args.n_max, "seed": args.seed,
                "language": "a^n b^n c^n"}
    write_dataset(args.out, strings, manifest)
    print(f"wrote {len(strings)} strings to {args.out}")
    return 0


def baseline_rows(config: SearchConfig) -> list[tuple[str, float | None, int, int]]:
    datasets = make_task_data(config)
    rows = []
    for name, (encode, prefix) in SEEDS.items():
        ev = evaluate_fitness(encode(f"{prefix}_0"), datasets, config)
        rows.append((ev.identifier, None if ev.diverged else ev.test_loss, block_count(ev.architecture),
                     ev.param_count))
    return rows


def cmd_baselines(args) -> int:
    config = _config(args)
    rows = baseline_rows(config)
    if args.csv:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["identifier", "test_loss", "block_count", "param_count"])
        for ident, loss, blocks, params in rows:
            w.writerow([ident, "" if loss is None else repr(loss), blocks, params])
    else:
        print(f"{'identifier':<10} {'test_loss':>12} {'blocks':>6} {'params':>7}")
        for ident, loss, blocks, params in rows:
            shown = "diverged" if loss is None else f"{loss:.6g}"
            print(f"{ident:<10} {shown:>12} {blocks:>6} {params:>7}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cellevo", description="Multi-objective evolution of recurrent cells.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run an evolutionary search into a run directory")
    s.add_argument("--config", required=True, help="JSON config with schema_version")
    s.add_argument("--out", required=True, help="run directory to create (must be new or empty)")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--no-svg", action="store_true", help="skip the stats chart")
    s.add_argument("--cleanup", action="store_true", help="remove the run directory if interrupted")
    s.set_defaults(func=cmd_search)

    r = sub.add_parser("render", help="write the DOT graph of an architecture document")
    r.add_argument("arch", help="architecture JSON document")
    r.add_argument("--out", help="DOT file to write (default stdout)")
    r.set_defaults(func=cmd_render)

    d = sub.add_parser("dataset", help="generate a^n b^n c^n strings")
    d.add_argument("--count", type=int, default=500)
    d.add_argument("--n-min", type=int, default=1)
    d.add_argument("--n-max", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True, help="text file; a .json manifest is written alongside")
    d.set_defaults(func=cmd_dataset)

    b = sub.add_parser("baselines", help="train the basic RNN, LSTM and GRU cells")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", type=int, help="override the config seed")
    b.add_argument("--csv", action="store_true", help="print CSV instead of a table")
    b.set_defaults(func=cmd_baselines)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError) as exc:
        print(f"cellevo {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
