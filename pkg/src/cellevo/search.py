"""The evolutionary search loop.

Population initialisation (seed cells plus random architectures), fitness
evaluation with parameter inheritance, NSGA-II survivor selection, and an
archive of every evaluated architecture.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nsga
from .cell import Diverged, NonFiniteValue, ParamStore, TrainConfig, param_count, train
from .encoding import SEEDS, Architecture, block_count, structural_key
from .morphism import IdentifierPool, MorphismRecord, generate_offspring, random_initial_architecture
from .tasks import Datasets, build_model, evaluate_sequence_mse, make_datasets, sequence_objective

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OBJECTIVES = ("test_loss", "block_count", "param_count")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    population_size: int = 20
    offspring: int = 20
    max_parents: int | None = None
    max_transforms: int = 3
    initial_transforms: int = 10
    generations: int = 10
    objectives: tuple[str, ...] = ("test_loss", "block_count")
    seeds: tuple[str, ...] = ("basic_rnn",)
    seed: int = 0
    penalty_loss: float | None = None
    full_epochs: int = 30
    reduced_epochs: int = 5
    divergence_threshold: float = 5.0
    # task
    train_size: int = 500
    test_size: int = 100
    n_min: int = 1
    n_max: int = 10
    hidden_dim: int = 32
    learning_rate: float = 0.01
    clip: float | None = 5.0
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "objectives", tuple(self.objectives))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.population_size < 2:
            raise ConfigError("population_size must be at least 2")
        if self.offspring < 1:
            raise ConfigError("offspring must be at least 1")
        if self.max_parents is not None and not 1 <= self.max_parents <= self.population_size:
            raise ConfigError("max_parents must lie in [1, population_size]")
        if self.max_transforms < 1 or self.initial_transforms < 1:
            raise ConfigError("transform counts must be at least 1")
        if self.generations < 0:
            raise ConfigError("generations must be nonnegative")
        if not self.objectives or self.objectives[0] != "test_loss":
            raise ConfigError("the first objective must be test_loss")
        if len(self.objectives) < 2 or any(o not in OBJECTIVES for o in self.objectives):
            raise ConfigError(f"objectives must be test_loss followed by some of {OBJECTIVES[1:]}")
        unknown = [s for s in self.seeds if s not in SEEDS]
        if unknown:
            raise ConfigError(f"unknown seed architectures {unknown}; known: {sorted(SEEDS)}")
        if len(self.seeds) > self.population_size:
            raise ConfigError("more seed architectures than population slots")
        if self.full_epochs < 0 or self.reduced_epochs < 0:
            raise ConfigError("epoch budgets must be nonnegative")
        if self.hidden_dim < 1 or self.learning_rate <= 0:
            raise ConfigError("hidden_dim and learning_rate must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @property
    def parent_cap(self) -> int:
        return self.population_size if self.max_parents is None else self.max_parents

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["objectives"] = list(self.objectives)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "schema_version" not in d:
            raise ConfigError("config lacks schema_version")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def make_task_data(config: SearchConfig) -> Datasets:
    return make_datasets(config.train_size, config.test_size, config.n_min, config.n_max, config.seed)


# ------------------------------------------------------------------ fitness


@dataclass
class Evaluation:
    identifier: str
    architecture: Architecture
    generation: int
    parent: str | None = None
    record: MorphismRecord | None = None
    test_loss: float = math.nan
    diverged: bool = False
    epochs: int = 0
    initial_loss: float | None = None
    param_count: int = 0
    structure: str = ""
    cached_from: str | None = None
    seconds: float = 0.0
    params: ParamStore | None = field(default=None, repr=False)

    @property
    def block_count(self) -> int:
        return block_count(self.architecture)

    def objective(self, name: str, penalty: float) -> float:
        if name == "test_loss":
            return penalty if self.diverged else self.test_loss
        if name == "block_count":
            return float(self.block_count)
        if name == "param_count":
            return float(self.param_count)
        raise KeyError(name)

    def to_dict(self, config: SearchConfig, penalty: float) -> dict:
        from .encoding import to_dict

        return {
            "identifier": self.identifier,
            "generation": self.generation,
            "parent": self.parent,
            "objectives": {o: self.objective(o, penalty) for o in config.objectives},
            "test_loss": None if self.diverged else self.test_loss,
            "diverged": self.diverged,
            "block_count": self.block_count,
            "param_count": self.param_count,
            "epochs": self.epochs,
            "initial_loss": self.initial_loss,
            "structure": self.structure,
            "cached_from": self.cached_from,
            "record": None if self.record is None else self.record.to_dict(),
            "architecture": to_dict(self.architecture),
        }


def epoch_budget(parent_metric: float | None, offspring_initial_metric: float | None, config: SearchConfig) -> int:
    """Full training unless an offspring starts close to its parent's metric."""
    if parent_metric is None:
        return config.full_epochs
    if offspring_initial_metric is None or not math.isfinite(offspring_initial_metric):
        return config.full_epochs
    if abs(offspring_initial_metric - parent_metric) > config.divergence_threshold:
        return config.full_epochs
    return config.reduced_epochs


def structure_hash(arch: Architecture) -> str:
    return hashlib.sha1(structural_key(arch).encode()).hexdigest()[:16]


def individual_seed(run_seed: int, identifier: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([run_seed, zlib.crc32(identifier.encode())])


def evaluate_fitness(
    arch: Architecture,
    datasets: Datasets,
    config: SearchConfig,
    parent: Evaluation | None = None,
    generation: int = 0,
    record: MorphismRecord | None = None,
) -> Evaluation:
    """Train ``arch`` (inheriting from ``parent`` when given) and score it on the test set.

    Training failures are recorded as ``diverged``; they never raise.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(individual_seed(config.seed, arch.identifier))
    inherited = None if parent is None else parent.params
    model = build_model(arch, config.hidden_dim, rng, inherited)
    ev = Evaluation(
        identifier=arch.identifier,
        architecture=arch,
        generation=generation,
        parent=None if parent is None else parent.identifier,
        record=record,
        param_count=param_count(model.program),
        structure=structure_hash(arch),
    )
    parent_loss = None
    if parent is not None:
        parent_loss = parent.test_loss if not parent.diverged else None
        try:
            ev.initial_loss = evaluate_sequence_mse(model, datasets.test)
        except NonFiniteValue:
            ev.initial_loss = None
        if ev.initial_loss is not None and not math.isfinite(ev.initial_loss):
            ev.initial_loss = None
    ev.epochs = epoch_budget(parent_loss, ev.initial_loss, config) if parent is not None else config.full_epochs
    tc = TrainConfig(config.learning_rate, ev.epochs, config.clip, int(rng.integers(2**31)))
    try:
        params, _ = train(model.program, model.params, datasets.train, tc, sequence_objective)
        model.params = params
        loss = evaluate_sequence_mse(model, datasets.test)
        if not math.isfinite(loss):
            raise Diverged("non-finite test loss")
        ev.test_loss = loss
        ev.params = params
    except (Diverged, NonFiniteValue) as exc:
        log.info("%s diverged: %s", arch.identifier, exc)
        ev.diverged = True
        ev.params = None
    ev.seconds = time.perf_counter() - start
    return ev


def _evaluate_job(job):
    arch, datasets, config, parent, generation, record = job
    return evaluate_fitness(arch, datasets, config, parent, generation, record)


# ------------------------------------------------------------------- state


@dataclass
class GenerationStats:
    generation: int
    mean_block_count: float
    mean_loss: float
    best_loss: float
    min_block_count: int
    front_sizes: tuple[int, ...]
    evaluated: int

    def row(self) -> dict:
        return {
            "generation": self.generation,
            "mean_block_count": repr(self.mean_block_count),
            "mean_test_loss": repr(self.mean_loss),
            "best_test_loss": repr(self.best_loss),
            "min_block_count": self.min_block_count,
            "front_sizes": ";".join(str(n) for n in self.front_sizes),
            "archive_size": self.evaluated,
        }


@dataclass
class RunState:
    config: SearchConfig
    generation: int = 0
    population: list[nsga.Individual] = field(default_factory=list)
    offspring: list[nsga.Individual] = field(default_factory=list)
    archive: dict[str, Evaluation] = field(default_factory=dict)
    stats: list[GenerationStats] = field(default_factory=list)
    penalty: float = 0.0
    cache: dict[str, str] = field(default_factory=dict)  # structure hash -> identifier

    def evaluation(self, ind: nsga.Individual | str) -> Evaluation:
        return self.archive[ind if isinstance(ind, str) else ind.identifier]

    def fronts(self) -> list[list[nsga.Individual]]:
        return nsga.fast_nondominated_sort(self.population)

    def pareto_front(self) -> list[nsga.Individual]:
        return sorted(self.fronts()[0], key=lambda i: i.objectives)


def generation_stats(population, archive: dict[str, Evaluation] | None = None, generation: int = 0, penalty: float = 0.0):
    """Means over the population plus the sizes of its nondominated fronts.

    ``population`` holds Individuals (objective 0 is the loss); block counts
    come from the archive when given, otherwise from objective 1.
    """
    pop = list(population)
    if archive is not None:
        blocks = [archive[p.identifier].block_count for p in pop]
    else:
        blocks = [int(p.objectives[1]) for p in pop]
    losses = [p.objectives[0] for p in pop]
    fronts = nsga.fast_nondominated_sort(pop)
    return GenerationStats(
        generation=generation,
        mean_block_count=float(np.mean(blocks)),
        mean_loss=float(np.mean(losses)),
        best_loss=float(min(losses)),
        min_block_count=int(min(blocks)),
        front_sizes=tuple(len(f) for f in fronts),
        evaluated=0 if archive is None else len(archive),
    )


def initialize_population(config: SearchConfig, rng, pool: IdentifierPool) -> list[Architecture]:
    """Seed cells first (named e.g. LSTM_0), then random architectures rdm0_0, rdm1_0, ..."""
    if len(config.seeds) > config.population_size:
        raise ConfigError("more seed architectures than population slots")
    archs = []
    for name in config.seeds:
        encode, prefix = SEEDS[name]
        archs.append(encode(pool.register(f"{prefix}_0")))
    while len(archs) < config.population_size:
        archs.append(random_initial_architecture(rng, pool, config.initial_transforms))
    return archs


class Search:
    """Runs the generational loop; ``observer`` is called after every generation."""

    def __init__(self, config: SearchConfig, datasets: Datasets | None = None,
                 observer: Callable[[RunState], None] | None = None):
        self.config = config
        self.datasets = datasets or make_task_data(config)
        self.observer = observer
        self.rng = np.random.default_rng(config.seed)
        self.pool = IdentifierPool()
        self.state = RunState(config)

    # -- evaluation ----------------------------------------------------

    def _evaluate(self, jobs) -> list[Evaluation]:
        """Evaluate (arch, parent, record) triples, reusing cached structures."""
        state = self.state
        out: list[Evaluation | None] = [None] * len(jobs)
        todo = []
        for n, (arch, parent, record) in enumerate(jobs):
            key = structure_hash(arch)
            hit = state.cache.get(key)
            if hit is not None:
                src = state.archive[hit]
                out[n] = dataclasses.replace(
                    src,
                    identifier=arch.identifier,
                    architecture=arch,
                    generation=state.generation,
                    parent=None if parent is None else parent.identifier,
                    record=record,
                    cached_from=src.cached_from or src.identifier,
                    epochs=0,
                    initial_loss=None,
                    seconds=0.0,
                )
            else:
                todo.append((n, (arch, self.datasets, self.config, parent, state.generation, record)))
        if self.config.workers > 1 and len(todo) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(self.config.workers) as ex:
                results = list(ex.map(_evaluate_job, [j for _, j in todo]))
        else:
            results = [_evaluate_job(j) for _, j in todo]
        for (n, _), ev in zip(todo, results):
            out[n] = ev
        for ev in out:
            state.archive[ev.identifier] = ev
            state.cache.setdefault(ev.structure, ev.identifier)
        return out

    def _individual(self, ev: Evaluation) -> nsga.Individual:
        return nsga.Individual(
            ev.identifier,
            tuple(ev.objective(o, self.state.penalty) for o in self.config.objectives),
            self.config.objectives,
            parent=ev.parent,
        )

    def _record_stats(self):
        s = self.state
        s.stats.append(generation_stats(s.population, s.archive, s.generation, s.penalty))
        if self.observer is not None:
            self.observer(s)

    # -- loop ------------------------------------------------------------

    def initialize(self) -> RunState:
        s = self.state
        archs = initialize_population(self.config, self.rng, self.pool)
        evals = self._evaluate([(a, None, None) for a in archs])
        if self.config.penalty_loss is not None:
            s.penalty = float(self.config.penalty_loss)
        else:
            finite = [e.test_loss for e in evals if not e.diverged]
            s.penalty = 10.0 * max(finite) if finite else 1.0
        s.population = [self._individual(e) for e in evals]
        nsga.assign(s.population)
        self._record_stats()
        return s

    def make_offspring(self) -> list[tuple[Architecture, Evaluation, MorphismRecord]]:
        s = self.state
        candidates = nsga.max_parents_cap(s.population, self.config.parent_cap)
        winners = nsga.tournament_selection(candidates, min(self.config.offspring, len(candidates)), self.rng)
        out = []
        for j in range(self.config.offspring):
            parent = s.archive[winners[j % len(winners)].identifier]
            child, record = generate_offspring(parent.architecture, self.config.max_transforms, self.rng, self.pool)
            out.append((child, parent, record))
        return out

    def step(self) -> RunState:
        s = self.state
        s.generation += 1
        jobs = self.make_offspring()
        evals = self._evaluate(jobs)
        s.offspring = [self._individual(e) for e in evals]
        s.population = nsga.survivor_selection(s.population + s.offspring, self.config.population_size)
        nsga.assign(s.population)
        self._record_stats()
        return s

    def run(self) -> RunState:
        self.initialize()
        for _ in range(self.config.generations):
            self.step()
        return self.state


def run_search(config: SearchConfig, datasets: Datasets | None = None, observer=None) -> RunState:
    return Search(config, datasets, observer).run()
