"""NSGA-II selection machinery (minimisation)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cmp_to_key
from typing import Sequence

INF = math.inf


class ArityMismatch(ValueError):
    pass


class EmptyPopulation(ValueError):
    pass


class InsufficientPopulation(ValueError):
    pass


@dataclass
class Individual:
    identifier: str
    objectives: tuple[float, ...]
    labels: tuple[str, ...] = ("test_loss", "block_count")
    parent: str | None = None
    rank: int = 0
    crowding: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.objectives = tuple(float(v) for v in self.objectives)
        if not all(math.isfinite(v) for v in self.objectives):
            raise ValueError(f"{self.identifier}: objectives must be finite, got {self.objectives}")


def _values(v):
    return v.objectives if isinstance(v, Individual) else tuple(v)


def dominates(a, b) -> bool:
    """True when ``a`` is no worse than ``b`` everywhere and better somewhere."""
    a, b = _values(a), _values(b)
    if len(a) != len(b):
        raise ArityMismatch(f"{len(a)} vs {len(b)} objectives")
    better = False
    for x, y in zip(a, b):
        if x > y:
            return False
        if x < y:
            better = True
    return better


def fast_nondominated_sort(pop: Sequence[Individual]) -> list[list[Individual]]:
    """Partition ``pop`` into fronts F1, F2, ... and set each ``rank`` (1-based)."""
    if not pop:
        raise EmptyPopulation("cannot sort an empty population")
    m = len(pop[0].objectives)
    if any(len(p.objectives) != m for p in pop):
        raise ArityMismatch("inconsistent objective arity")
    n = len(pop)
    dominated_by_me: list[list[int]] = [[] for _ in range(n)]
    count = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(pop[i], pop[j]):
                dominated_by_me[i].append(j)
                count[j] += 1
            elif dominates(pop[j], pop[i]):
                dominated_by_me[j].append(i)
                count[i] += 1
    current = [i for i in range(n) if count[i] == 0]
    fronts = []
    rank = 1
    while current:
        for i in current:
            pop[i].rank = rank
        fronts.append([pop[i] for i in current])
        nxt = []
        for i in current:
            for j in dominated_by_me[i]:
                count[j] -= 1
                if count[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
        rank += 1
    return fronts


def crowding_distance(front: Sequence[Individual]) -> list[float]:
    """Per-individual crowding distance; also stored on each individual."""
    n = len(front)
    dist = [0.0] * n
    if n == 0:
        return dist
    m = len(front[0].objectives)
    for k in range(m):
        order = sorted(range(n), key=lambda i: (front[i].objectives[k], front[i].identifier))
        lo = front[order[0]].objectives[k]
        hi = front[order[-1]].objectives[k]
        dist[order[0]] = INF
        dist[order[-1]] = INF
        span = hi - lo
        if span == 0:
            continue
        for pos in range(1, n - 1):
            i = order[pos]
            if dist[i] != INF:
                dist[i] += (front[order[pos + 1]].objectives[k] - front[order[pos - 1]].objectives[k]) / span
    for ind, d in zip(front, dist):
        ind.crowding = d
    return dist


def crowded_compare(a: Individual, b: Individual) -> int:
    """Negative when ``a`` is preferred: lower rank, then larger crowding, then identifier."""
    if a.rank != b.rank:
        return -1 if a.rank < b.rank else 1
    if a.crowding != b.crowding:
        return -1 if a.crowding > b.crowding else 1
    if a.identifier != b.identifier:
        return -1 if a.identifier < b.identifier else 1
    return 0


crowded_key = cmp_to_key(crowded_compare)


def assign(pop: Sequence[Individual]) -> list[list[Individual]]:
    """Sort into fronts and set rank and crowding distance on every individual."""
    fronts = fast_nondominated_sort(pop)
    for f in fronts:
        crowding_distance(f)
    return fronts


def tournament_selection(pop: Sequence[Individual], count: int, rng) -> list[Individual]:
    """``count`` binary tournaments, contestants drawn with replacement."""
    if not pop:
        raise EmptyPopulation("no individuals to select from")
    winners = []
    n = len(pop)
    for _ in range(count):
        i, j = rng.integers(n, size=2)
        a, b = pop[i], pop[j]
        winners.append(a if crowded_compare(a, b) <= 0 else b)
    return winners


def survivor_selection(combined: Sequence[Individual], n: int) -> list[Individual]:
    """Elitist NSGA-II truncation of ``combined`` to ``n`` individuals."""
    if len(combined) < n:
        raise InsufficientPopulation(f"need {n} individuals, have {len(combined)}")
    out: list[Individual] = []
    for front in assign(combined):
        if len(out) + len(front) <= n:
            out.extend(front)
        else:
            out.extend(sorted(front, key=crowded_key)[: n - len(out)])
        if len(out) == n:
            break
    return out


def max_parents_cap(pop: Sequence[Individual], cap: int) -> list[Individual]:
    """The best ``cap`` individuals by crowded comparison (all of them if cap >= len)."""
    if cap >= len(pop):
        return list(pop)
    return sorted(pop, key=crowded_key)[:cap]
