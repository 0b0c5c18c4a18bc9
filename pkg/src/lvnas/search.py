"""Evolutionary search over genomes, plus a budget-matched random-search baseline.

Each iteration scores the current population, merges it into the top-k
pool, and breeds the next population purely from that pool: ``n_crossover``
uniform-crossover children and ``n_mutation`` mutants.  The fittest member
of the pool is returned.  Fitness is cached per genome, so a genome is
scored at most once per run.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .architecture import ALL_KINDS, Genome, LayerKind, random_genome, render_genome

Fitness = Callable[[Genome], float]


@dataclass(frozen=True)
class SearchConfig:
    population: int = 50
    iterations: int = 20
    n_crossover: int = 25
    n_mutation: int = 25
    mutation_prob: float = 0.1
    top_k: int = 10

    def __post_init__(self) -> None:
        if self.population < 1 or self.iterations < 1 or self.top_k < 1:
            raise ValueError("population, iterations and top_k must be positive")
        if self.n_crossover < 0 or self.n_mutation < 0:
            raise ValueError("crossover and mutation counts must be non-negative")
        if self.n_crossover + self.n_mutation != self.population:
            raise ValueError(
                f"n_crossover + n_mutation ({self.n_crossover}+{self.n_mutation}) must equal population {self.population}"
            )
        if self.top_k > self.population:
            raise ValueError("top_k cannot exceed population")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ValueError("mutation_prob must lie in [0, 1]")


@dataclass(frozen=True)
class Candidate:
    genome: Genome
    fitness: float

    def sort_key(self):
        return (-self.fitness, render_genome(self.genome))


@dataclass
class EvalRecord:
    run_id: str
    iteration: int
    candidate_index: int
    genome: str
    fitness: float
    wall_ms: int

    def to_line(self) -> str:
        return (
            "{"
            f'"run_id": {json.dumps(self.run_id)}, "iteration": {self.iteration}, '
            f'"candidate_index": {self.candidate_index}, "genome": "{self.genome}", '
            f'"fitness": {self.fitness:.17g}, "wall_ms": {self.wall_ms}'
            "}"
        )


@dataclass
class SearchResult:
    best: Candidate
    history: list[EvalRecord]
    topk: list[Candidate]
    run_id: str = ""
    running_max: list[float] = field(default_factory=list)

    def summary_line(self) -> str:
        return json.dumps({
            "run_id": self.run_id,
            "summary": True,
            "best_genome": render_genome(self.best.genome),
            "best_fitness": float(f"{self.best.fitness:.17g}"),
            "evaluations": len(self.history),
        })

    def write_log(self, path: str | Path) -> None:
        lines = [r.to_line() for r in self.history] + [self.summary_line()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def init_population(
    rng: np.random.Generator, population: int, n_layers: int, allowed: Iterable[LayerKind] = ALL_KINDS
) -> list[Genome]:
    if population < 1:
        raise ValueError("population must be positive")
    allowed = frozenset(allowed)
    return [random_genome(rng, n_layers, allowed) for _ in range(population)]


def update_topk(topk: Sequence[Candidate], incoming: Iterable[Candidate], k: int) -> list[Candidate]:
    """The ``k`` fittest distinct genomes of ``topk ∪ incoming``; ties go to the smaller genome string."""
    pool: dict[Genome, Candidate] = {c.genome: c for c in topk}
    for c in incoming:
        if c.genome not in pool or c.fitness > pool[c.genome].fitness:
            pool[c.genome] = c
    return sorted(pool.values(), key=Candidate.sort_key)[:k]


def _pick(rng: np.random.Generator, topk: Sequence[Candidate], n: int) -> list[Genome]:
    idx = rng.choice(len(topk), size=n, replace=False) if len(topk) >= n else np.zeros(n, dtype=int)
    return [topk[i].genome for i in idx]


def crossover(rng: np.random.Generator, topk: Sequence[Candidate], n_offspring: int) -> list[Genome]:
    """Uniform crossover: every gene comes from either parent with probability 1/2."""
    if not topk:
        raise ValueError("crossover needs a non-empty top-k set")
    children = []
    for _ in range(n_offspring):
        a, b = _pick(rng, topk, 2)
        take_b = rng.random(len(a)) < 0.5
        children.append(Genome(gb if tb else ga for ga, gb, tb in zip(a, b, take_b)))
    return children


def mutate(
    rng: np.random.Generator,
    topk: Sequence[Candidate],
    n_offspring: int,
    prob: float,
    allowed: Iterable[LayerKind] = ALL_KINDS,
) -> list[Genome]:
    """Each gene of a random top-k parent is redrawn uniformly from ``allowed`` with probability ``prob``.

    A redraw may land on the current kind, so the per-gene change rate is
    ``prob * (|allowed| - 1) / |allowed|``.
    """
    if not topk:
        raise ValueError("mutation needs a non-empty top-k set")
    if not 0.0 <= prob <= 1.0:
        raise ValueError("mutation probability must lie in [0, 1]")
    choices = sorted(LayerKind(k) for k in set(allowed))
    children = []
    for _ in range(n_offspring):
        (parent,) = _pick(rng, topk, 1)
        n = len(parent)
        hit = rng.random(n) < prob
        draws = rng.integers(0, len(choices), size=n)
        children.append(Genome(choices[d] if h else g for g, h, d in zip(parent, hit, draws)))
    return children


class _Scorer:
    """Fitness cache that logs one record per genuine evaluation."""

    def __init__(self, fitness: Fitness, run_id: str, record_time: bool):
        self.fitness = fitness
        self.run_id = run_id
        self.record_time = record_time
        self.cache: dict[Genome, float] = {}
        self.history: list[EvalRecord] = []

    def __call__(self, g: Genome, iteration: int, index: int, *, log_repeats: bool = False) -> float:
        if g in self.cache:
            if log_repeats:
                self._log(g, iteration, index, self.cache[g], 0)
            return self.cache[g]
        t0 = time.perf_counter()
        f = float(self.fitness(g))
        ms = int(round((time.perf_counter() - t0) * 1000)) if self.record_time else 0
        self.cache[g] = f
        self._log(g, iteration, index, f, ms)
        return f

    def _log(self, g, iteration, index, f, ms):
        self.history.append(EvalRecord(self.run_id, iteration, index, render_genome(g), f, ms))


def run_search(
    fitness: Fitness,
    config: SearchConfig,
    rng: np.random.Generator,
    n_layers: int,
    allowed: Iterable[LayerKind] = ALL_KINDS,
    *,
    run_id: str = "search",
    record_time: bool = False,
    on_iteration: Callable[[int, list[Candidate]], None] | None = None,
) -> SearchResult:
    """Evolutionary search maximising ``fitness``.

    ``wall_ms`` in the history is 0 unless ``record_time`` is set, which
    keeps logs bitwise reproducible by default.
    """
    allowed = frozenset(allowed)
    score = _Scorer(fitness, run_id, record_time)
    population = init_population(rng, config.population, n_layers, allowed)
    topk: list[Candidate] = []
    running: list[float] = []
    for it in range(1, config.iterations + 1):
        scored = [Candidate(g, score(g, it, i)) for i, g in enumerate(population)]
        topk = update_topk(topk, scored, config.top_k)
        running.append(topk[0].fitness)
        if on_iteration is not None:
            on_iteration(it, topk)
        population = crossover(rng, topk, config.n_crossover) + mutate(
            rng, topk, config.n_mutation, config.mutation_prob, allowed
        )
    return SearchResult(topk[0], score.history, topk, run_id, running)


def run_random_search(
    fitness: Fitness,
    budget: int,
    rng: np.random.Generator,
    n_layers: int,
    allowed: Iterable[LayerKind] = ALL_KINDS,
    *,
    run_id: str = "random",
    record_time: bool = False,
    top_k: int = 10,
) -> SearchResult:
    """Score ``budget`` uniformly random genomes; one history record per draw."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    allowed = frozenset(allowed)
    score = _Scorer(fitness, run_id, record_time)
    topk: list[Candidate] = []
    running: list[float] = []
    for i in range(budget):
        g = random_genome(rng, n_layers, allowed)
        topk = update_topk(topk, [Candidate(g, score(g, 1, i, log_repeats=True))], top_k)
        running.append(topk[0].fitness)
    return SearchResult(topk[0], score.history, topk, run_id, running)


def hamming_surrogate(target: Genome) -> Fitness:
    """Fitness ``(N - hamming(g, target)) / N``; reaches 1.0 only at ``target``."""
    tgt = np.array(target.codes())

    def fitness(g: Genome) -> float:
        return float((np.array(g.codes()) == tgt).sum()) / len(tgt)

    return fitness
