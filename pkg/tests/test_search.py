import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lvnas.architecture import Genome, LayerKind, parse_genome, random_genome, render_genome
from lvnas.search import (
    Candidate, EvalRecord, SearchConfig, crossover, hamming_surrogate, init_population, mutate, run_random_search,
    run_search, update_topk,
)
from lvnas.tensor import make_rng

genomes = st.lists(st.sampled_from(list(LayerKind)), min_size=1, max_size=24).map(Genome)


def brute_topk(history, k):
    best = {}
    for g, f in history:
        best[g] = max(f, best.get(g, -np.inf))
    return sorted(best.items(), key=lambda gf: (-gf[1], render_genome(gf[0])))[:k]


def test_config_defaults_and_validation():
    c = SearchConfig()
    assert (c.population, c.iterations, c.n_crossover, c.n_mutation, c.mutation_prob, c.top_k) == (50, 20, 25, 25, 0.1, 10)
    for bad in [dict(n_crossover=20), dict(top_k=60), dict(mutation_prob=1.5), dict(population=0, n_crossover=0, n_mutation=0)]:
        with pytest.raises(ValueError):
            SearchConfig(**bad)


def test_init_population():
    pop = init_population(make_rng(0), 1, 5)
    assert len(pop) == 1 and len(pop[0]) == 5
    assert init_population(make_rng(3), 10, 6) == init_population(make_rng(3), 10, 6)
    restricted = init_population(make_rng(1), 200, 24, {LayerKind.SA, LayerKind.FF})
    assert {c for g in restricted for c in g.codes()} == {1, 2}


def test_update_topk_against_sort_oracle():
    rng = make_rng(4)
    fit = lambda g: float(rng.integers(0, 20)) / 20  # many ties
    topk, history = [], []
    for _ in range(20):
        batch = [Candidate(g, fit(g)) for g in init_population(rng, 10, 4)]
        history += [(c.genome, c.fitness) for c in batch]
        topk = update_topk(topk, batch, 7)
        assert [(c.genome, c.fitness) for c in topk] == brute_topk(history, 7)
    assert len(history) == 200


def test_update_topk_unchanged_by_worse_and_k1():
    top = [Candidate(Genome([0, 1]), 0.9), Candidate(Genome([1, 1]), 0.8)]
    assert update_topk(top, [Candidate(Genome([2, 2]), 0.1)], 2) == top
    assert update_topk(top, [Candidate(Genome([2, 2]), 0.95)], 1) == [Candidate(Genome([2, 2]), 0.95)]
    tie = update_topk([], [Candidate(Genome([2]), 0.5), Candidate(Genome([0]), 0.5)], 1)
    assert render_genome(tie[0].genome) == "c"


@settings(max_examples=60)
@given(genomes, st.data())
def test_crossover_gene_provenance(a, data):
    b = Genome(data.draw(st.lists(st.sampled_from(list(LayerKind)), min_size=len(a), max_size=len(a))))
    seed = data.draw(st.integers(0, 2**32 - 1))
    kids = crossover(make_rng(seed), [Candidate(a, 1.0), Candidate(b, 0.5)], 8)
    assert len(kids) == 8
    for kid in kids:
        assert all(k in (x, y) for k, x, y in zip(kid, a, b))


def test_crossover_identical_parents_and_hamming_half():
    p = random_genome(make_rng(0), 24)
    assert crossover(make_rng(1), [Candidate(p, 1.0)], 5) == [p] * 5
    a = Genome([0] * 24)
    b = Genome([1] * 24)
    kids = crossover(make_rng(2), [Candidate(a, 1.0), Candidate(b, 1.0)], 4000)
    d = np.array([sum(x != y for x, y in zip(k, a)) for k in kids])
    # each gene from A with probability 1/2: Binomial(24, 1/2), mean 12, sd of mean sqrt(6/4000)
    assert abs(d.mean() - 12) < 5 * np.sqrt(6 / 4000)


def test_mutation_examples():
    p = random_genome(make_rng(0), 24)
    top = [Candidate(p, 1.0)]
    assert mutate(make_rng(1), top, 10, 0.0) == [p] * 10
    assert mutate(make_rng(1), top, 3, 1.0, {LayerKind.SA}) == [Genome([LayerKind.SA] * 24)] * 3
    with pytest.raises(ValueError):
        mutate(make_rng(1), top, 3, 1.1)
    with pytest.raises(ValueError):
        mutate(make_rng(1), [], 3, 0.1)


def test_mutation_change_rate_binomial():
    p = random_genome(make_rng(0), 24)
    kids = mutate(make_rng(5), [Candidate(p, 1.0)], 10_000, 0.1)
    changed = np.array([sum(x != y for x, y in zip(k, p)) for k in kids])
    q = 0.1 * 2 / 3
    assert abs(changed.mean() - 24 * q) < 5 * np.sqrt(24 * q * (1 - q) / 10_000)


def test_mutation_respects_allowed():
    p = Genome([LayerKind.SA] * 12)
    kids = mutate(make_rng(0), [Candidate(p, 1.0)], 500, 0.5, {LayerKind.SA, LayerKind.FF})
    assert all(LayerKind.DC not in k for k in kids)


def test_degenerate_search_returns_better_of_two():
    target = Genome([0, 1, 2, 0])
    fit = hamming_surrogate(target)
    rng = make_rng(7)
    first_two = init_population(make_rng(7), 2, 4)
    res = run_search(fit, SearchConfig(population=2, iterations=1, n_crossover=1, n_mutation=1, top_k=1), rng, 4)
    assert res.best.fitness == max(fit(g) for g in first_two)
    assert len(res.history) == len(set(first_two))


def test_search_invariants_on_surrogate():
    target = random_genome(make_rng(99), 12)
    fit = hamming_surrogate(target)
    calls = []
    res = run_search(lambda g: calls.append(g) or fit(g), SearchConfig(population=10, iterations=6, n_crossover=5,
                                                                       n_mutation=5, top_k=3), make_rng(0), 12)
    assert len(calls) == len(set(calls)) == len(res.history)  # cache: nothing scored twice
    assert all(b >= a for a, b in zip(res.running_max, res.running_max[1:]))
    hist = [(g, fit(g)) for g in calls]
    assert [(c.genome, c.fitness) for c in res.topk] == brute_topk(hist, 3)
    assert res.best == res.topk[0]
    assert [r.candidate_index for r in res.history if r.iteration == 1] == list(range(10))


def test_search_is_bitwise_reproducible(tmp_path):
    fit = hamming_surrogate(random_genome(make_rng(1), 24))
    logs = []
    for i in range(2):
        res = run_search(fit, SearchConfig(), make_rng(3), 24, run_id="r")
        res.write_log(tmp_path / f"{i}.jsonl")
        logs.append((tmp_path / f"{i}.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_log_schema(tmp_path):
    res = run_search(hamming_surrogate(Genome([1, 2])), SearchConfig(population=4, iterations=2, n_crossover=2,
                                                                      n_mutation=2, top_k=2), make_rng(0), 2,
                     run_id="abc")
    res.write_log(tmp_path / "log")
    lines = (tmp_path / "log").read_text().splitlines()
    rec = json.loads(lines[0])
    assert list(rec) == ["run_id", "iteration", "candidate_index", "genome", "fitness", "wall_ms"]
    assert rec["run_id"] == "abc" and rec["wall_ms"] == 0
    summary = json.loads(lines[-1])
    assert summary["summary"] is True and summary["best_genome"] == render_genome(res.best.genome)
    assert len(lines) == len(res.history) + 1
    assert rec["fitness"] == hamming_surrogate(Genome([1, 2]))(parse_genome(rec["genome"], 2))


def test_fitness_printed_with_17_significant_digits():
    line = EvalRecord("r", 1, 0, "csf", 1 / 3, 0).to_line()
    assert '"fitness": 0.33333333333333331' in line
    assert float(json.loads(line)["fitness"]) == 1 / 3


def test_random_search_budget_and_history():
    fit = hamming_surrogate(random_genome(make_rng(0), 8))
    one = run_random_search(fit, 1, make_rng(4), 8)
    assert one.best.genome == random_genome(make_rng(4), 8) and len(one.history) == 1
    res = run_random_search(fit, 300, make_rng(5), 8)
    assert len(res.history) == 300
    assert res.best.fitness == max(r.fitness for r in res.history)
    with pytest.raises(ValueError):
        run_random_search(fit, 0, make_rng(5), 8)


def test_evolution_finds_hidden_target_quickly():
    """A smaller instance of the surrogate benchmark, kept fast for the unit suite."""
    hits = 0
    for seed in range(3):
        target = random_genome(make_rng([seed, 1]), 24)
        res = run_search(hamming_surrogate(target), SearchConfig(), make_rng([seed, 2]), 24)
        hits += res.best.genome == target
    assert hits >= 2
