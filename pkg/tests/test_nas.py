import json

import numpy as np
import pytest

from quadranet import nas
from quadranet import network as N
from quadranet.blocks import BlockSpec

SKELETON = N.NetworkSpec(4, (0, 0, 0, 0), BlockSpec("quadra", 3, 2), num_classes=4, input_size=32)


def space(slots=(0, 0, 2, 0), **kw):
    return nas.SearchSpace(SKELETON, slots=slots, **kw)


def table_fitness(sp, seed):
    """Deterministic pseudo-random fitness per genome, for fast search tests."""
    values = {g: float(np.random.default_rng([seed, *g]).random()) for g in sp.enumerate()}
    return lambda g: values[tuple(g)]


def test_space_layout():
    sp = space()
    assert len(sp.candidates) == 7 and sp.candidates[-1] == nas.IDENTITY
    assert sp.size == 49 and sp.slot_names == ["s3.1", "s3.2"]
    g = (2, 6)
    assert sp.genome_string(g) == "s3.1=Q5x2,s3.2=ID"
    assert sp.parse_genome("s3.2=ID,s3.1=Q5x2") == g
    with pytest.raises(ValueError):
        sp.parse_genome("s3.1=Q5x2")
    with pytest.raises(ValueError):
        sp.check((7, 0))


def test_identity_genome_costs_the_skeleton():
    sp = space()
    assert sp.cost(sp.identity_genome()).proxy_latency == sp.skeleton_cost()
    assert all(sp.cost(g).proxy_latency > sp.skeleton_cost() for g in sp.enumerate() if g != (6, 6))


def test_mutate_hamming_one_and_deterministic():
    sp = space()
    for seed in range(50):
        parent = tuple(np.random.default_rng(seed).integers(7, size=2))
        child = nas.mutate(sp, parent, seed)
        assert sum(a != b for a, b in zip(parent, child)) == 1
        assert nas.mutate(sp, parent, seed) == child


def test_mutate_is_uniform_over_other_candidates():
    sp = space(slots=(1, 0, 0, 0))
    counts = np.bincount([nas.mutate(sp, (3,), s)[0] for s in range(7000)], minlength=7)
    assert counts[3] == 0
    assert np.all(np.abs(counts[np.arange(7) != 3] - 7000 / 6) < 5 * np.sqrt(7000 / 6))


def test_mutate_single_candidate_space():
    sp = space(kernels=(3,), expansions=(2,), include_identity=False)
    with pytest.raises(nas.MutationError):
        nas.mutate(sp, (0, 0), 0)


def test_search_matches_exhaustive_unbounded():
    sp = space(slots=(0, 0, 1, 0))
    ev = nas.Evaluator(sp, fitness_fn=table_fitness(sp, 1))
    best = nas.exhaustive(sp, float("inf"), ev)
    res = nas.search(sp, float("inf"), ev, seed=0, population=4, sample=2, generations=10)
    assert res.best.genome == best.genome and res.best.fitness == best.fitness


@pytest.mark.parametrize("seed", range(5))
def test_search_matches_exhaustive_under_budget(seed):
    sp = space()
    ev = nas.Evaluator(sp, fitness_fn=table_fitness(sp, seed))
    lats = sorted(sp.cost(g).proxy_latency for g in sp.enumerate())
    budget = lats[len(lats) // 2]
    res = nas.search(sp, budget, ev, seed=seed, generations=50)
    assert res.best.feasible and res.best.genome == nas.exhaustive(sp, budget, ev).genome
    assert all(sp.cost(g).proxy_latency <= budget for g in res.history)


def test_budget_monotonicity():
    sp = space()
    ev = nas.Evaluator(sp, fitness_fn=table_fitness(sp, 9))
    lats = sorted({sp.cost(g).proxy_latency for g in sp.enumerate()})
    prev = None
    for b in lats[::5] + [lats[-1]]:
        best = nas.exhaustive(sp, b, ev)
        assert best.cost.proxy_latency <= b
        if prev is not None:
            assert prev.fitness <= best.fitness
        prev = best


def test_budget_just_above_skeleton_gives_identity():
    sp = space()
    ev = nas.Evaluator(sp, fitness_fn=table_fitness(sp, 0))
    res = nas.search(sp, sp.skeleton_cost() + 1.0, ev, seed=0, generations=5)
    assert res.best.genome == sp.identity_genome()


def test_infeasible_budget_names_skeleton_cost():
    sp = space()
    ev = nas.Evaluator(sp, fitness_fn=table_fitness(sp, 0))
    with pytest.raises(nas.InfeasibleBudgetError) as err:
        nas.search(sp, sp.skeleton_cost() - 1.0, ev)
    assert f"{sp.skeleton_cost():.6g}" in str(err.value)
    with pytest.raises(nas.InfeasibleBudgetError):
        nas.exhaustive(sp, 0.0, ev)


def test_search_determinism_and_json():
    sp = space()
    runs = [nas.search(sp, float("inf"), nas.Evaluator(sp, fitness_fn=table_fitness(sp, 2)), seed=3,
                       generations=20) for _ in range(2)]
    assert runs[0].history == runs[1].history
    doc = json.loads(runs[0].to_json(sp))
    assert doc["seed"] == 3 and doc["genome"] == sp.genome_string(runs[0].best.genome)


@pytest.fixture(scope="module")
def tiny_task():
    sp = space(slots=(1, 0, 0, 0))
    return sp, nas.make_task(sp, nas.EvalConfig(n_train=64, n_val=200))


def test_untrained_fitness_is_chance(tiny_task):
    sp, task = tiny_task
    for seed in range(3):
        acc = nas.evaluate(sp, (0,), task, train_steps=0, seed=seed)
        assert abs(acc - 0.25) <= 0.1


def test_evaluate_deterministic_and_memoized(tiny_task):
    sp, task = tiny_task
    a = nas.evaluate(sp, (1,), task, train_steps=3, seed=1)
    assert a == nas.evaluate(sp, (1,), task, train_steps=3, seed=1)
    ev = nas.Evaluator(sp, nas.EvalConfig(train_steps=2), task=task)
    first = ev((1,))
    assert ev((1,)) == first and ev.evaluations == 1
    assert ev.evaluate_many([(1,), (1,)]) == [first, first] and ev.evaluations == 1


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("QUADRANET_THREADS", "3")
    assert nas.thread_cap() == 3
    monkeypatch.setenv("QUADRANET_THREADS", "0")
    with pytest.raises(ValueError):
        nas.thread_cap()
    monkeypatch.delenv("QUADRANET_THREADS")
    assert nas.thread_cap() >= 1


def test_parallel_evaluation_matches_serial(monkeypatch):
    sp = space()
    fit = table_fitness(sp, 4)
    genomes = list(sp.enumerate())[:12]
    monkeypatch.setenv("QUADRANET_THREADS", "4")
    ev = nas.Evaluator(sp, fitness_fn=fit)
    assert ev.evaluate_many(genomes + genomes[:3]) == [fit(g) for g in genomes + genomes[:3]]
    assert ev.evaluations == 12


@pytest.mark.slow
def test_identity_genome_loses_to_quadra_blocks():
    # one slot, one quadratic candidate: every genome with a QuadraBlock is (0,)
    sp = space(slots=(1, 0, 0, 0), kernels=(3,), expansions=(2,))
    wins = 0
    for seed in range(10):
        task = nas.make_task(sp, nas.EvalConfig(data_seed=seed))
        ident = nas.evaluate(sp, sp.identity_genome(), task, 500, seed=seed)
        quad = nas.evaluate(sp, (0,), task, 500, seed=seed)
        wins += ident < quad
    assert wins >= 7
