import itertools
import random
from dataclasses import replace

import pytest

from pipeplan.interference import InterferenceParams
from pipeplan.intertuner import (
    InfeasiblePlan,
    TuneStats,
    enumerate_submeshes,
    solve_inter,
    solve_inter_bruteforce,
    tune,
)
from pipeplan.intratuner import SearchOptions
from pipeplan.pipesim import PipelinePlan, objective
from pipeplan.stagecost import IterationContext, stage_cost
from pipeplan.workload import ClusterSpec, ModelSpec


def cluster(nodes, gpn, mem=16e9, **kw):
    return ClusterSpec(nodes, gpn, mem, 100e12, 0.5, 100e9, 10e9, 10e9, 10e9, **kw)


def test_submeshes():
    assert enumerate_submeshes(cluster(4, 8)) == [(1, 1), (1, 2), (1, 4), (1, 8), (2, 8), (3, 8), (4, 8)]
    assert enumerate_submeshes(cluster(1, 2)) == [(1, 1), (1, 2)]
    assert enumerate_submeshes(cluster(2, 6)) == [(1, 1), (1, 2), (1, 6), (2, 6)]


def test_single_stage_minimizes_g_t_plus_d():
    pts = [(10.0, 5.0), (9.0, 12.0), (12.0, 0.0)]
    sol = solve_inter(4, 1, {(1, 2, (1, 1)): pts}, 2, 1)
    assert sol.objective == min(4 * t + d for t, d in pts) == 45.0
    assert (sol.stages[0].t, sol.stages[0].d) == (10.0, 5.0)


def test_two_stage_hand_example():
    s1 = [(10.0, 5.0), (12.0, 0.0)]
    s2 = [(12.0, 3.0), (10.0, 8.0)]
    values = {(a, b): objective(PipelinePlan(4, (a[0], b[0]), (a[1], b[1]))) for a in s1 for b in s2}
    assert sorted(values.values()) == [55.0, 58.0, 60.0, 63.0]
    sol = solve_inter(4, 2, {(1, 1, (1, 1)): s1, (2, 1, (1, 1)): s2}, 2, 2)
    assert sol.objective == 55.0
    assert [(c.t, c.d) for c in sol.stages] == [(10.0, 5.0), (10.0, 8.0)]


def test_infeasible_totals():
    assert solve_inter(2, 2, {(1, 1, (1, 1)): [(1.0, 0.0)], (2, 1, (1, 1)): [(1.0, 0.0)]}, 3, 2) is None
    assert solve_inter(2, 1, {(1, 1, (1, 1)): None}, 1, 1) is None
    with pytest.raises(ValueError):
        solve_inter(1, 0, {}, 1, 1)


def test_ties_prefer_smallest_encoding():
    tab = {(1, l, m): [(2.0, 0.0)] for l in (1, 2) for m in ((1, 1), (1, 2))}
    tab.update({(2, l, m): [(2.0, 0.0)] for l in (1, 2) for m in ((1, 1), (1, 2))})
    sol = solve_inter(3, 2, tab, 3, 3)
    assert [(c.l, c.mesh) for c in sol.stages] == [(1, (1, 1)), (2, (1, 2))]


def test_incumbent_filters():
    tab = {(1, 1, (1, 1)): [(3.0, 1.0)]}
    assert solve_inter(2, 1, tab, 1, 1, incumbent=6.5) is None
    assert solve_inter(2, 1, tab, 1, 1, incumbent=7.0).objective == 7.0


def _random_table(rng, L, S, meshes, grid=False):
    tab = {}
    for i in range(1, S + 1):
        for l in range(1, L + 1):
            for m in meshes:
                if rng.random() < 0.8:
                    k = rng.randint(1, 3)
                    if grid:
                        pts = {(float(rng.randint(1, 6)), float(rng.randint(0, 6))) for _ in range(k)}
                    else:
                        pts = {(rng.uniform(0.5, 10), rng.uniform(0, 15)) for _ in range(k)}
                    tab[(i, l, m)] = sorted(pts)
    return tab


@pytest.mark.parametrize("grid", [False, True])
def test_matches_bruteforce(grid):
    rng = random.Random(42 + grid)
    for _ in range(60):
        L = rng.randint(1, 8)
        S = rng.randint(1, min(4, L))
        meshes = rng.sample([(1, 1), (1, 2), (2, 2)], rng.randint(1, 3))
        tab = _random_table(rng, L, S, meshes, grid)
        D = sum(m[0] * m[1] for m in (rng.choice(meshes) for _ in range(S)))
        G = rng.randint(1, 8)
        a = solve_inter(G, S, tab, L, D)
        b = solve_inter_bruteforce(G, S, tab, L, D)
        assert (a is None) == (b is None)
        if a is not None:
            assert a.objective == b.objective
            assert a.encoding() == b.encoding()


# -- end-to-end tuning ---------------------------------------------------------


@pytest.fixture(scope="module")
def model():
    return ModelSpec(4, 512, 8, 4096, 256, name="small")


def test_single_device_trivial_plan():
    m = ModelSpec(2, 256, 4, 1024, 128)
    c = cluster(1, 1, mem=24e9)
    plan = tune(m, c, 8, SearchOptions.preset("full", grid_step=0.5))
    assert plan.S == 1 and plan.G == 1
    cfg = plan.stages[0].config
    assert (cfg.dp, cfg.tp, cfg.zero, cfg.ckpt) == (1, 1, 0, 0)
    assert (cfg.wo, cfg.go, cfg.oo, cfg.ao) == (0.0, 0.0, 0.0, 0.0)


def _plan_summary(plan):
    return [(s.layers, s.mesh, s.config.key()) for s in plan.stages]


def test_tight_memory_forces_savings(model):
    roomy = cluster(1, 2, mem=16e9)
    opts = SearchOptions.preset("full", grid_step=0.5)
    free = tune(model, roomy, 16, opts)
    # shrink the budget until no plain-parallelism plan fits
    cap = max(s.mem_peak for s in free.stages) / roomy.mem_headroom
    while True:
        cap *= 0.8
        tight = replace(roomy, gpu_mem_capacity=cap)
        try:
            tune(model, tight, 16, SearchOptions.preset("parallelism-only"))
        except InfeasiblePlan:
            break
    plan = tune(model, tight, 16, opts)
    assert _plan_summary(plan) != _plan_summary(free)
    assert plan.objective >= free.objective
    assert all(s.mem_peak <= tight.mem_budget for s in plan.stages)
    assert any(
        s.config.ckpt or s.config.zero or max(s.config.wo, s.config.go, s.config.oo, s.config.ao) > 0
        for s in plan.stages
    )


def test_restricted_space_never_better(model):
    c = cluster(2, 2, mem=0.6e9)
    full = tune(model, c, 8, SearchOptions.preset("full", grid_step=0.5, frontier_cap=None))
    megatron = SearchOptions(zero_levels=(0,), ckpt="full", wo=(0.0,), go=(0.0,), oo=(0.0,), ao=(0.0,),
                             frontier_cap=None)
    try:
        restricted = tune(model, c, 8, megatron).objective
    except InfeasiblePlan:
        restricted = float("inf")
    assert full.objective <= restricted


def test_plan_consistency(model):
    c = cluster(2, 2, mem=1e9)
    params = InterferenceParams.default()
    plan = tune(model, c, 8, SearchOptions.preset("+offload"), params)
    assert sum(s.layers for s in plan.stages) == model.num_layers
    assert sum(s.mesh[0] * s.mesh[1] for s in plan.stages) == c.num_devices
    assert plan.objective == objective(plan.pipeline())
    assert plan.throughput == 8 / plan.objective
    ctx = IterationContext(plan.G, plan.S, 8, c.mem_budget)
    for i, s in enumerate(plan.stages, start=1):
        assert s.config.stage_index == i
        sc = stage_cost(s.config, ctx, model, c, params)
        assert (sc.t, sc.d, sc.mem_peak) == (s.t, s.d, s.mem_peak)
        assert sc.mem_peak <= c.mem_budget


def test_sharded_equals_sequential(model):
    c = cluster(2, 2, mem=1e9)
    opts = SearchOptions.preset("+zero")
    seq = tune(model, c, 8, opts)
    par = tune(model, c, 8, opts, jobs=2)
    assert par == seq


def test_infeasible_reports_overshoot(model):
    c = cluster(1, 1, mem=1e6)
    stats = TuneStats()
    with pytest.raises(InfeasiblePlan) as err:
        tune(model, c, 4, SearchOptions.preset("+ckpt"), stats=stats)
    assert 0 < err.value.overshoot < float("inf")
    assert stats.frontiers_infeasible > 0


def test_g_values_validated(model):
    with pytest.raises(ValueError):
        tune(model, cluster(1, 1), 8, G_values=[3])
