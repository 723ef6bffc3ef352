import random

import numpy as np
import pytest

from pipeplan.interference import InterferenceParams
from pipeplan.intertuner import solve_inter
from pipeplan.intratuner import (
    FrontierEntry,
    IntraSearchSpace,
    NoFeasibleConfig,
    ParetoFrontier,
    SearchOptions,
    alpha_sweep,
    cost_table,
    dominance_filter_bruteforce,
    downsample_frontier,
    enumerate_space,
    merge_frontiers,
    min_compute_time,
    pareto_indices,
    ratio_grid,
    tune_intra,
)
from pipeplan.stagecost import IterationContext, StageConfig, stage_cost

BINARY = SearchOptions(wo=(0.0, 1.0), go=(0.0, 1.0), oo=(0.0, 1.0), ao=(0.0, 1.0))


def test_ratio_grid():
    assert ratio_grid(1 / 8) == tuple(i / 8 for i in range(9))
    assert ratio_grid(1.0) == (0.0, 1.0)
    with pytest.raises(ValueError):
        ratio_grid(0.3)


def test_enumeration_count_and_order():
    space = IntraSearchSpace(1, 2, 1, 2, 1, 8, 8, BINARY)
    configs = list(enumerate_space(space))
    splits = space.parallel_splits()
    assert [(s[1], s[2]) for s in splits] == [(2, 1), (1, 2)]
    assert len(configs) == space.size() == len(splits) * 4 * 3 * 2**4
    assert len(set(configs)) == len(configs)
    keys = [c.key() for c in configs]
    assert keys == sorted(keys)


def test_tp_confined_to_node():
    space = IntraSearchSpace(1, 2, 2, 1, 1, 8, 8, BINARY)
    assert [s[2] for s in space.parallel_splits()] == [1]
    space = IntraSearchSpace(1, 2, 2, 2, 1, 8, 8, SearchOptions(tp_within_node=False))
    assert {s[2] for s in space.parallel_splits()} == {1, 2, 4}


def test_ckpt_axis():
    assert SearchOptions().ckpt_values(5) == tuple(range(6))
    assert SearchOptions(ckpt="none").ckpt_values(5) == (0,)
    assert SearchOptions(ckpt="full").ckpt_values(5) == (5,)


def test_no_split_raises():
    space = IntraSearchSpace(1, 2, 1, 4, 1, 2, 3, BINARY)
    with pytest.raises(NoFeasibleConfig):
        space.parallel_splits()


def test_presets_nested():
    names = ["parallelism-only", "+ckpt", "+zero", "+offload", "full"]
    opts = [SearchOptions.preset(n) for n in names]
    for a, b in zip(opts, opts[1:]):
        assert set(a.zero_levels) <= set(b.zero_levels)
        assert set(a.ckpt_values(4)) <= set(b.ckpt_values(4))
        for f in ("wo", "go", "oo", "ao"):
            assert set(getattr(a, f)) <= set(getattr(b, f))
    with pytest.raises(ValueError):
        SearchOptions.preset("bogus")


def test_dominance_examples():
    t = np.array([10.0, 9.0])
    d = np.array([5.0, 6.0])
    assert sorted(pareto_indices(t, d).tolist()) == [0, 1]
    t = np.array([10.0, 9.0, 11.0])
    d = np.array([5.0, 6.0, 6.0])
    assert sorted(pareto_indices(t, d).tolist()) == [0, 1]


def test_pareto_matches_bruteforce(rng):
    for _ in range(50):
        n = int(rng.integers(1, 300))
        t = rng.integers(0, 20, n).astype(float)
        d = rng.integers(0, 20, n).astype(float)
        got = pareto_indices(t, d).tolist()
        assert got == dominance_filter_bruteforce(list(zip(t, d)))


def _frontier(tab, idx):
    order = sorted(range(len(idx)), key=lambda j: tab.configs[idx[j]].key())
    rank = np.empty(len(idx), dtype=np.int64)
    rank[order] = np.arange(len(idx))
    sel = pareto_indices(tab.t[idx], tab.d[idx], rank)
    return ParetoFrontier(tuple(
        FrontierEntry(float(tab.t[idx[i]]), float(tab.d[idx[i]]), tab.configs[idx[i]], float(tab.mem_peak[idx[i]]))
        for i in sel
    ))


def test_frontier_equals_bruteforce(small_model, small_cluster):
    p = InterferenceParams.default()
    for i, S, budget_frac in ((1, 1, 1.0), (2, 3, 0.02), (3, 3, 0.01)):
        cl = small_cluster
        space = IntraSearchSpace(i, 3, 1, 2, 2, 8, small_model.heads, BINARY)
        ctx = IterationContext(2, S, 8, cl.mem_budget * budget_frac)
        fr = tune_intra(space, ctx, small_model, cl, p)
        rows = []
        for c in enumerate_space(space):
            sc = stage_cost(c, ctx, small_model, cl, p)
            if sc.mem_peak <= ctx.mem_budget:
                rows.append((sc.t, sc.d, c))
        keep = dominance_filter_bruteforce([(t, d) for t, d, _ in rows])
        assert [(e.t, e.d, e.config) for e in fr] == [rows[k] for k in keep]
        for e in fr:
            assert stage_cost(e.config, ctx, small_model, cl, p).mem_peak <= ctx.mem_budget


def test_scalarization_completeness(small_model, small_cluster):
    p = InterferenceParams.default()
    space = IntraSearchSpace(2, 3, 1, 2, 4, 16, small_model.heads, BINARY)
    ctx = IterationContext(4, 3, 16, small_cluster.mem_budget * 0.02)
    fr = tune_intra(space, ctx, small_model, small_cluster, p)
    tab = cost_table(space, ctx, small_model, small_cluster, p)
    ok = np.flatnonzero(tab.mem_peak <= ctx.mem_budget)
    pts = {(e.t, e.d) for e in fr}
    for k in alpha_sweep(tab.t[ok], tab.d[ok], 4, np.linspace(0, 1, 11)):
        assert (tab.t[ok[k]], tab.d[ok[k]]) in pts


def test_sharded_merge_is_identical(small_model, small_cluster):
    p = InterferenceParams.default()
    space = IntraSearchSpace(1, 3, 1, 2, 2, 8, small_model.heads, BINARY)
    ctx = IterationContext(2, 2, 8, small_cluster.mem_budget * 0.05)
    whole = tune_intra(space, ctx, small_model, small_cluster, p)
    tab = cost_table(space, ctx, small_model, small_cluster, p)
    ok = np.flatnonzero(tab.mem_peak <= ctx.mem_budget)
    for shards in (2, 3, 7):
        parts = [_frontier(tab, ok[j::shards]) for j in range(shards)]
        merged = merge_frontiers(parts)
        assert [(e.t, e.d, e.config) for e in merged] == [(e.t, e.d, e.config) for e in whole]
        random.Random(shards).shuffle(parts)
        assert merge_frontiers(parts).entries == merged.entries


def test_infeasible_reports_overshoot(small_model, small_cluster):
    space = IntraSearchSpace(1, 3, 1, 2, 2, 8, small_model.heads, BINARY)
    ctx = IterationContext(2, 1, 8, 1.0)
    with pytest.raises(NoFeasibleConfig) as err:
        tune_intra(space, ctx, small_model, small_cluster, InterferenceParams.default())
    assert err.value.overshoot > 0


def test_single_feasible_config(small_model, small_cluster):
    opts = SearchOptions.preset("parallelism-only")
    space = IntraSearchSpace(1, 2, 1, 1, 1, 2, small_model.heads, opts)
    ctx = IterationContext(1, 1, 2, small_cluster.mem_budget)
    fr = tune_intra(space, ctx, small_model, small_cluster, InterferenceParams.default())
    assert len(fr) == 1


def test_min_compute_time_is_lower_bound(small_model, small_cluster):
    p = InterferenceParams.default()
    space = IntraSearchSpace(2, 3, 1, 2, 2, 8, small_model.heads, BINARY)
    ctx = IterationContext(2, 3, 8, small_cluster.mem_budget)
    lb = min_compute_time(space, ctx, small_model, small_cluster)
    tab = cost_table(space, ctx, small_model, small_cluster, p)
    assert lb <= tab.t.min()


def _entries(points):
    dummy = StageConfig(1, 1, 1, 1, 1, 1, 1)
    return ParetoFrontier(tuple(FrontierEntry(t, d, dummy) for t, d in points))


def test_downsample_basics():
    fr = _entries([(float(i), float(100 - i)) for i in range(40)])
    assert downsample_frontier(fr, 64) is fr
    two = downsample_frontier(fr, 2)
    assert [e.t for e in two] == [0.0, 39.0]
    ds = downsample_frontier(fr, 16)
    assert len(ds) == 16
    assert set(ds.entries) <= set(fr.entries)
    with pytest.raises(ValueError):
        downsample_frontier(fr, 1)


def test_frontier_type_invariants():
    with pytest.raises(ValueError):
        _entries([(1.0, 2.0), (1.0, 1.0)])
    with pytest.raises(ValueError):
        _entries([(1.0, 2.0), (2.0, 3.0)])


def test_downsampling_costs_little(monkeypatch):
    """Plan objective with 16-point frontiers stays within 2% of the uncapped one."""
    import pipeplan.intertuner as inter
    from pipeplan.workload import ClusterSpec, ModelSpec

    sizes = []

    def spy(*a, **k):
        fr = tune_intra(*a, **k)
        sizes.append(len(fr))
        return fr

    monkeypatch.setattr(inter, "tune_intra", spy)
    tune = inter.tune
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(6):
        L = int(rng.choice([4, 6, 8]))
        h = int(rng.choice([512, 1024, 2048]))
        model = ModelSpec(L, h, 16, 32000, 1024, flash_attention=True)
        nodes, gpn = [(2, 2), (1, 4), (2, 1)][int(rng.integers(3))]
        cluster = ClusterSpec(nodes, gpn, float(rng.uniform(2e9, 8e9)), 100e12, 0.5, 50e9, 10e9, 10e9, 10e9)
        B = int(rng.choice([8, 16]))
        full = tune(model, cluster, B, SearchOptions.preset("full", grid_step=0.25, frontier_cap=None))
        capped = tune(model, cluster, B, SearchOptions.preset("full", grid_step=0.25, frontier_cap=16))
        assert capped.objective >= full.objective
        worst = max(worst, capped.objective / full.objective - 1)
    assert max(sizes) > 16  # the cap actually bites
    assert worst <= 0.02
