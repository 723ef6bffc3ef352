"""Intra-stage search: every configuration of one stage candidate, reduced to
its (stable time, first-microbatch delta) Pareto frontier under the memory
budget."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterator, Optional, Sequence

import numpy as np

from . import symexpr as sx
from ._accel import HAVE_NUMBA, njit
from .interference import InterferenceParams
from .stagecost import (
    IterationContext,
    StageConfig,
    candidate_exprs,
    eval_memory,
    eval_times,
    measured_times,
)
from .workload import ClusterSpec, ModelSpec, OpTimeTable

log = logging.getLogger(__name__)

PRESETS = ("parallelism-only", "+ckpt", "+zero", "+offload", "full")


class NoFeasibleConfig(Exception):
    def __init__(self, message: str, overshoot: float = math.inf):
        super().__init__(message)
        self.overshoot = overshoot


def ratio_grid(step: float) -> tuple[float, ...]:
    k = round(1 / step)
    if k < 1 or not math.isclose(k * step, 1.0):
        raise ValueError(f"grid step must be 1/k for a positive integer k, got {step}")
    return tuple(i / k for i in range(k + 1))


@dataclass(frozen=True)
class SearchOptions:
    """Axes of the per-stage search.

    ``ckpt`` is ``"all"`` (0..layers), ``"none"`` (0) or ``"full"`` (every
    layer recomputed).
    """

    zero_levels: tuple[int, ...] = (0, 1, 2, 3)
    ckpt: str = "all"
    wo: tuple[float, ...] = ratio_grid(1 / 8)
    go: tuple[float, ...] = ratio_grid(1 / 8)
    oo: tuple[float, ...] = ratio_grid(1 / 8)
    ao: tuple[float, ...] = ratio_grid(1 / 8)
    tp_within_node: bool = True
    frontier_cap: Optional[int] = 16

    def __post_init__(self):
        if self.ckpt not in ("all", "none", "full"):
            raise ValueError(f"unknown ckpt mode {self.ckpt!r}")
        if not self.zero_levels or not set(self.zero_levels) <= {0, 1, 2, 3}:
            raise ValueError("zero_levels must be a non-empty subset of 0..3")
        for f in ("wo", "go", "oo", "ao"):
            vals = getattr(self, f)
            if not vals or any(not 0 <= v <= 1 for v in vals):
                raise ValueError(f"{f} values must lie in [0, 1]")
            object.__setattr__(self, f, tuple(sorted(set(float(v) for v in vals))))
        object.__setattr__(self, "zero_levels", tuple(sorted(set(self.zero_levels))))
        if self.frontier_cap is not None and self.frontier_cap < 2:
            raise ValueError("frontier cap must be >= 2")

    @classmethod
    def preset(cls, name: str, grid_step: float = 1 / 8, **kw) -> "SearchOptions":
        """Nested search spaces, smallest first.

        ``+offload`` allows all-or-nothing offloading; ``full`` refines every
        ratio to the ``grid_step`` grid.
        """
        off = (0.0,)
        if name == "parallelism-only":
            return cls(zero_levels=(0,), ckpt="none", wo=off, go=off, oo=off, ao=off, **kw)
        if name == "+ckpt":
            return cls(zero_levels=(0,), ckpt="all", wo=off, go=off, oo=off, ao=off, **kw)
        if name == "+zero":
            return cls(ckpt="all", wo=off, go=off, oo=off, ao=off, **kw)
        if name == "+offload":
            on = (0.0, 1.0)
            return cls(ckpt="all", wo=on, go=on, oo=on, ao=on, **kw)
        if name == "full":
            g = ratio_grid(grid_step)
            return cls(ckpt="all", wo=g, go=g, oo=g, ao=g, **kw)
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")

    def ckpt_values(self, layers: int) -> tuple[int, ...]:
        if self.ckpt == "none":
            return (0,)
        if self.ckpt == "full":
            return (layers,)
        return tuple(range(layers + 1))


@dataclass(frozen=True)
class IntraSearchSpace:
    stage_index: int
    layers: int
    nodes: int
    gpus_per_node: int
    G: int
    B_global: int
    heads: int
    options: SearchOptions = field(default_factory=SearchOptions)

    def parallel_splits(self) -> list[tuple[int, int, int]]:
        """``(micro_batch, dp, tp)`` triples, ordered by micro batch then dp."""
        devices = self.nodes * self.gpus_per_node
        per_step = self.B_global // self.G
        out = []
        for tp in range(1, devices + 1):
            if devices % tp or self.heads % tp:
                continue
            if self.options.tp_within_node and (tp > self.gpus_per_node or self.gpus_per_node % tp):
                continue
            dp = devices // tp
            if per_step % dp:
                continue
            out.append((per_step // dp, dp, tp))
        out.sort()
        if not out:
            raise NoFeasibleConfig(
                f"no (dp, tp) split of {self.nodes}x{self.gpus_per_node} devices divides "
                f"the per-step batch {per_step}"
            )
        return out

    def size(self) -> int:
        o = self.options
        per_split = (
            len(o.zero_levels) * len(o.ckpt_values(self.layers)) * len(o.wo) * len(o.go) * len(o.oo) * len(o.ao)
        )
        return len(self.parallel_splits()) * per_split


def enumerate_space(space: IntraSearchSpace) -> Iterator[StageConfig]:
    """Every configuration in lexicographic order of :meth:`StageConfig.key`."""
    o = space.options
    for mb, dp, tp in space.parallel_splits():
        for z in o.zero_levels:
            for c in o.ckpt_values(space.layers):
                for a in o.wo:
                    for g in o.go:
                        for p in o.oo:
                            for q in o.ao:
                                yield StageConfig(
                                    space.stage_index, space.layers, mb, dp, tp, space.nodes,
                                    space.gpus_per_node, z, c, a, g, p, q,
                                )


# -- frontier ----------------------------------------------------------------


@dataclass(frozen=True)
class FrontierEntry:
    t: float
    d: float
    config: StageConfig
    mem_peak: float = 0.0


@dataclass(frozen=True)
class ParetoFrontier:
    entries: tuple[FrontierEntry, ...]

    def __post_init__(self):
        for a, b in zip(self.entries, self.entries[1:]):
            if not (a.t < b.t and a.d > b.d):
                raise ValueError("frontier must be strictly increasing in t and decreasing in d")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> FrontierEntry:
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)

    def points(self) -> list[tuple[float, float]]:
        return [(e.t, e.d) for e in self.entries]


@njit
def _sweep_kernel(d_sorted):
    keep = np.zeros(d_sorted.shape[0], dtype=np.bool_)
    best = np.inf
    for i in range(d_sorted.shape[0]):
        if d_sorted[i] < best:
            keep[i] = True
            best = d_sorted[i]
    return keep


def _sweep_numpy(d_sorted: np.ndarray) -> np.ndarray:
    if d_sorted.size == 0:
        return np.zeros(0, dtype=bool)
    prev = np.concatenate(([np.inf], np.minimum.accumulate(d_sorted)[:-1]))
    return d_sorted < prev


def pareto_indices(t: np.ndarray, d: np.ndarray, order_key: Optional[np.ndarray] = None) -> np.ndarray:
    """Indices of the non-dominated (t, d) points, sorted by t.

    Exact ties keep the entry with the smallest ``order_key`` (default: position).
    """
    t = np.asarray(t, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    key = np.arange(t.size) if order_key is None else np.asarray(order_key)
    order = np.lexsort((key, d, t))
    ds = np.ascontiguousarray(d[order])
    keep = _sweep_kernel(ds) if HAVE_NUMBA else _sweep_numpy(ds)
    return order[keep]


def dominance_filter_bruteforce(points: Sequence[tuple[float, float]]) -> list[int]:
    """O(k^2) reference: indices of points no other point dominates.

    Among exact duplicates only the first index survives.  Sorted by t.
    """
    out = []
    for i, (ti, di) in enumerate(points):
        dominated = False
        for j, (tj, dj) in enumerate(points):
            if j == i:
                continue
            if tj <= ti and dj <= di and (tj < ti or dj < di):
                dominated = True
                break
            if tj == ti and dj == di and j < i:
                dominated = True
                break
        if not dominated:
            out.append(i)
    out.sort(key=lambda i: points[i])
    return out


def merge_frontiers(frontiers: Sequence[ParetoFrontier]) -> ParetoFrontier:
    """Associative merge of frontiers built on disjoint shards."""
    entries = [e for f in frontiers for e in f.entries]
    if not entries:
        return ParetoFrontier(())
    keys = sorted(range(len(entries)), key=lambda i: entries[i].config.key())
    rank = np.empty(len(entries), dtype=np.int64)
    rank[keys] = np.arange(len(entries))
    idx = pareto_indices([e.t for e in entries], [e.d for e in entries], rank)
    return ParetoFrontier(tuple(entries[i] for i in idx))


def downsample_frontier(fr: ParetoFrontier, K: int) -> ParetoFrontier:
    """Keep both endpoints plus ``K-2`` points spread out in t (farthest-point)."""
    if K < 2:
        raise ValueError("K must be >= 2")
    n = len(fr)
    if n <= K:
        return fr
    ts = [Fraction(e.t) for e in fr.entries]
    chosen = {0, n - 1}
    dist = [min(abs(ts[i] - ts[0]), abs(ts[i] - ts[-1])) for i in range(n)]
    while len(chosen) < K:
        best = max((i for i in range(n) if i not in chosen), key=lambda i: (dist[i], -i))
        chosen.add(best)
        for i in range(n):
            dist[i] = min(dist[i], abs(ts[i] - ts[best]))
    return ParetoFrontier(tuple(fr.entries[i] for i in sorted(chosen)))


# -- evaluation --------------------------------------------------------------


@dataclass
class CostTable:
    """Every enumerated configuration with its costs (brute-force view)."""

    configs: list[StageConfig]
    t: np.ndarray
    d: np.ndarray
    mem_peak: np.ndarray


class _Block:
    """One (micro batch, dp, tp, zero) slice of the space, in key order."""

    def __init__(self, space: IntraSearchSpace, mb: int, dp_: int, tp_: int, zero: int):
        o = space.options
        self.mb, self.dp, self.tp, self.zero = mb, dp_, tp_, zero
        grids = np.meshgrid(
            np.asarray(o.ckpt_values(space.layers), dtype=np.float64),
            np.asarray(o.wo), np.asarray(o.go), np.asarray(o.oo), np.asarray(o.ao),
            indexing="ij",
        )
        self.axes = [g.ravel() for g in grids]
        self.n = self.axes[0].size

    def rows(self, idx=None, extra=None) -> sx.BindingTable:
        sel = (lambda a: a) if idx is None else (lambda a: a[idx])
        n = self.n if idx is None else len(idx)
        cols = {
            "b": np.full(n, float(self.mb)),
            "dp": np.full(n, float(self.dp)),
            "tp": np.full(n, float(self.tp)),
            "ckpt": sel(self.axes[0]),
            "wo": sel(self.axes[1]),
            "go": sel(self.axes[2]),
            "oo": sel(self.axes[3]),
            "ao": sel(self.axes[4]),
        }
        for k, v in (extra or {}).items():
            cols[k] = np.full(n, float(v))
        return sx.BindingTable(cols)

    def config(self, space: IntraSearchSpace, i: int) -> StageConfig:
        c, a, g, p, q = (float(ax[i]) for ax in self.axes)
        return StageConfig(
            space.stage_index, space.layers, self.mb, self.dp, self.tp, space.nodes, space.gpus_per_node,
            self.zero, int(c), a, g, p, q,
        )


def _blocks(space: IntraSearchSpace) -> Iterator[_Block]:
    for mb, dp_, tp_ in space.parallel_splits():
        for z in space.options.zero_levels:
            yield _Block(space, mb, dp_, tp_, z)


def _setup(space, ctx, model, cluster, table):
    if space.G != ctx.G or space.B_global != ctx.B_global:
        raise ValueError("search space and iteration context disagree on G or the global batch")
    is_first = space.stage_index == 1
    is_last = space.stage_index == ctx.S
    return is_first, is_last, bool(table)


def _block_extra(model, cluster, table, blk, is_last):
    if not table:
        return None
    tf, th = measured_times(model, cluster, table, blk.mb, blk.tp, is_last)
    return {"t_fwd": tf, "t_head": th}


def tune_intra(
    space: IntraSearchSpace,
    ctx: IterationContext,
    model: ModelSpec,
    cluster: ClusterSpec,
    params: InterferenceParams,
    table: Optional[OpTimeTable] = None,
) -> ParetoFrontier:
    """Exact (t, d) Pareto frontier of all memory-feasible configurations.

    Raises :class:`NoFeasibleConfig` (carrying the smallest memory overshoot)
    when nothing fits.
    """
    is_first, is_last, measured = _setup(space, ctx, model, cluster, table)
    w_ = ctx.in_flight(space.stage_index)
    budget = ctx.mem_budget
    parts_t, parts_d, parts_mem, parts_ref = [], [], [], []
    blocks = list(_blocks(space))
    overshoot = math.inf
    offset = 0
    for bi, blk in enumerate(blocks):
        ex = candidate_exprs(
            model, cluster, blk.zero, is_first, is_last, measured,
            space.layers, w_, space.nodes, space.gpus_per_node,
        )
        extra = _block_extra(model, cluster, table, blk, is_last)
        rows = blk.rows(extra=extra)
        mf, mb_ = eval_memory(ex, rows)
        peak = np.maximum(mf, mb_)
        ok = np.flatnonzero(peak <= budget)
        if ok.size == 0:
            overshoot = min(overshoot, float(peak.min() - budget))
            offset += blk.n
            continue
        sub = rows.take(ok)
        t, d = eval_times(ex, sub, params)
        keep = pareto_indices(t, d)  # block-local frontier, ties to lowest index
        parts_t.append(t[keep])
        parts_d.append(d[keep])
        parts_mem.append(peak[ok[keep]])
        parts_ref.append(np.stack([np.full(keep.size, bi), ok[keep], offset + ok[keep]], axis=1))
        offset += blk.n
    if not parts_t:
        raise NoFeasibleConfig(
            f"stage {space.stage_index}: no configuration of {space.layers} layers on "
            f"{space.nodes}x{space.gpus_per_node} fits the memory budget",
            overshoot,
        )
    t = np.concatenate(parts_t)
    d = np.concatenate(parts_d)
    mem = np.concatenate(parts_mem)
    ref = np.concatenate(parts_ref)
    idx = pareto_indices(t, d, ref[:, 2])
    entries = tuple(
        FrontierEntry(float(t[i]), float(d[i]), blocks[ref[i, 0]].config(space, int(ref[i, 1])), float(mem[i]))
        for i in idx
    )
    return ParetoFrontier(entries)


def cost_table(
    space: IntraSearchSpace,
    ctx: IterationContext,
    model: ModelSpec,
    cluster: ClusterSpec,
    params: InterferenceParams,
    table: Optional[OpTimeTable] = None,
) -> CostTable:
    """Batched costs of every configuration in enumeration order."""
    is_first, is_last, measured = _setup(space, ctx, model, cluster, table)
    w_ = ctx.in_flight(space.stage_index)
    configs, ts, ds, mems = [], [], [], []
    for blk in _blocks(space):
        ex = candidate_exprs(
            model, cluster, blk.zero, is_first, is_last, measured,
            space.layers, w_, space.nodes, space.gpus_per_node,
        )
        rows = blk.rows(extra=_block_extra(model, cluster, table, blk, is_last))
        mf, mb_ = eval_memory(ex, rows)
        t, d = eval_times(ex, rows, params)
        configs.extend(blk.config(space, i) for i in range(blk.n))
        ts.append(t)
        ds.append(d)
        mems.append(np.maximum(mf, mb_))
    return CostTable(configs, np.concatenate(ts), np.concatenate(ds), np.concatenate(mems))


def alpha_sweep(t: np.ndarray, d: np.ndarray, G: int, alphas: Sequence[float]) -> list[int]:
    """Index minimizing ``alpha*G*t + (1-alpha)*d`` for each alpha (first on ties)."""
    t = np.asarray(t)
    d = np.asarray(d)
    return [int(np.argmin(a * G * t + (1 - a) * d)) for a in alphas]


def min_compute_time(
    space: IntraSearchSpace,
    ctx: IterationContext,
    model: ModelSpec,
    cluster: ClusterSpec,
    table: Optional[OpTimeTable] = None,
) -> float:
    """Admissible lower bound on any stable time in ``space``.

    Stable time is at least the compute channel, which grows with recomputed
    layers; the bound takes the least-recompute setting over all splits.
    """
    is_first, is_last, measured = _setup(space, ctx, model, cluster, table)
    w_ = ctx.in_flight(space.stage_index)
    c0 = min(space.options.ckpt_values(space.layers))
    best = math.inf
    for mb, dp_, tp_ in space.parallel_splits():
        ex = candidate_exprs(
            model, cluster, space.options.zero_levels[0], is_first, is_last, measured,
            space.layers, w_, space.nodes, space.gpus_per_node,
        )
        env = {"b": mb, "dp": dp_, "tp": tp_, "ckpt": c0}
        if measured:
            env["t_fwd"], env["t_head"] = measured_times(model, cluster, table, mb, tp_, is_last)
        c = sx.substitute(ex.stable[0], env, strict=False)
        best = min(best, float(c))
    return best
