"""Inter-stage search: layer partition, submesh assignment and frontier point
per stage, minimizing the imbalance-aware pipeline objective exactly; plus the
outer loop over gradient-accumulation steps and stage counts.

The inter-stage problem has an integer-programming form (one-hot choice per
stage, ``T_max >= t_i``, ``D >= d_i - sum_{j<i} t_j``, minimize
``(G-1) T_max + sum t_i + D``).  It is solved here by depth-first
branch-and-bound with admissible bounds; frontiers are built lazily, only for
candidates the bound cannot rule out.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

from .interference import InterferenceParams
from .intratuner import (
    IntraSearchSpace,
    NoFeasibleConfig,
    ParetoFrontier,
    SearchOptions,
    downsample_frontier,
    min_compute_time,
    tune_intra,
)
from .pipesim import PipelinePlan, objective, objective_float
from .stagecost import IterationContext, StageConfig
from .workload import ClusterSpec, ModelSpec, OpTimeTable

log = logging.getLogger(__name__)

Mesh = tuple[int, int]
_EPS = 1e-9


class InfeasiblePlan(Exception):
    def __init__(self, message: str, overshoot: float = math.inf, diagnostics=None):
        super().__init__(message)
        self.overshoot = overshoot
        self.diagnostics = diagnostics or {}


def enumerate_submeshes(cluster: ClusterSpec) -> list[Mesh]:
    """Single-node power-of-two slices plus whole-node groups."""
    N, M = cluster.nodes, cluster.gpus_per_node
    out = set()
    m = 1
    while m <= M:
        if M % m == 0:
            out.add((1, m))
        m *= 2
    for n in range(1, N + 1):
        out.add((n, M))
    return sorted(out, key=lambda nm: (nm[0] * nm[1], nm))


def divisors(x: int) -> list[int]:
    return [d for d in range(1, x + 1) if x % d == 0]


# -- candidate tables --------------------------------------------------------


class CandidateTable:
    """Per-stage candidates.  Subclasses provide frontiers and lower bounds."""

    def options(self, i: int) -> Sequence[tuple[int, Mesh]]:
        raise NotImplementedError

    def frontier(self, i: int, l: int, mesh: Mesh) -> Optional[Sequence[tuple[float, float]]]:
        """(t, d) points sorted by t, or None when the candidate is infeasible."""
        raise NotImplementedError

    def t_lower(self, i: int, l: int, mesh: Mesh) -> float:
        pts = self.frontier(i, l, mesh)
        return min(p[0] for p in pts) if pts else math.inf


class DictTable(CandidateTable):
    def __init__(self, table: Mapping[tuple[int, int, Mesh], Sequence[tuple[float, float]]]):
        self._table = {}
        self._opts: dict[int, list] = {}
        for (i, l, mesh), pts in table.items():
            mesh = tuple(mesh)
            pts = sorted((float(t), float(d)) for t, d in pts) if pts else None
            self._table[(i, l, mesh)] = pts
            self._opts.setdefault(i, []).append((l, mesh))
        for v in self._opts.values():
            v.sort()

    def options(self, i):
        return self._opts.get(i, [])

    def frontier(self, i, l, mesh):
        return self._table.get((i, l, tuple(mesh)))


@dataclass(frozen=True)
class StageChoice:
    l: int
    mesh: Mesh
    f: int
    t: float
    d: float

    @property
    def devices(self) -> int:
        return self.mesh[0] * self.mesh[1]


@dataclass(frozen=True)
class InterSolution:
    G: int
    S: int
    objective: float
    stages: tuple[StageChoice, ...]

    def encoding(self) -> tuple:
        return (self.G, tuple((c.l, c.mesh[0], c.mesh[1], c.f) for c in self.stages))

    def rank(self) -> tuple:
        return (Fraction(self.objective), self.S, self.encoding())


def _suffix_tables(S, table, L, D):
    """Per suffix i..S and remaining (layers, devices): min sum and min max of
    the per-stage t lower bounds over reachable completions (inf if none)."""
    inf = np.inf
    ssum = [None] * (S + 2)
    smax = [None] * (S + 2)
    ssum[S + 1] = np.full((L + 1, D + 1), inf)
    smax[S + 1] = np.full((L + 1, D + 1), inf)
    ssum[S + 1][0, 0] = 0.0
    smax[S + 1][0, 0] = 0.0
    for i in range(S, 0, -1):
        cs = np.full((L + 1, D + 1), inf)
        cm = np.full((L + 1, D + 1), inf)
        ns, nm = ssum[i + 1], smax[i + 1]
        for l, mesh in table.options(i):
            dev = mesh[0] * mesh[1]
            if l > L or dev > D:
                continue
            lb = table.t_lower(i, l, mesh)
            if lb == inf:
                continue
            src_s = ns[: L + 1 - l, : D + 1 - dev]
            src_m = nm[: L + 1 - l, : D + 1 - dev]
            np.minimum(cs[l:, dev:], lb + src_s, out=cs[l:, dev:])
            np.minimum(cm[l:, dev:], np.maximum(src_m, lb), out=cm[l:, dev:])
        ssum[i], smax[i] = cs, cm
    return ssum, smax


def solve_inter(
    G: int,
    S: int,
    table,
    L: int,
    D: int,
    incumbent: Optional[float] = None,
) -> Optional[InterSolution]:
    """Exact minimizer of the pipeline objective over the candidate table.

    Returns None when no selection fits (or, with ``incumbent`` given, when
    nothing is at least as good as it).  Among equal objectives the
    lexicographically smallest ``(l, n, m, f)`` encoding wins.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    if not isinstance(table, CandidateTable):
        table = DictTable(table)
    ssum_t, smax_t = _suffix_tables(S, table, L, D)
    if not math.isfinite(ssum_t[1][L, D]):
        return None

    best: dict = {"rank": None, "sol": None, "float": incumbent if incumbent is not None else math.inf}
    chosen: list[StageChoice] = []

    def bound(i_next, l_used, d_used, tsum, tmax, dcur):
        lr, dr = L - l_used, D - d_used
        if lr < 0 or dr < 0:
            return math.inf
        ssum = float(ssum_t[i_next][lr, dr])
        if ssum == math.inf:
            return math.inf
        smax = float(smax_t[i_next][lr, dr])
        mx = tmax if tmax > smax else smax
        return (G - 1) * mx + tsum + ssum + dcur

    def prunable(lb):
        return lb > best["float"] * (1 + _EPS) + _EPS * 1e-6

    def leaf():
        ts = [c.t for c in chosen]
        ds = [c.d for c in chosen]
        v = objective_float(G, ts, ds)
        if prunable(v):
            return
        exact = objective(PipelinePlan(G, tuple(ts), tuple(ds)))
        sol = InterSolution(G, S, exact, tuple(chosen))
        r = sol.rank()
        if best["rank"] is None or r < best["rank"]:
            if incumbent is not None and exact > incumbent:
                return
            best["rank"], best["sol"] = r, sol
            best["float"] = min(best["float"], exact)

    def go(i, l_used, d_used, tsum, tmax, dcur):
        if i > S:
            leaf()
            return
        opts = []
        for l, mesh in table.options(i):
            dev = mesh[0] * mesh[1]
            lb_t = table.t_lower(i, l, mesh)
            if lb_t == math.inf:
                continue
            lb = bound(i + 1, l_used + l, d_used + dev, tsum + lb_t, max(tmax, lb_t), dcur)
            if lb == math.inf:
                continue
            opts.append((lb, l, mesh))
        opts.sort()
        for lb, l, mesh in opts:
            if prunable(lb):
                break
            pts = table.frontier(i, l, mesh)
            if not pts:
                continue
            dev = mesh[0] * mesh[1]
            for f, (t, d) in enumerate(pts):
                nd = max(dcur, d - tsum)
                nb = bound(i + 1, l_used + l, d_used + dev, tsum + t, max(tmax, t), nd)
                if prunable(nb):
                    continue
                chosen.append(StageChoice(l, tuple(mesh), f, t, d))
                go(i + 1, l_used + l, d_used + dev, tsum + t, max(tmax, t), nd)
                chosen.pop()

    go(1, 0, 0, 0.0, 0.0, 0.0)
    return best["sol"]


def solve_inter_bruteforce(G: int, S: int, table, L: int, D: int) -> Optional[InterSolution]:
    """Exhaustive reference for :func:`solve_inter`."""
    if not isinstance(table, CandidateTable):
        table = DictTable(table)
    best = None

    def go(i, l_used, d_used, acc):
        nonlocal best
        if l_used > L or d_used > D:
            return
        if i > S:
            if l_used == L and d_used == D:
                plan = PipelinePlan(G, tuple(c.t for c in acc), tuple(c.d for c in acc))
                sol = InterSolution(G, S, objective(plan), tuple(acc))
                if best is None or sol.rank() < best.rank():
                    best = sol
            return
        for l, mesh in table.options(i):
            pts = table.frontier(i, l, mesh)
            if not pts:
                continue
            for f, (t, d) in enumerate(pts):
                go(i + 1, l_used + l, d_used + mesh[0] * mesh[1], acc + [StageChoice(l, tuple(mesh), f, t, d)])

    go(1, 0, 0, [])
    return best


# -- full tuning -------------------------------------------------------------


@dataclass(frozen=True)
class PlanStage:
    layers: int
    mesh: Mesh
    config: StageConfig
    t: float
    d: float
    mem_peak: float


@dataclass(frozen=True)
class TrainingPlan:
    G: int
    S: int
    B_global: int
    stages: tuple[PlanStage, ...]
    objective: float

    @property
    def throughput(self) -> float:
        return self.B_global / self.objective

    def pipeline(self) -> PipelinePlan:
        return PipelinePlan(self.G, tuple(s.t for s in self.stages), tuple(s.d for s in self.stages))

    def encoding(self) -> tuple:
        return (self.G, tuple((s.layers, s.mesh[0], s.mesh[1], s.config.key()) for s in self.stages))

    def rank(self) -> tuple:
        return (Fraction(self.objective), self.S, self.encoding())


@dataclass
class TuneStats:
    frontiers_built: int = 0
    frontiers_infeasible: int = 0
    cells: int = 0
    seconds: float = 0.0
    min_overshoot: float = math.inf


class _LazyTable(CandidateTable):
    """Candidates for one (G, S) cell backed by a frontier cache shared across S."""

    def __init__(self, tuner: "_CellTuner", S: int):
        self.tuner = tuner
        self.S = S
        self.ctx = IterationContext(tuner.G, S, tuner.B, tuner.budget)
        meshes = tuner.meshes
        max_l = tuner.model.num_layers - (S - 1)
        self._opts = [(l, mesh) for l in range(1, max_l + 1) for mesh in meshes]

    def options(self, i):
        return self._opts

    def _key(self, i, l, mesh):
        return (i == 1, i == self.S, self.ctx.in_flight(i), l, mesh)

    def _space(self, i, l, mesh):
        t = self.tuner
        return IntraSearchSpace(i, l, mesh[0], mesh[1], t.G, t.B, t.model.heads, t.options)

    def entries(self, i, l, mesh) -> Optional[ParetoFrontier]:
        t = self.tuner
        key = self._key(i, l, mesh)
        if key not in t.cache:
            try:
                fr = tune_intra(self._space(i, l, mesh), self.ctx, t.model, t.cluster, t.params, t.table)
                if t.options.frontier_cap is not None:
                    fr = downsample_frontier(fr, t.options.frontier_cap)
                t.stats.frontiers_built += 1
            except NoFeasibleConfig as exc:
                fr = None
                t.stats.frontiers_infeasible += 1
                t.stats.min_overshoot = min(t.stats.min_overshoot, exc.overshoot)
            t.cache[key] = fr
        return t.cache[key]

    def frontier(self, i, l, mesh):
        fr = self.entries(i, l, mesh)
        return None if fr is None else fr.points()

    def t_lower(self, i, l, mesh):
        t = self.tuner
        key = self._key(i, l, mesh)
        if key in t.cache:
            fr = t.cache[key]
            return math.inf if fr is None else fr.entries[0].t
        lkey = (i == self.S, l, mesh)
        lb = t.lb_cache.get(lkey)
        if lb is None:
            try:
                lb = min_compute_time(self._space(i, l, mesh), self.ctx, t.model, t.cluster, t.table)
            except NoFeasibleConfig:
                lb = math.inf
            t.lb_cache[lkey] = lb
        return lb


class _CellTuner:
    def __init__(self, model, cluster, B, G, params, options, table, budget):
        self.model, self.cluster, self.B, self.G = model, cluster, B, G
        self.params, self.options, self.table = params, options, table
        self.budget = budget
        self.meshes = enumerate_submeshes(cluster)
        self.cache: dict = {}
        self.lb_cache: dict = {}
        self.stats = TuneStats()

    def run(self, S_values, incumbent: Optional[float]) -> Optional[TrainingPlan]:
        best: Optional[TrainingPlan] = None
        for S in S_values:
            self.stats.cells += 1
            tab = _LazyTable(self, S)
            inc = incumbent
            if best is not None:
                inc = best.objective if inc is None else min(inc, best.objective)
            sol = solve_inter(self.G, S, tab, self.model.num_layers, self.cluster.num_devices, inc)
            if sol is None:
                continue
            plan = self._materialize(tab, sol)
            if best is None or plan.rank() < best.rank():
                best = plan
        return best

    def _materialize(self, tab: _LazyTable, sol: InterSolution) -> TrainingPlan:
        stages = []
        for i, c in enumerate(sol.stages, start=1):
            e = tab.entries(i, c.l, c.mesh).entries[c.f]
            cfg = replace(e.config, stage_index=i)
            stages.append(PlanStage(c.l, c.mesh, cfg, e.t, e.d, e.mem_peak))
        return TrainingPlan(self.G, sol.S, self.B, tuple(stages), sol.objective)


def _tune_cell(args) -> tuple[Optional[TrainingPlan], TuneStats]:
    model, cluster, B, G, params, options, table, budget, S_values = args
    cell = _CellTuner(model, cluster, B, G, params, options, table, budget)
    t0 = time.perf_counter()
    plan = cell.run(S_values, None)
    cell.stats.seconds = time.perf_counter() - t0
    return plan, cell.stats


def tune(
    model: ModelSpec,
    cluster: ClusterSpec,
    B_global: int,
    options: Optional[SearchOptions] = None,
    params: Optional[InterferenceParams] = None,
    table: Optional[OpTimeTable] = None,
    G_values: Optional[Sequence[int]] = None,
    max_stages: Optional[int] = None,
    jobs: int = 1,
    stats: Optional[TuneStats] = None,
) -> TrainingPlan:
    """Best plan over gradient-accumulation steps and stage counts.

    ``jobs > 1`` shards the gradient-accumulation values across worker
    processes; the result is identical to the sequential run.
    """
    options = options or SearchOptions()
    params = params or InterferenceParams.default()
    budget = cluster.mem_budget
    Gs = sorted(G_values) if G_values is not None else divisors(B_global)
    for G in Gs:
        if B_global % G:
            raise ValueError(f"G={G} does not divide the global batch {B_global}")
    S_max = min(model.num_layers, cluster.num_devices)
    if max_stages is not None:
        S_max = min(S_max, max_stages)
    S_values = list(range(1, S_max + 1))
    stats = stats if stats is not None else TuneStats()
    t0 = time.perf_counter()

    best: Optional[TrainingPlan] = None
    if jobs > 1 and len(Gs) > 1:
        work = [(model, cluster, B_global, G, params, options, table, budget, S_values) for G in Gs]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_tune_cell, work))
        for plan, st in results:
            _merge_stats(stats, st)
            if plan is not None and (best is None or plan.rank() < best.rank()):
                best = plan
    else:
        for G in Gs:
            cell = _CellTuner(model, cluster, B_global, G, params, options, table, budget)
            plan = cell.run(S_values, None if best is None else best.objective)
            _merge_stats(stats, cell.stats)
            log.info("G=%d: %s", G, "no plan" if plan is None else f"{plan.objective:.6g}s S={plan.S}")
            if plan is not None and (best is None or plan.rank() < best.rank()):
                best = plan
    stats.seconds = time.perf_counter() - t0
    if best is None:
        raise InfeasiblePlan(
            "no feasible training plan for any gradient-accumulation step and stage count",
            stats.min_overshoot,
        )
    check = objective(best.pipeline())
    if check != best.objective:  # pragma: no cover - internal consistency
        raise AssertionError("plan objective disagrees with the pipeline objective")
    return best


def _merge_stats(into: TuneStats, st: TuneStats) -> None:
    into.frontiers_built += st.frontiers_built
    into.frontiers_infeasible += st.frontiers_infeasible
    into.cells += st.cells
    into.min_overshoot = min(into.min_overshoot, st.min_overshoot)
