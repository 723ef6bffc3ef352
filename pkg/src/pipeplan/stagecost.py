"""Per-stage time and memory model.

One expression set is built per (ZeRO level, stage position) over the stage
symbols below; candidates substitute their fixed values (layers, in-flight
microbatches, submesh) and the tuner then evaluates whole tables of
configurations at once.

Time is split into a stable microbatch and the first microbatch, which in
addition carries the once-per-iteration work: gradient synchronization,
optimizer-state and gradient offload traffic, and the ZeRO-3 weight gather
for the repositioned optimizer step.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Optional

import numpy as np

from . import symexpr as sx
from .interference import ChannelVector, InterferenceParams, pred_intf, pred_intf_scalar
from .symexpr import Expr, minimum
from .workload import (
    ClusterSpec,
    ModelSpec,
    OpTimeTable,
    collective_time,
    default_act_bytes,
    embedding_param_count,
    head_fwd_flops,
    layer_fwd_flops,
    layer_param_count,
)

SYMBOLS = sx.SymbolTable()
b, dp, tp = SYMBOLS.symbols("b dp tp", sx.POSITIVE_INTEGER)
ckpt = SYMBOLS.symbol("ckpt", sx.NONNEGATIVE_REAL)
wo, go, oo, ao = SYMBOLS.symbols("wo go oo ao", sx.UNIT_INTERVAL)
# fixed per stage candidate
l, w, n, m = SYMBOLS.symbols("l w n m", sx.POSITIVE_INTEGER)
# per-row compute overrides from a measured op-time table
t_fwd, t_head = SYMBOLS.symbols("t_fwd t_head", sx.NONNEGATIVE_REAL)

CONFIG_COLUMNS = ("b", "dp", "tp", "ckpt", "wo", "go", "oo", "ao")
CANDIDATE_COLUMNS = ("l", "w", "n", "m")


@dataclass(frozen=True)
class StageConfig:
    stage_index: int
    layers: int
    micro_batch: int
    dp: int
    tp: int
    nodes: int
    gpus_per_node: int
    zero: int = 0
    ckpt: int = 0
    wo: float = 0.0
    go: float = 0.0
    oo: float = 0.0
    ao: float = 0.0

    def __post_init__(self):
        for f in ("stage_index", "layers", "micro_batch", "dp", "tp", "nodes", "gpus_per_node"):
            v = getattr(self, f)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{f} must be a positive integer, got {v!r}")
        if self.dp * self.tp != self.nodes * self.gpus_per_node:
            raise ValueError(
                f"dp*tp={self.dp * self.tp} must equal devices {self.nodes}x{self.gpus_per_node}"
            )
        if self.zero not in (0, 1, 2, 3):
            raise ValueError(f"zero level must be 0..3, got {self.zero!r}")
        if not (0 <= self.ckpt <= self.layers) or int(self.ckpt) != self.ckpt:
            raise ValueError(f"ckpt must be an integer in [0, {self.layers}], got {self.ckpt!r}")
        for f in ("wo", "go", "oo", "ao"):
            v = getattr(self, f)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{f} must lie in [0, 1], got {v!r}")

    @property
    def devices(self) -> int:
        return self.nodes * self.gpus_per_node

    def key(self) -> tuple:
        """Sort key following the optimization-variable order."""
        return (self.layers, self.micro_batch, self.dp, self.tp, self.zero, self.ckpt,
                self.wo, self.go, self.oo, self.ao)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("wo", "go", "oo", "ao"):
            d[k] = float(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class IterationContext:
    G: int
    S: int
    B_global: int
    mem_budget: float

    def __post_init__(self):
        if self.G < 1 or self.S < 1 or self.B_global < 1:
            raise ValueError("G, S and B_global must be >= 1")
        if self.B_global % self.G:
            raise ValueError(f"G={self.G} must divide the global batch {self.B_global}")

    def in_flight(self, stage_index: int) -> int:
        """Live microbatches held by a stage under one-forward-one-backward."""
        return min(self.G, self.S - stage_index + 1)

    def check(self, cfg: StageConfig) -> None:
        if not 1 <= cfg.stage_index <= self.S:
            raise ValueError(f"stage index {cfg.stage_index} outside 1..{self.S}")
        if cfg.micro_batch * cfg.dp * self.G != self.B_global:
            raise ValueError(
                f"micro_batch*dp*G = {cfg.micro_batch * cfg.dp * self.G} != global batch {self.B_global}"
            )


@dataclass(frozen=True)
class StageCost:
    t: float
    d: float
    mem_fwd_peak: float
    mem_bwd_peak: float

    @property
    def mem_peak(self) -> float:
        return max(self.mem_fwd_peak, self.mem_bwd_peak)


@dataclass(frozen=True)
class StageExprs:
    stable: tuple[Expr, Expr, Expr, Expr]
    first: tuple[Expr, Expr, Expr, Expr]
    mem_fwd: Expr
    mem_bwd: Expr
    states: Expr

    def all(self) -> tuple[Expr, ...]:
        return (*self.stable, *self.first, self.mem_fwd, self.mem_bwd, self.states)

    def map(self, fn) -> "StageExprs":
        return StageExprs(
            tuple(fn(e) for e in self.stable),
            tuple(fn(e) for e in self.first),
            fn(self.mem_fwd),
            fn(self.mem_bwd),
            fn(self.states),
        )


@functools.lru_cache(maxsize=256)
def stage_exprs(
    model: ModelSpec,
    cluster: ClusterSpec,
    zero: int,
    is_first: bool,
    is_last: bool,
    measured: bool = False,
) -> StageExprs:
    """Symbolic channels and memory for one ZeRO level and stage position.

    With ``measured`` the per-layer and LM-head forward times are the free
    symbols ``t_fwd``/``t_head`` (filled per row from an op-time table)
    instead of FLOP-derived expressions.
    """
    E = model.elem_bytes
    s, h = model.seq, model.hidden
    P_layer = float(layer_param_count(model))
    P_emb = float(embedding_param_count(model)) * (int(is_first) + int(is_last))
    P_stage = (l * P_layer + P_emb) / tp
    rate = cluster.mfu * cluster.peak_flops

    # compute
    if measured:
        tf, th = t_fwd, t_head
    else:
        tf = layer_fwd_flops(model, b) / (tp * rate)
        th = head_fwd_flops(model, b) / (tp * rate)
    C = (3 * l + ckpt) * tf
    if is_last:
        C = C + 3 * th

    tp_spans = sx.ind_ge(tp, m + 1)
    dp_spans = sx.ind_ge(n, 2)
    p2p_spans = sx.ind_ge(m, cluster.gpus_per_node)
    act_msg = b * s * h * E

    # tensor-parallel all-reduces: forward, backward and recomputation
    per_dir = 1 if model.parallel_attention else 2
    G2G = per_dir * (2 * l + ckpt) * collective_time("all-reduce", act_msg, tp, tp_spans, cluster)
    sends = int(not is_first) + int(not is_last)
    if sends:
        G2G = G2G + sends * collective_time("p2p", act_msg, 1, p2p_spans, cluster)
    weight_bytes = E * P_stage
    if zero == 3:
        G2G = G2G + 2 * collective_time("all-gather", weight_bytes, dp, dp_spans, cluster)

    full, boundary = default_act_bytes(model, b)
    saved = (ckpt * boundary + (l - ckpt) * full) / tp
    w_shard = 1 / dp if zero == 3 else 1
    g_shard = 1 / dp if zero >= 2 else 1
    o_shard = 1 / dp if zero >= 1 else 1
    G2C = collective_time("d2h", ao * saved, 1, False, cluster)
    C2G = collective_time("h2d", ao * saved, 1, False, cluster) + 2 * collective_time(
        "h2d", wo * weight_bytes * w_shard, 1, False, cluster
    )
    stable = (C, G2G, C2G, G2C)

    # once per iteration, charged to the first microbatch
    opt_bytes = 12 * P_stage * o_shard
    grad_bytes = E * P_stage * g_shard
    if zero == 0:
        sync = collective_time("all-reduce", weight_bytes, dp, dp_spans, cluster)
    else:
        sync = collective_time("reduce-scatter", weight_bytes, dp, dp_spans, cluster) + collective_time(
            "all-gather", weight_bytes, dp, dp_spans, cluster
        )
    first = (
        C,
        G2G + sync,
        C2G
        + collective_time("h2d", oo * opt_bytes, 1, False, cluster)
        + collective_time("h2d", go * grad_bytes, 1, False, cluster),
        G2C
        + collective_time("d2h", oo * opt_bytes, 1, False, cluster)
        + collective_time("d2h", go * grad_bytes, 1, False, cluster),
    )

    # memory
    w_res = (1 - wo) * w_shard
    g_res = (1 - go) * g_shard
    o_res = (1 - oo) * o_shard
    states = P_stage * (E * w_res + E * g_res + 12 * o_res)
    prefetch = E * (P_layer / tp) * minimum(2, l) * (1 - w_res)
    acts = w * (1 - ao) * saved
    base = states + prefetch + acts + full / tp
    if is_last:
        base = base + b * s * model.vocab * 4 / tp
    mem_fwd = base
    mem_bwd = base + E * P_layer / tp

    return StageExprs(stable, first, mem_fwd, mem_bwd, states)


def _position(cfg: StageConfig, ctx: IterationContext) -> tuple[bool, bool]:
    return cfg.stage_index == 1, cfg.stage_index == ctx.S


def measured_times(model: ModelSpec, cluster: ClusterSpec, table: OpTimeTable, b_: int, tp_: int, is_last: bool):
    """(t_fwd, t_head) for one (micro batch, tp); analytical fallback on a miss."""
    rate = cluster.mfu * cluster.peak_flops
    tf = table.lookup("layer_fwd", b=b_, s=model.seq, h=model.hidden, tp=tp_)
    if tf is None:
        tf = float(layer_fwd_flops(model, b_) / (tp_ * rate))
    th = 0.0
    if is_last:
        th = table.lookup("head_fwd", b=b_, s=model.seq, h=model.hidden, v=model.vocab, tp=tp_)
        if th is None:
            th = float(head_fwd_flops(model, b_) / (tp_ * rate))
    return tf, th


def config_bindings(
    cfg: StageConfig,
    ctx: IterationContext,
    model: ModelSpec,
    cluster: ClusterSpec,
    table: Optional[OpTimeTable] = None,
) -> dict[str, float]:
    ctx.check(cfg)
    out = {
        "b": cfg.micro_batch,
        "dp": cfg.dp,
        "tp": cfg.tp,
        "ckpt": cfg.ckpt,
        "wo": cfg.wo,
        "go": cfg.go,
        "oo": cfg.oo,
        "ao": cfg.ao,
        "l": cfg.layers,
        "w": ctx.in_flight(cfg.stage_index),
        "n": cfg.nodes,
        "m": cfg.gpus_per_node,
    }
    if table:
        _, last = _position(cfg, ctx)
        out["t_fwd"], out["t_head"] = measured_times(model, cluster, table, cfg.micro_batch, cfg.tp, last)
    return out


def _exprs_for(cfg, ctx, model, cluster, table) -> StageExprs:
    first, last = _position(cfg, ctx)
    return stage_exprs(model, cluster, cfg.zero, first, last, bool(table))


def time_components(
    cfg: StageConfig,
    ctx: IterationContext,
    model: ModelSpec,
    cluster: ClusterSpec,
    table: Optional[OpTimeTable] = None,
) -> tuple[ChannelVector, ChannelVector]:
    ex = _exprs_for(cfg, ctx, model, cluster, table)
    env = config_bindings(cfg, ctx, model, cluster, table)
    stable = ChannelVector(*(sx.evaluate(e, env) for e in ex.stable))
    first = ChannelVector(*(sx.evaluate(e, env) for e in ex.first))
    return stable, first


def stable_time(cfg, ctx, model, cluster, params: InterferenceParams, table=None) -> float:
    stable, _ = time_components(cfg, ctx, model, cluster, table)
    return pred_intf_scalar(stable.as_tuple(), params)


def delta_time(cfg, ctx, model, cluster, params: InterferenceParams, table=None) -> float:
    stable, first = time_components(cfg, ctx, model, cluster, table)
    return delta_from(pred_intf_scalar(first.as_tuple(), params), pred_intf_scalar(stable.as_tuple(), params))


def delta_from(first_time, stable_time):
    """Clamp at zero: a negative delta has no meaning in the pipeline objective."""
    return np.maximum(first_time - stable_time, 0.0) if isinstance(first_time, np.ndarray) else max(
        first_time - stable_time, 0.0
    )


def peak_memory(cfg, ctx, model, cluster, table=None) -> tuple[Expr, Expr]:
    """(forward peak, backward peak) with the configuration substituted."""
    ex = _exprs_for(cfg, ctx, model, cluster, table)
    env = config_bindings(cfg, ctx, model, cluster, table)
    return (
        sx.substitute(ex.mem_fwd, env, strict=False),
        sx.substitute(ex.mem_bwd, env, strict=False),
    )


def model_state_bytes(cfg, ctx, model, cluster) -> float:
    ex = _exprs_for(cfg, ctx, model, cluster, None)
    return sx.evaluate(ex.states, config_bindings(cfg, ctx, model, cluster))


def stage_cost(cfg, ctx, model, cluster, params, table=None) -> StageCost:
    """Single-configuration evaluation by direct substitution."""
    ex = _exprs_for(cfg, ctx, model, cluster, table)
    env = config_bindings(cfg, ctx, model, cluster, table)
    stable = [sx.evaluate(e, env) for e in ex.stable]
    first = [sx.evaluate(e, env) for e in ex.first]
    t = pred_intf_scalar(stable, params)
    d = delta_from(pred_intf_scalar(first, params), t)
    return StageCost(t, d, sx.evaluate(ex.mem_fwd, env), sx.evaluate(ex.mem_bwd, env))


# -- batched path ------------------------------------------------------------


@functools.lru_cache(maxsize=4096)
def candidate_exprs(
    model: ModelSpec,
    cluster: ClusterSpec,
    zero: int,
    is_first: bool,
    is_last: bool,
    measured: bool,
    layers: int,
    in_flight: int,
    nodes: int,
    gpus_per_node: int,
) -> StageExprs:
    base = stage_exprs(model, cluster, zero, is_first, is_last, measured)
    fixed = {"l": layers, "w": in_flight, "n": nodes, "m": gpus_per_node}
    return base.map(lambda e: sx.simplify(sx.substitute(e, fixed, strict=False)))


@dataclass
class BatchCost:
    t: np.ndarray
    d: np.ndarray
    mem_fwd: np.ndarray
    mem_bwd: np.ndarray

    @property
    def mem_peak(self) -> np.ndarray:
        return np.maximum(self.mem_fwd, self.mem_bwd)


def eval_memory(exprs: StageExprs, rows: sx.BindingTable) -> tuple[np.ndarray, np.ndarray]:
    return sx.eval_batch(exprs.mem_fwd, rows, check=False), sx.eval_batch(exprs.mem_bwd, rows, check=False)


def eval_times(exprs: StageExprs, rows: sx.BindingTable, params: InterferenceParams) -> tuple[np.ndarray, np.ndarray]:
    n_rows = len(rows)
    S = np.empty((n_rows, 4))
    F = np.empty((n_rows, 4))
    for j in range(4):
        S[:, j] = sx.eval_batch(exprs.stable[j], rows, check=False)
        F[:, j] = sx.eval_batch(exprs.first[j], rows, check=False)
    t = pred_intf(S, params)
    d = delta_from(pred_intf(F, params), t)
    return t, d
