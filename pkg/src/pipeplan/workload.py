"""Model and cluster descriptions plus closed-form transformer accounting.

Every accounting function accepts plain numbers or :class:`Expr` for its
shape arguments and returns an :class:`Expr`.  Units: bytes, FLOPs, seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping, Optional

from .symexpr import Expr, ExprLike, const, ind_eq, ind_ge

COLLECTIVES = ("all-reduce", "all-gather", "reduce-scatter")
TRANSFERS = ("p2p", "d2h", "h2d")


def _e(x: ExprLike) -> Expr:
    return x if isinstance(x, Expr) else const(x)


@dataclass(frozen=True)
class ModelSpec:
    """Uniform decoder-only transformer.

    ``parallel_attention`` selects the fused attention+MLP block that needs one
    tensor-parallel all-reduce per layer and direction instead of two.
    """

    num_layers: int
    hidden: int
    heads: int
    vocab: int
    seq: int
    ffn: Optional[int] = None
    elem_bytes: int = 2
    flash_attention: bool = False
    parallel_attention: bool = False
    name: str = "model"

    def __post_init__(self):
        if self.ffn is None:
            object.__setattr__(self, "ffn", 4 * self.hidden)
        for f in ("num_layers", "hidden", "heads", "vocab", "seq", "ffn", "elem_bytes"):
            v = getattr(self, f)
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise ValueError(f"model.{f} must be a positive integer, got {v!r}")
        if self.hidden % self.heads:
            raise ValueError("model.hidden must be divisible by model.heads")


@dataclass(frozen=True)
class ClusterSpec:
    nodes: int
    gpus_per_node: int
    gpu_mem_capacity: float  # bytes
    peak_flops: float  # flop/s
    mfu: float
    bw_intra: float  # bytes/s
    bw_inter: float  # bytes/s
    bw_d2h: float  # bytes/s
    bw_h2d: float  # bytes/s
    comm_latency: float = 20e-6  # s per collective launch
    mem_headroom: float = 0.9
    name: str = "cluster"

    def __post_init__(self):
        for f in fields(self):
            if f.name == "name":
                continue
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0:
                raise ValueError(f"cluster.{f.name} must be positive, got {v!r}")
        for f in ("nodes", "gpus_per_node"):
            if not isinstance(getattr(self, f), int):
                raise ValueError(f"cluster.{f} must be an integer")
        if self.mfu > 1:
            raise ValueError("cluster.mfu must lie in (0, 1]")
        if self.mem_headroom > 1:
            raise ValueError("cluster.mem_headroom must lie in (0, 1]")

    @property
    def num_devices(self) -> int:
        return self.nodes * self.gpus_per_node

    @property
    def mem_budget(self) -> float:
        return self.gpu_mem_capacity * self.mem_headroom


def shape_key(**shape) -> str:
    return ",".join(f"{k}={shape[k]}" for k in sorted(shape))


@dataclass(frozen=True)
class OpTimeTable:
    """Measured kernel times, exact-match lookup only.

    Keys are ``(kind, shape_key)``; kinds used by the stage model are
    ``layer_fwd`` (shape b, s, h, tp) and ``head_fwd`` (shape b, s, h, v, tp).
    """

    entries: Mapping[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.entries.items():
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"op time {k} must be positive, got {v!r}")

    def lookup(self, kind: str, **shape) -> Optional[float]:
        return self.entries.get((kind, shape_key(**shape)))

    def __bool__(self):
        return bool(self.entries)

    def __len__(self):
        return len(self.entries)


# -- parameters --------------------------------------------------------------


def layer_param_count(m: ModelSpec) -> Expr:
    h, f = m.hidden, m.ffn
    return _e(4 * h * h + 2 * h * f + 4 * h)


def embedding_param_count(m: ModelSpec) -> Expr:
    """Token embedding (first stage) or untied LM head (last stage)."""
    return _e(m.vocab * m.hidden)


def total_param_count(m: ModelSpec) -> Expr:
    return m.num_layers * layer_param_count(m) + 2 * embedding_param_count(m)


# -- flops -------------------------------------------------------------------


def layer_fwd_flops(m: ModelSpec, b: ExprLike) -> Expr:
    s, h, f = m.seq, m.hidden, m.ffn
    return _e(2 * b * s * (4 * h * h + 2 * h * f) + 4 * b * s * s * h)


def layer_bwd_flops(m: ModelSpec, b: ExprLike) -> Expr:
    return 2 * layer_fwd_flops(m, b)


def head_fwd_flops(m: ModelSpec, b: ExprLike) -> Expr:
    return _e(2 * b * m.seq * m.hidden * m.vocab)


# -- activations -------------------------------------------------------------


def default_act_bytes(m: ModelSpec, b: ExprLike) -> tuple[Expr, Expr]:
    """Saved activation bytes per layer per microbatch: (no checkpointing, checkpointed).

    The non-flash variant uses the common half-precision accounting
    ``b*s*h*(34 + 5*a*s/h)``; flash attention drops the score term.
    """
    s, h, a = m.seq, m.hidden, m.heads
    if m.flash_attention:
        full = b * s * h * 34
    else:
        full = b * s * h * (34 + 5 * a * s / h)
    boundary = m.elem_bytes * b * s * h
    return _e(full), _e(boundary)


# -- communication -----------------------------------------------------------


def _bandwidth_time(nbytes: Expr, spans_nodes, cluster: ClusterSpec, kind: str) -> Expr:
    if kind == "d2h":
        return nbytes / cluster.bw_d2h
    if kind == "h2d":
        return nbytes / cluster.bw_h2d
    if isinstance(spans_nodes, Expr):
        inv = (1.0 / cluster.bw_intra) + spans_nodes * (1.0 / cluster.bw_inter - 1.0 / cluster.bw_intra)
        return nbytes * inv
    bw = cluster.bw_inter if spans_nodes else cluster.bw_intra
    return nbytes / bw


def collective_time(
    kind: str,
    nbytes: ExprLike,
    group_size: ExprLike,
    spans_nodes,
    cluster: ClusterSpec,
) -> Expr:
    """Ring-model time of one collective or transfer.

    ``spans_nodes`` may be a bool or a 0/1 indicator expression.  Zero-byte
    transfers and single-member collectives cost nothing, latency included.
    """
    nbytes = _e(nbytes)
    g = _e(group_size)
    if kind not in COLLECTIVES and kind not in TRANSFERS:
        raise ValueError(f"unknown communication kind {kind!r}")
    if g.is_const and g.value < 1:
        raise ValueError("group size must be >= 1")
    wire = _bandwidth_time(nbytes, spans_nodes, cluster, kind)
    busy = 1 - ind_eq(nbytes, 0)
    if kind in TRANSFERS:
        return wire + cluster.comm_latency * busy
    coef = (g - 1) / g
    if kind == "all-reduce":
        coef = 2 * coef
    return coef * wire + cluster.comm_latency * busy * ind_ge(g, 2)
