"""Slowdown model for concurrently running compute and transfer channels.

A window of work is summarized by four isolated durations, in this column
order: compute (C), GPU-GPU collectives (G2G), host-to-device copies (C2G)
and device-to-host copies (G2C).  Every combination of two or more channels
carries one slowdown factor per member.  Prediction peels off overlapped time
level by level: all four channels first, then triples, then pairs, each size
class visited in lexicographic channel order; whatever remains runs serially.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._accel import HAVE_NUMBA, njit

log = logging.getLogger(__name__)

CHANNELS = ("C", "G2G", "C2G", "G2C")

# n = 4 down to 2, lexicographic inside each size class
SUBSETS: tuple[tuple[int, ...], ...] = tuple(
    s for n in (4, 3, 2) for s in itertools.combinations(range(4), n)
)
SUBSET_NAMES = tuple("+".join(CHANNELS[j] for j in s) for s in SUBSETS)

_MASKS = np.zeros((len(SUBSETS), 4), dtype=np.bool_)
for _k, _s in enumerate(SUBSETS):
    _MASKS[_k, list(_s)] = True


@dataclass(frozen=True)
class ChannelVector:
    C: float = 0.0
    G2G: float = 0.0
    C2G: float = 0.0
    G2C: float = 0.0

    def __post_init__(self):
        for name in CHANNELS:
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"channel {name} must be finite and >= 0, got {v}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.C, self.G2G, self.C2G, self.G2C)


class InterferenceParams:
    """Slowdown factors for each of the 11 multi-channel subsets."""

    def __init__(self, factors: Mapping[str, Sequence[float]]):
        table = np.ones((len(SUBSETS), 4), dtype=np.float64)
        missing = set(SUBSET_NAMES) - set(factors)
        if missing:
            raise ValueError(f"missing subsets: {sorted(missing)}")
        extra = set(factors) - set(SUBSET_NAMES)
        if extra:
            raise ValueError(f"unknown subsets: {sorted(extra)}")
        for k, (name, members) in enumerate(zip(SUBSET_NAMES, SUBSETS)):
            vals = [float(v) for v in factors[name]]
            if len(vals) != len(members):
                raise ValueError(f"{name}: expected {len(members)} factors, got {len(vals)}")
            for v in vals:
                if not (math.isfinite(v) and v >= 1.0):
                    raise ValueError(f"{name}: slowdown factors must be >= 1, got {v}")
            table[k, list(members)] = vals
        table.setflags(write=False)
        self.table = table

    @classmethod
    def from_table(cls, table: np.ndarray) -> "InterferenceParams":
        return cls({name: [table[k, j] for j in s] for k, (name, s) in enumerate(zip(SUBSET_NAMES, SUBSETS))})

    @classmethod
    def uniform(cls, value: float = 1.0) -> "InterferenceParams":
        return cls({name: [value] * len(s) for name, s in zip(SUBSET_NAMES, SUBSETS)})

    @classmethod
    def default(cls) -> "InterferenceParams":
        """Synthetic desk-scale defaults (not measured on hardware)."""
        by_size = {2: 1.15, 3: 1.25, 4: 1.35}
        return cls({name: [by_size[len(s)]] * len(s) for name, s in zip(SUBSET_NAMES, SUBSETS)})

    def factors(self, name: str) -> tuple[float, ...]:
        k = SUBSET_NAMES.index(name)
        return tuple(float(self.table[k, j]) for j in SUBSETS[k])

    def to_dict(self) -> dict[str, list[float]]:
        return {name: list(self.factors(name)) for name in SUBSET_NAMES}

    def __eq__(self, other):
        return isinstance(other, InterferenceParams) and np.array_equal(self.table, other.table)

    def __repr__(self):
        return f"InterferenceParams({self.to_dict()})"


# -- prediction kernels ------------------------------------------------------


@njit
def _pred_kernel(X, masks, table):
    n = X.shape[0]
    out = np.zeros(n)
    x = np.empty(4)
    sc = np.empty(4)
    for r in range(n):
        for j in range(4):
            x[j] = X[r, j]
        t = 0.0
        for k in range(masks.shape[0]):
            match = True
            for j in range(4):
                if (x[j] != 0.0) != masks[k, j]:
                    match = False
                    break
            if not match:
                continue
            ov = np.inf
            for j in range(4):
                if masks[k, j]:
                    sc[j] = x[j] * table[k, j]
                    if sc[j] < ov:
                        ov = sc[j]
            for j in range(4):
                if masks[k, j]:
                    x[j] = (sc[j] - ov) / table[k, j]
            t += ov
        out[r] = t + (((x[0] + x[1]) + x[2]) + x[3])
    return out


def _pred_numpy(X: np.ndarray, table: np.ndarray) -> np.ndarray:
    X = X.copy()
    T = np.zeros(X.shape[0])
    for k, members in enumerate(SUBSETS):
        ids = np.flatnonzero(np.all((X != 0.0) == _MASKS[k], axis=1))
        if ids.size == 0:
            continue
        cols = list(members)
        f = table[k, cols]
        scaled = X[np.ix_(ids, cols)] * f
        overlap = scaled.min(axis=1)
        X[np.ix_(ids, cols)] = (scaled - overlap[:, None]) / f
        T[ids] += overlap
    return T + (((X[:, 0] + X[:, 1]) + X[:, 2]) + X[:, 3])


def _as_matrix(channels) -> np.ndarray:
    if isinstance(channels, ChannelVector):
        channels = [channels]
    if isinstance(channels, np.ndarray):
        X = np.asarray(channels, dtype=np.float64)
    else:
        rows = [c.as_tuple() if isinstance(c, ChannelVector) else tuple(c) for c in channels]
        X = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    if X.ndim != 2 or X.shape[1] != 4:
        raise ValueError("channel batch must have shape (n, 4)")
    return X


def pred_intf(channels, params: InterferenceParams, backend: str | None = None) -> np.ndarray:
    """Predicted wall-clock seconds for each row of channel durations.

    ``channels`` is an ``(n, 4)`` array in ``CHANNELS`` order or a sequence of
    :class:`ChannelVector`.
    """
    X = np.ascontiguousarray(_as_matrix(channels))
    backend = backend or ("numba" if HAVE_NUMBA else "numpy")
    if backend == "numba":
        return _pred_kernel(X, _MASKS, params.table)
    if backend == "numpy":
        return _pred_numpy(X, params.table)
    raise ValueError(f"unknown backend {backend!r}")


def pred_intf_columns(c, g2g, c2g, g2c, params: InterferenceParams) -> np.ndarray:
    return pred_intf(np.column_stack([c, g2g, c2g, g2c]), params)


def pred_intf_scalar(vec: Sequence[float], params: InterferenceParams) -> float:
    """Row-at-a-time reference in plain Python floats."""
    x = [float(v) for v in vec]
    t = 0.0
    for k, members in enumerate(SUBSETS):
        if any((x[j] != 0.0) != bool(_MASKS[k, j]) for j in range(4)):
            continue
        f = [float(params.table[k, j]) for j in members]
        scaled = [x[j] * fj for j, fj in zip(members, f)]
        ov = min(scaled)
        for j, s, fj in zip(members, scaled, f):
            x[j] = (s - ov) / fj
        t += ov
    return t + (((x[0] + x[1]) + x[2]) + x[3])


# -- fitting -----------------------------------------------------------------

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden(f, lo: float, hi: float, tol: float) -> tuple[float, float]:
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    if fc <= fd:
        return c, fc
    return d, fd


def relative_loss(pred: np.ndarray, observed: np.ndarray) -> float:
    r = (pred - observed) / observed
    return float(np.mean(r * r))


def fit_params(
    observations: Iterable,
    init: InterferenceParams | None = None,
    upper: float = 4.0,
    tol: float = 1e-10,
    max_sweeps: int = 60,
    grid: int = 12,
) -> InterferenceParams:
    """Fit slowdown factors to observed totals.

    ``observations`` yields ``(channels, total)`` pairs.  Coordinate descent
    over the factors; each coordinate gets a coarse grid scan on ``[1, upper]``
    followed by golden-section refinement around the best grid cell.  A move
    is kept only if it lowers the mean squared relative error, so the result
    is never worse than ``init``.
    """
    chans, totals = [], []
    for vec, total in observations:
        v = vec.as_tuple() if isinstance(vec, ChannelVector) else tuple(float(x) for x in vec)
        if len(v) != 4 or any(not math.isfinite(x) or x < 0 for x in v):
            raise ValueError(f"bad channel vector {vec!r}")
        total = float(total)
        if not math.isfinite(total) or total < 0:
            raise ValueError(f"bad observed total {total!r}")
        if all(x == 0 for x in v):
            if total != 0:
                raise ValueError("observation with all channels zero but nonzero total")
            continue
        chans.append(v)
        totals.append(total)
    if not chans:
        raise ValueError("no usable observations")
    X = np.asarray(chans, dtype=np.float64)
    y = np.asarray(totals, dtype=np.float64)
    init = init or InterferenceParams.uniform(1.0)
    table = np.array(init.table, dtype=np.float64)

    nz = X != 0.0
    coords = []
    for k, members in enumerate(SUBSETS):
        rows = np.flatnonzero(np.all(nz[:, list(members)], axis=1))
        if rows.size == 0:
            continue
        for j in members:
            coords.append((k, j, rows))
    if not coords:
        return init

    def loss_on(rows, tab):
        return relative_loss(pred_intf(X[rows], _Frozen(tab)), y[rows])

    total = loss_on(slice(None), table)
    log.debug("fit start loss=%.6g over %d rows, %d coordinates", total, len(y), len(coords))
    # pairs first: triples and the quadruple reduce onto them
    coords.sort(key=lambda c: (len(SUBSETS[c[0]]), c[0], c[1]))
    for sweep in range(max_sweeps):
        before = total
        start = table.copy()
        for k, j, rows in coords:
            Xr, yr = X[rows], y[rows]
            cur = table[k, j]
            trial = table.copy()

            def f(v):
                trial[k, j] = v
                return relative_loss(pred_intf(Xr, _Frozen(trial)), yr)

            base = f(cur)
            pts = np.linspace(1.0, upper, grid)
            vals = [f(p) for p in pts]
            i = int(np.argmin(vals))
            lo = pts[max(i - 1, 0)]
            hi = pts[min(i + 1, grid - 1)]
            v, fv = _golden(f, lo, hi, tol)
            if vals[i] < fv:
                v, fv = pts[i], vals[i]
            if fv < base:
                table[k, j] = v
        total = loss_on(slice(None), table)
        # pattern move: extrapolate along this sweep's net displacement
        step = table - start
        if np.any(step):
            neg = step < 0
            cap = np.min((table[neg] - 1.0) / -step[neg]) if np.any(neg) else 8.0
            cap = min(cap, 8.0)
            if cap > 0:
                a, fa = _golden(lambda a: loss_on(slice(None), table + a * step), 0.0, cap, tol)
                if fa < total:
                    table = np.maximum(table + a * step, 1.0)
                    total = loss_on(slice(None), table)
        log.debug("sweep %d loss=%.6g", sweep, total)
        if before - total <= tol * max(before, 1e-300):
            break
    return InterferenceParams.from_table(table)


class _Frozen:
    """Unchecked params view used inside the optimizer loop."""

    __slots__ = ("table",)

    def __init__(self, table):
        self.table = table


# -- files -------------------------------------------------------------------


def read_observations(path) -> list[tuple[ChannelVector, float]]:
    """Observation CSV: header ``C,G2G,C2G,G2C,total``."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = set(CHANNELS) | {"total"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"observation CSV needs columns {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                vec = ChannelVector(*(float(row[c]) for c in CHANNELS))
                out.append((vec, float(row["total"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
    return out


def write_observations(path, observations) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*CHANNELS, "total"])
        for vec, total in observations:
            v = vec.as_tuple() if isinstance(vec, ChannelVector) else tuple(vec)
            w.writerow([repr(float(x)) for x in v] + [repr(float(total))])
