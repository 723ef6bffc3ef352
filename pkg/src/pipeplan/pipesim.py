"""Pipeline iteration time: the closed-form objective and an event simulator.

Each stage i has a stable per-microbatch time ``t_i`` (forward plus backward)
and an extra ``d_i`` paid once per iteration.  The extra work does not depend
on upstream stages, so it runs as a prologue starting at time zero and can
hide inside the pipeline fill bubble.

All three evaluators work in exact rational arithmetic on the given floats and
round once at the end, so they agree bit for bit whenever they agree in exact
arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence
from xml.sax.saxutils import escape


@dataclass(frozen=True)
class PipelinePlan:
    G: int
    t: tuple[float, ...]
    d: tuple[float, ...]
    configs: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "t", tuple(float(x) for x in self.t))
        object.__setattr__(self, "d", tuple(float(x) for x in self.d))
        if not self.t:
            raise ValueError("pipeline needs at least one stage")
        if len(self.t) != len(self.d):
            raise ValueError("t and d must have one entry per stage")
        if self.G < 1:
            raise ValueError("G must be >= 1")
        if any(not x > 0 for x in self.t):
            raise ValueError("stable times must be > 0")
        if any(not x >= 0 for x in self.d):
            raise ValueError("deltas must be >= 0")

    @classmethod
    def from_pairs(cls, G: int, pairs: Sequence[tuple[float, float]], configs=None) -> "PipelinePlan":
        return cls(G, tuple(p[0] for p in pairs), tuple(p[1] for p in pairs), configs)

    @property
    def S(self) -> int:
        return len(self.t)


def objective(plan: PipelinePlan) -> float:
    """``(G-1)*max t + sum t + max_i (d_i - sum_{j<i} t_j)``."""
    t = [Fraction(x) for x in plan.t]
    d = [Fraction(x) for x in plan.d]
    prefix = Fraction(0)
    imbalance = None
    for ti, di in zip(t, d):
        v = di - prefix
        imbalance = v if imbalance is None or v > imbalance else imbalance
        prefix += ti
    return float((plan.G - 1) * max(t) + prefix + imbalance)


def objective_float(G: int, t: Sequence[float], d: Sequence[float]) -> float:
    """Plain float version of :func:`objective` for search inner loops."""
    prefix = 0.0
    imb = d[0]
    tmax = 0.0
    for ti, di in zip(t, d):
        v = di - prefix
        if v > imb:
            imb = v
        if ti > tmax:
            tmax = ti
        prefix += ti
    return (G - 1) * tmax + prefix + imb


@dataclass
class Timeline:
    """Per-stage microbatch events ``(k, start, end)`` and prologue intervals."""

    events: list[list[tuple[int, float, float]]] = field(default_factory=list)
    prologues: list[tuple[float, float]] = field(default_factory=list)
    makespan: float = 0.0


def _finish_times(plan: PipelinePlan) -> list[list[Fraction]]:
    t = [Fraction(x) for x in plan.t]
    S, G = plan.S, plan.G
    prev = [Fraction(0)] * (G + 1)  # stage 0 finishes everything at time 0
    rows = []
    for i in range(S):
        cur = [Fraction(plan.d[i])] + [Fraction(0)] * G
        for k in range(1, G + 1):
            cur[k] = max(prev[k], cur[k - 1]) + t[i]
        rows.append(cur)
        prev = cur
    return rows


def simulate(plan: PipelinePlan) -> tuple[float, Timeline]:
    """Event-driven makespan with unbounded buffering between stages."""
    rows = _finish_times(plan)
    tl = Timeline()
    for i, row in enumerate(rows):
        ti = Fraction(plan.t[i])
        tl.events.append([(k, float(row[k] - ti), float(row[k])) for k in range(1, plan.G + 1)])
        tl.prologues.append((0.0, plan.d[i]))
    tl.makespan = float(rows[-1][-1])
    return tl.makespan, tl


def closed_form_makespan(plan: PipelinePlan) -> float:
    """Longest lattice path: ``max_j d_j + sum_{m>=j} t_m + (G-1) max_{m>=j} t_m``."""
    t = [Fraction(x) for x in plan.t]
    best = None
    suffix_sum = Fraction(0)
    suffix_max = Fraction(0)
    for j in range(plan.S - 1, -1, -1):
        suffix_sum += t[j]
        suffix_max = max(suffix_max, t[j])
        v = Fraction(plan.d[j]) + suffix_sum + (plan.G - 1) * suffix_max
        best = v if best is None or v > best else best
    # j = 0 (no prologue) is dominated by j = 1 since d_1 >= 0
    return float(best)


# -- rendering ---------------------------------------------------------------

SVG_WIDTH = 960
SVG_ROW_HEIGHT = 28
SVG_MARGIN_LEFT = 80
SVG_MARGIN_TOP = 20
SVG_BAR_COLOR = "#4e79a7"
SVG_PROLOGUE_COLOR = "#e15759"


def export_gantt(timeline: Timeline, fmt: str = "rows-text") -> str:
    if fmt == "rows-text":
        return _gantt_text(timeline)
    if fmt == "svg":
        return _gantt_svg(timeline)
    raise ValueError(f"unknown gantt format {fmt!r}")


def _gantt_text(tl: Timeline) -> str:
    lines = [f"makespan {tl.makespan!r}"]
    for i, (events, pro) in enumerate(zip(tl.events, tl.prologues), start=1):
        parts = []
        if pro[1] > pro[0]:
            parts.append(f"P[{pro[0]!r},{pro[1]!r})")
        parts.extend(f"{k}[{s!r},{e!r})" for k, s, e in events)
        lines.append(f"stage {i}: " + " ".join(parts))
    return "\n".join(lines) + "\n"


def _gantt_svg(tl: Timeline) -> str:
    span = tl.makespan if tl.makespan > 0 else 1.0
    plot_w = SVG_WIDTH - SVG_MARGIN_LEFT - 10
    height = SVG_MARGIN_TOP * 2 + SVG_ROW_HEIGHT * len(tl.events)

    def x(v: float) -> str:
        return f"{SVG_MARGIN_LEFT + plot_w * v / span:.3f}"

    def wdt(a: float, b: float) -> str:
        return f"{plot_w * (b - a) / span:.3f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{height}" '
        f'viewBox="0 0 {SVG_WIDTH} {height}">'
    ]
    for i, (events, pro) in enumerate(zip(tl.events, tl.prologues)):
        y = SVG_MARGIN_TOP + i * SVG_ROW_HEIGHT
        out.append(f'<text x="4" y="{y + 18}" font-size="12">stage {i + 1}</text>')
        if pro[1] > pro[0]:
            out.append(
                f'<rect class="prologue" x="{x(pro[0])}" y="{y + 2}" width="{wdt(*pro)}" '
                f'height="{SVG_ROW_HEIGHT // 2 - 2}" fill="{SVG_PROLOGUE_COLOR}"/>'
            )
        for k, s, e in events:
            out.append(
                f'<rect class="microbatch" x="{x(s)}" y="{y + SVG_ROW_HEIGHT // 2}" width="{wdt(s, e)}" '
                f'height="{SVG_ROW_HEIGHT // 2 - 2}" fill="{SVG_BAR_COLOR}" stroke="white">'
                f"<title>{escape(f'mb {k}: {s!r}-{e!r}')}</title></rect>"
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"
