import random
import xml.etree.ElementTree as ET

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipeplan.pipesim import (
    PipelinePlan,
    closed_form_makespan,
    export_gantt,
    objective,
    objective_float,
    simulate,
)


def random_plan(rng, with_d=True):
    S = rng.randint(1, 8)
    G = rng.randint(1, 16)
    t = [rng.uniform(0.1, 10) for _ in range(S)]
    d = [rng.uniform(0, 30) if with_d and rng.random() < 0.7 else 0.0 for _ in range(S)]
    return PipelinePlan(G, t, d)


def test_objective_examples():
    assert objective(PipelinePlan(4, (10, 12), (5, 3))) == 63
    assert objective(PipelinePlan(3, (7,), (0,))) == 21
    assert objective(PipelinePlan(4, (10, 12), (0, 0))) == 58


def test_simulate_examples():
    assert simulate(PipelinePlan(1, (3, 4), (0, 10)))[0] == 14
    assert simulate(PipelinePlan(5, (2.5,), (1.5,)))[0] == 1.5 + 5 * 2.5
    assert simulate(PipelinePlan(4, (10, 12), (0, 0)))[0] == 58


def test_dominant_first_delta_matches_objective():
    p = PipelinePlan(3, (2, 3, 5), (20, 0, 0))
    assert closed_form_makespan(p) == objective(p) == simulate(p)[0]


def test_validation():
    with pytest.raises(ValueError):
        PipelinePlan(1, (), ())
    with pytest.raises(ValueError):
        PipelinePlan(1, (0.0,), (0.0,))
    with pytest.raises(ValueError):
        PipelinePlan(1, (1.0,), (-1.0,))
    with pytest.raises(ValueError):
        PipelinePlan(0, (1.0,), (0.0,))


def test_oracles_random():
    rng = random.Random(5)
    for _ in range(500):
        p = random_plan(rng)
        sim = simulate(p)[0]
        assert closed_form_makespan(p) == sim
        assert objective(p) >= sim
        assert objective_float(p.G, p.t, p.d) == pytest.approx(objective(p), rel=1e-12)
        assert sim >= p.G * max(p.t) * (1 - 1e-15)
        assert sim >= sum(p.t) * (1 - 1e-15)
        q = PipelinePlan(p.G, p.t, [0.0] * p.S)
        assert objective(q) == simulate(q)[0]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 7), st.floats(0, 5), st.sampled_from(["t", "d", "G"]))
def test_makespan_monotone(seed, idx, bump, what):
    p = random_plan(random.Random(seed))
    i = idx % p.S
    t, d, G = list(p.t), list(p.d), p.G
    if what == "t":
        t[i] += bump
    elif what == "d":
        d[i] += bump
    else:
        G += 1
    assert simulate(PipelinePlan(G, t, d))[0] >= simulate(p)[0]


def test_timeline_structure():
    p = PipelinePlan(4, (3, 5, 2), (1, 7, 0))
    mk, tl = simulate(p)
    assert tl.makespan == mk
    for i, events in enumerate(tl.events):
        assert [k for k, _, _ in events] == [1, 2, 3, 4]
        for (_, s0, e0), (_, s1, _) in zip(events, events[1:]):
            assert e0 <= s1
        assert events[0][1] >= p.d[i]
        if i:
            for (_, s, _), (_, _, e_up) in zip(events, tl.events[i - 1]):
                assert s >= e_up


def test_gantt_text_and_svg():
    plans = [PipelinePlan(1, (3, 4), (0, 10)), PipelinePlan(4, (10, 12), (0, 0)), PipelinePlan(2, (1,), (2,))]
    for p in plans:
        _, tl = simulate(p)
        txt = export_gantt(tl, "rows-text")
        assert txt.count("stage ") == p.S
        assert export_gantt(tl, "rows-text") == txt
        svg = export_gantt(tl, "svg")
        root = ET.fromstring(svg)
        ns = "{http://www.w3.org/2000/svg}"
        rects = root.findall(f"{ns}rect")
        assert sum(r.get("class") == "microbatch" for r in rects) == p.S * p.G
        assert sum(r.get("class") == "prologue" for r in rects) == sum(x > 0 for x in p.d)
        assert root.get("width") == "960"
    with pytest.raises(ValueError):
        export_gantt(tl, "png")
