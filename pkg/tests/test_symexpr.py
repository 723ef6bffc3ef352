import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipeplan import symexpr as sx


@pytest.fixture
def T():
    t = sx.SymbolTable()
    t.symbols("b s dp", sx.POSITIVE_INTEGER)
    t.symbols("x y", sx.NONNEGATIVE_REAL)
    t.symbol("r", sx.UNIT_INTERVAL)
    return t


def S(T, name):
    return sx.sym(T[name])


def test_substitute_product(T):
    e = S(T, "b") * S(T, "s")
    assert float(sx.substitute(e, {"b": 4, "s": 128})) == 512


def test_identity_binding_keeps_structure(T):
    x = S(T, "x")
    e = sx.maximum(x, 0)
    assert sx.substitute(e, {"x": x}) == e


def test_ceil_div():
    t = sx.SymbolTable()
    P, DP = t.symbols("P DP", sx.POSITIVE_INTEGER)
    assert float(sx.substitute(sx.ceil_div(P, DP), {"P": 100, "DP": 8})) == 13
    assert float(sx.substitute(sx.floor_div(P, DP), {"P": 100, "DP": 8})) == 12


def test_partial_substitution_leaves_free_symbols(T):
    e = S(T, "b") * S(T, "s") + S(T, "x")
    out = sx.substitute(e, {"b": 2})
    assert {s.name for s in sx.free_symbols(out)} == {"s", "x"}


def test_unknown_symbol_rejected(T):
    with pytest.raises(sx.UnknownSymbolError):
        sx.substitute(S(T, "b") * 2, {"zz": 1})
    with pytest.raises(sx.UnknownSymbolError):
        T["nope"]


def test_domain_violations(T):
    with pytest.raises(sx.DomainError):
        sx.substitute(S(T, "b") + 1, {"b": 0})
    with pytest.raises(sx.DomainError):
        sx.substitute(S(T, "b") + 1, {"b": 1.5})
    with pytest.raises(sx.DomainError):
        sx.substitute(S(T, "r") + 1, {"r": 1.2})
    with pytest.raises(sx.DomainError):
        sx.substitute(S(T, "x") + 1, {"x": -1})


def test_division_needs_positive_denominator(T):
    with pytest.raises(sx.SymExprError):
        S(T, "b") / S(T, "x")  # x may be zero
    S(T, "b") / S(T, "dp")
    S(T, "b") / (S(T, "x") + 1)


def test_simplify_rules(T):
    x = S(T, "x")
    assert sx.simplify(x + 0) == x
    assert sx.simplify(sx.minimum(x, x)) == x
    assert sx.simplify(x * 1) == x
    assert sx.simplify(x - x).is_const
    assert sx.node_count(sx.simplify(x * 0 + x)) <= sx.node_count(x * 0 + x)


def test_eval_batch_examples(T):
    e = S(T, "b") * S(T, "s")
    tab = sx.BindingTable({"b": [1, 2], "s": [1, 3]})
    assert sx.eval_batch(e, tab).tolist() == [1, 6]
    e2 = sx.maximum(S(T, "x"), S(T, "y"))
    assert sx.eval_batch(e2, {"x": [10.0], "y": [12.0]}).tolist() == [12]


def test_eval_batch_missing_column(T):
    with pytest.raises(sx.SymExprError):
        sx.eval_batch(S(T, "b") * S(T, "s"), {"b": [1.0]})


def test_eval_batch_domain_check(T):
    with pytest.raises(sx.DomainError):
        sx.eval_batch(S(T, "b") + 1, {"b": [1.0, 0.0]})


def _random_expr(T, rng, depth):
    leaves = ["b", "s", "dp", "x", "y", "r"]
    if depth == 0 or rng.random() < 0.25:
        if rng.random() < 0.3:
            return sx.const(float(rng.integers(0, 5)))
        return S(T, leaves[rng.integers(len(leaves))])
    a = _random_expr(T, rng, depth - 1)
    b = _random_expr(T, rng, depth - 1)
    op = rng.integers(8)
    if op == 0:
        return a + b
    if op == 1:
        return a - b
    if op == 2:
        return a * b
    if op == 3:
        return a / (S(T, "dp") + S(T, "x") * S(T, "r"))
    if op == 4:
        return sx.maximum(a, b)
    if op == 5:
        return sx.minimum(a, b)
    if op == 6:
        return sx.ind_ge(a, b) * a + sx.ind_eq(a, b)
    return sx.ceil_div(a, S(T, "dp")) + sx.floor_div(b, S(T, "s"))


def _random_rows(rng, n):
    return {
        "b": rng.integers(1, 9, n).astype(float),
        "s": rng.integers(1, 9, n).astype(float),
        "dp": rng.integers(1, 9, n).astype(float),
        "x": rng.uniform(0, 10, n),
        "y": rng.choice([0.0, 1.0, 2.5], n),
        "r": rng.uniform(0, 1, n),
    }


def test_batch_equals_pointwise_random_exprs(T, rng):
    for _ in range(40):
        e = _random_expr(T, rng, 4)
        rows = _random_rows(rng, 64)
        tab = sx.BindingTable(rows)
        got = sx.eval_batch(e, tab)
        names = {s.name for s in sx.free_symbols(e)}
        for i in range(64):
            env = {k: v for k, v in tab.row(i).items() if k in names}
            assert got[i] == sx.evaluate(e, env)


def test_simplify_sound_random(T, rng):
    for _ in range(30):
        e = _random_expr(T, rng, 4)
        s_ = sx.simplify(e)
        assert sx.node_count(s_) <= sx.node_count(e)
        tab = sx.BindingTable(_random_rows(rng, 1000))
        np.testing.assert_array_equal(sx.eval_batch(e, tab), sx.eval_batch(s_, tab))


def test_substitution_homomorphism(T, rng):
    for _ in range(30):
        e = _random_expr(T, rng, 4)
        names = sorted(s.name for s in sx.free_symbols(e))
        if not names:
            continue
        row = sx.BindingTable(_random_rows(rng, 1)).row(0)
        env = {k: row[k] for k in names}
        k = len(names) // 2
        A = {n: env[n] for n in names[:k]}
        B = {n: env[n] for n in names[k:]}
        assert sx.evaluate(sx.substitute(sx.substitute(e, A), B), {}) == sx.evaluate(e, env)


def test_text_round_trip(T, rng):
    for _ in range(30):
        e = _random_expr(T, rng, 4)
        txt = sx.to_text(e)
        back = sx.from_text(txt, T)
        assert sx.to_text(back) == txt
        tab = sx.BindingTable(_random_rows(rng, 50))
        np.testing.assert_array_equal(sx.eval_batch(back, tab), sx.eval_batch(e, tab))


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0, 100), st.floats(0, 100), st.floats(0, 50),
    st.integers(1, 8), st.integers(1, 8),
)
def test_monotone_expressions(x1, dx, y, dp, s):
    # sums, products, max and ceil-div by a fixed positive divisor of nonnegative symbols
    T = sx.SymbolTable()
    X, Y = T.symbols("x y", sx.NONNEGATIVE_REAL)
    DP, Ss = T.symbols("dp s", sx.POSITIVE_INTEGER)
    e = sx.maximum(X * Y + X, sx.ceil_div(X * Ss, DP)) + Y
    env = {"y": y, "dp": dp, "s": s}
    lo = sx.evaluate(e, {**env, "x": x1})
    hi = sx.evaluate(e, {**env, "x": x1 + dx})
    assert hi >= lo


def test_symbol_table_conflicts():
    T = sx.SymbolTable()
    T.symbol("a", sx.POSITIVE_INTEGER)
    with pytest.raises(ValueError):
        T.symbol("a", sx.UNIT_INTERVAL)
    with pytest.raises(sx.DomainError):
        sx.Symbol("q", sx.UNIT_INTERVAL, default=2.0)


def test_const_rejects_nonfinite():
    with pytest.raises(ValueError):
        sx.const(math.inf)
