"""Small symbolic arithmetic engine.

Cost and memory models are built once as expression trees over named
symbols, then either partially substituted (per pipeline-stage candidate) or
evaluated in bulk over a table of configurations.  Evaluation always runs in
float64; integer-valued symbols are exact up to 2**53.

Supported nodes: constants, symbols, ``+ - * /``, floor/ceil division,
``max``/``min`` and 0/1 indicators for ``==`` and ``>=``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "POSITIVE_INTEGER",
    "NONNEGATIVE_REAL",
    "UNIT_INTERVAL",
    "Symbol",
    "SymbolTable",
    "Expr",
    "BindingTable",
    "SymExprError",
    "UnknownSymbolError",
    "DomainError",
    "InconsistentDomainError",
    "const",
    "sym",
    "floor_div",
    "ceil_div",
    "maximum",
    "minimum",
    "ind_eq",
    "ind_ge",
    "substitute",
    "evaluate",
    "eval_batch",
    "simplify",
    "free_symbols",
    "node_count",
    "to_text",
    "from_text",
    "compile_batch",
]

POSITIVE_INTEGER = "positive-integer"
NONNEGATIVE_REAL = "nonnegative-real"
UNIT_INTERVAL = "unit-interval-real"
_DOMAINS = (POSITIVE_INTEGER, NONNEGATIVE_REAL, UNIT_INTERVAL)


class SymExprError(Exception):
    pass


class UnknownSymbolError(SymExprError, KeyError):
    pass


class DomainError(SymExprError, ValueError):
    pass


class InconsistentDomainError(SymExprError, ArithmeticError):
    """A denominator evaluated to zero although its domain says it cannot."""


def _in_domain(domain: str, value: float) -> bool:
    if not math.isfinite(value):
        return False
    if domain == POSITIVE_INTEGER:
        return value >= 1 and float(value).is_integer()
    if domain == NONNEGATIVE_REAL:
        return value >= 0
    return 0 <= value <= 1


@dataclass(frozen=True)
class Symbol:
    name: str
    domain: str = NONNEGATIVE_REAL
    default: float | None = None

    def __post_init__(self):
        if not self.name.isidentifier():
            raise ValueError(f"bad symbol name {self.name!r}")
        if self.domain not in _DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.default is not None and not _in_domain(self.domain, float(self.default)):
            raise DomainError(f"default {self.default} of {self.name} outside {self.domain}")


class SymbolTable:
    """Registry guaranteeing one Symbol per name."""

    def __init__(self):
        self._symbols: dict[str, Symbol] = {}

    def symbol(self, name: str, domain: str = NONNEGATIVE_REAL, default=None) -> "Expr":
        existing = self._symbols.get(name)
        new = Symbol(name, domain, default)
        if existing is not None and existing != new:
            raise ValueError(f"symbol {name!r} already declared as {existing}")
        self._symbols[name] = new
        return sym(new)

    def symbols(self, names: str, domain: str = NONNEGATIVE_REAL, defaults=None) -> tuple:
        names_ = names.split()
        defaults = defaults if defaults is not None else (None,) * len(names_)
        if len(defaults) != len(names_):
            raise ValueError("one default per symbol")
        return tuple(self.symbol(n, domain, d) for n, d in zip(names_, defaults))

    def __getitem__(self, name: str) -> Symbol:
        try:
            return self._symbols[name]
        except KeyError:
            raise UnknownSymbolError(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._symbols

    def __iter__(self):
        return iter(self._symbols.values())


Number = Union[int, float]
ExprLike = Union["Expr", int, float]


class Expr:
    """Immutable expression node.

    ``op`` is one of ``const sym add sub mul div floordiv ceildiv max min eq
    ge``; ``args`` holds the float value, the :class:`Symbol`, or child nodes.
    """

    __slots__ = ("op", "args", "_hash")

    def __init__(self, op: str, args: tuple):
        object.__setattr__(self, "op", op)
        object.__setattr__(self, "args", args)
        object.__setattr__(self, "_hash", hash((op, args)))

    def __setattr__(self, key, value):
        raise AttributeError("Expr is immutable")

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Expr) or self._hash != other._hash:
            return False
        return self.op == other.op and self.args == other.args

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        return f"Expr({to_text(self)})"

    def __float__(self):
        if self.op != "const":
            raise TypeError(f"expression is not constant: {to_text(self)}")
        return self.args[0]

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    @property
    def value(self) -> float:
        return float(self)

    def __add__(self, o):
        return _binary("add", self, o)

    def __radd__(self, o):
        return _binary("add", o, self)

    def __sub__(self, o):
        return _binary("sub", self, o)

    def __rsub__(self, o):
        return _binary("sub", o, self)

    def __mul__(self, o):
        return _binary("mul", self, o)

    def __rmul__(self, o):
        return _binary("mul", o, self)

    def __truediv__(self, o):
        return _binary("div", self, o)

    def __rtruediv__(self, o):
        return _binary("div", o, self)

    def __floordiv__(self, o):
        return _binary("floordiv", self, o)

    def __rfloordiv__(self, o):
        return _binary("floordiv", o, self)


def const(value: Number) -> Expr:
    v = float(value)
    if not math.isfinite(v):
        raise ValueError("constants must be finite")
    return Expr("const", (v,))


def sym(s: Symbol) -> Expr:
    return Expr("sym", (s,))


def _wrap(x: ExprLike) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return const(x)
    raise TypeError(f"cannot use {type(x).__name__} in an expression")


def _fold(op: str, a: float, b: float) -> float:
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        if b == 0:
            raise InconsistentDomainError("division by zero")
        return a / b
    if op == "floordiv":
        if b == 0:
            raise InconsistentDomainError("division by zero")
        return float(math.floor(a / b))
    if op == "ceildiv":
        if b == 0:
            raise InconsistentDomainError("division by zero")
        return float(math.ceil(a / b))
    if op == "max":
        return a if a >= b else b
    if op == "min":
        return a if a <= b else b
    if op == "eq":
        return 1.0 if a == b else 0.0
    if op == "ge":
        return 1.0 if a >= b else 0.0
    raise ValueError(op)


_DIVS = ("div", "floordiv", "ceildiv")


def _make(op: str, a: Expr, b: Expr, check: bool = True) -> Expr:
    if a.op == "const" and b.op == "const":
        return Expr("const", (_fold(op, a.args[0], b.args[0]),))
    if check and op in _DIVS and not _positive(b):
        raise DomainError(f"denominator not provably positive: {to_text(b)}")
    return Expr(op, (a, b))


def _binary(op: str, a: ExprLike, b: ExprLike) -> Expr:
    return _make(op, _wrap(a), _wrap(b))


def floor_div(a: ExprLike, b: ExprLike) -> Expr:
    return _binary("floordiv", a, b)


def ceil_div(a: ExprLike, b: ExprLike) -> Expr:
    return _binary("ceildiv", a, b)


def maximum(*xs: ExprLike) -> Expr:
    if not xs:
        raise ValueError("maximum of nothing")
    out = _wrap(xs[0])
    for x in xs[1:]:
        out = _binary("max", out, x)
    return out


def minimum(*xs: ExprLike) -> Expr:
    if not xs:
        raise ValueError("minimum of nothing")
    out = _wrap(xs[0])
    for x in xs[1:]:
        out = _binary("min", out, x)
    return out


def ind_eq(a: ExprLike, b: ExprLike) -> Expr:
    return _binary("eq", a, b)


def ind_ge(a: ExprLike, b: ExprLike) -> Expr:
    return _binary("ge", a, b)


# -- sign analysis -----------------------------------------------------------


def _nonneg(e: Expr) -> bool:
    op = e.op
    if op == "const":
        return e.args[0] >= 0
    if op == "sym":
        return True  # every domain is nonnegative
    if op in ("eq", "ge"):
        return True
    if op == "sub":
        return False
    if op == "max":
        return _nonneg(e.args[0]) or _nonneg(e.args[1])
    return _nonneg(e.args[0]) and _nonneg(e.args[1])


def _positive(e: Expr) -> bool:
    op = e.op
    if op == "const":
        return e.args[0] > 0
    if op == "sym":
        return e.args[0].domain == POSITIVE_INTEGER
    if op == "add":
        a, b = e.args
        return (_positive(a) and _nonneg(b)) or (_positive(b) and _nonneg(a))
    if op in ("mul", "div", "min"):
        return _positive(e.args[0]) and _positive(e.args[1])
    if op == "ceildiv":
        return _positive(e.args[0]) and _positive(e.args[1])
    if op == "max":
        return _positive(e.args[0]) or _positive(e.args[1])
    return False


# -- traversal helpers -------------------------------------------------------


def free_symbols(e: Expr) -> set[Symbol]:
    out: set[Symbol] = set()
    seen: set[int] = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if n.op == "sym":
            out.add(n.args[0])
        elif n.op != "const":
            stack.extend(n.args)
    return out


def node_count(e: Expr) -> int:
    """Number of nodes of ``e`` viewed as a tree (shared subtrees count twice)."""
    memo: dict[int, int] = {}

    def go(n: Expr) -> int:
        k = memo.get(id(n))
        if k is None:
            k = 1 if n.op in ("const", "sym") else 1 + go(n.args[0]) + go(n.args[1])
            memo[id(n)] = k
        return k

    return go(e)


def _check_value(s: Symbol, value) -> float:
    v = float(value)
    if not _in_domain(s.domain, v):
        raise DomainError(f"{s.name}={value!r} outside {s.domain}")
    return v


def substitute(e: Expr, bindings: Mapping, strict: bool = True) -> Expr:
    """Replace symbols by numbers or expressions.

    Keys are symbol names or :class:`Symbol` objects.  With ``strict`` every
    key must name a free symbol of ``e``.  Numeric values are domain checked.
    """
    free = {s.name: s for s in free_symbols(e)}
    resolved: dict[str, Expr] = {}
    for key, value in bindings.items():
        name = key.name if isinstance(key, Symbol) else key
        s = free.get(name)
        if s is None:
            if strict:
                raise UnknownSymbolError(name)
            continue
        if isinstance(value, Expr):
            resolved[name] = value
        else:
            resolved[name] = Expr("const", (_check_value(s, value),))
    if not resolved:
        return e
    memo: dict[int, Expr] = {}

    def go(n: Expr) -> Expr:
        out = memo.get(id(n))
        if out is not None:
            return out
        if n.op == "const":
            out = n
        elif n.op == "sym":
            out = resolved.get(n.args[0].name, n)
        else:
            a, b = n.args
            na, nb = go(a), go(b)
            out = n if (na is a and nb is b) else _make(n.op, na, nb, check=False)
        memo[id(n)] = out
        return out

    return go(e)


def evaluate(e: Expr, bindings: Mapping) -> float:
    """Fully substitute and return the float value."""
    out = substitute(e, bindings, strict=False)
    if out.op != "const":
        missing = sorted(s.name for s in free_symbols(out))
        raise UnknownSymbolError(f"unbound symbols: {missing}")
    return out.args[0]


# -- simplification ----------------------------------------------------------


def _is(e: Expr, v: float) -> bool:
    return e.op == "const" and e.args[0] == v


def simplify(e: Expr) -> Expr:
    """Exact rewrites only (identities that hold bitwise in float64).

    The result evaluates identically on every binding and is never larger.
    """
    memo: dict[int, Expr] = {}

    def go(n: Expr) -> Expr:
        out = memo.get(id(n))
        if out is not None:
            return out
        if n.op in ("const", "sym"):
            out = n
        else:
            a, b = (go(x) for x in n.args)
            out = _rewrite(n.op, a, b)
        memo[id(n)] = out
        return out

    return go(e)


def _rewrite(op: str, a: Expr, b: Expr) -> Expr:
    if a.op == "const" and b.op == "const":
        return Expr("const", (_fold(op, a.args[0], b.args[0]),))
    if op == "add":
        if _is(a, 0.0):
            return b
        if _is(b, 0.0):
            return a
    elif op == "sub":
        if _is(b, 0.0):
            return a
        if a == b:
            return Expr("const", (0.0,))
    elif op == "mul":
        if _is(a, 1.0):
            return b
        if _is(b, 1.0):
            return a
        if _is(a, 0.0) or _is(b, 0.0):
            return Expr("const", (0.0,))
    elif op == "div":
        if _is(b, 1.0):
            return a
        if _is(a, 0.0):
            return a
    elif op in ("max", "min"):
        if a == b:
            return a
    elif op == "eq":
        if a == b:
            return Expr("const", (1.0,))
    elif op == "ge":
        if a == b:
            return Expr("const", (1.0,))
    return Expr(op, (a, b))


# -- batched evaluation ------------------------------------------------------


class BindingTable:
    """Column-oriented batch of symbol bindings (one row per configuration)."""

    def __init__(self, columns: Mapping[str, Sequence[float]]):
        cols = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in columns.items()}
        sizes = {c.shape for c in cols.values()}
        if len(sizes) > 1:
            raise ValueError(f"ragged columns: {sizes}")
        if sizes and next(iter(sizes)).__len__() != 1:
            raise ValueError("columns must be one-dimensional")
        self.columns = cols
        self.n_rows = next(iter(sizes))[0] if sizes else 0

    @classmethod
    def from_rows(cls, rows: Iterable[Mapping[str, float]]) -> "BindingTable":
        rows = list(rows)
        if not rows:
            return cls({})
        names = list(rows[0])
        return cls({n: [r[n] for r in rows] for n in names})

    def row(self, i: int) -> dict[str, float]:
        return {k: float(v[i]) for k, v in self.columns.items()}

    def __len__(self) -> int:
        return self.n_rows

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def take(self, idx) -> "BindingTable":
        return BindingTable({k: v[idx] for k, v in self.columns.items()})


_NP_BINARY = {
    "add": "{a} + {b}",
    "sub": "{a} - {b}",
    "mul": "{a} * {b}",
    "div": "{a} / {b}",
    "floordiv": "_np.floor({a} / {b})",
    "ceildiv": "_np.ceil({a} / {b})",
    "max": "_np.where({a} >= {b}, {a}, {b})",
    "min": "_np.where({a} <= {b}, {a}, {b})",
    "eq": "({a} == {b}).astype(_np.float64)",
    "ge": "({a} >= {b}).astype(_np.float64)",
}


class CompiledExpr:
    """Straight-line numpy program for one expression (shared subtrees once)."""

    def __init__(self, e: Expr):
        self.expr = e
        self.symbols = sorted(free_symbols(e), key=lambda s: s.name)
        lines: list[str] = []
        names: dict[Expr, str] = {}
        divisors: list[str] = []

        def emit(n: Expr) -> str:
            hit = names.get(n)
            if hit is not None:
                return hit
            if n.op == "const":
                ref = repr(n.args[0])
            elif n.op == "sym":
                ref = f"c[{n.args[0].name!r}]"
            else:
                a, b = (emit(x) for x in n.args)
                ref = f"v{len(lines)}"
                lines.append(f"    {ref} = {_NP_BINARY[n.op].format(a=a, b=b)}")
                if n.op in _DIVS and n.args[1].op != "const":
                    divisors.append(b)
            names[n] = ref
            return ref

        result = emit(e)
        checks = " or ".join(f"_np.any(_np.asarray({d}) == 0)" for d in divisors) or "False"
        src = "def _f(c, n):\n"
        src += "\n".join(lines) + ("\n" if lines else "")
        src += f"    if {checks}:\n        raise _Err('division by zero in batch')\n"
        src += f"    return _np.broadcast_to(_np.asarray({result}, dtype=_np.float64), (n,)).copy()\n"
        scope = {"_np": np, "_Err": InconsistentDomainError}
        exec(compile(src, "<symexpr>", "exec"), scope)
        self._fn = scope["_f"]
        self.source = src

    def __call__(self, table: "BindingTable | Mapping") -> np.ndarray:
        if not isinstance(table, BindingTable):
            table = BindingTable(table)
        cols = table.columns
        for s in self.symbols:
            col = cols.get(s.name)
            if col is None:
                raise UnknownSymbolError(f"missing column {s.name!r}")
        with np.errstate(divide="ignore", invalid="ignore"):
            return self._fn(cols, table.n_rows)


_COMPILED: dict[Expr, CompiledExpr] = {}


def compile_batch(e: Expr) -> CompiledExpr:
    hit = _COMPILED.get(e)
    if hit is None:
        if len(_COMPILED) > 4096:
            _COMPILED.clear()
        hit = _COMPILED[e] = CompiledExpr(e)
    return hit


def check_domains(e: Expr, table: BindingTable) -> None:
    for s in free_symbols(e):
        col = table.columns.get(s.name)
        if col is None:
            raise UnknownSymbolError(f"missing column {s.name!r}")
        if s.domain == POSITIVE_INTEGER:
            ok = np.all((col >= 1) & (col == np.floor(col)))
        elif s.domain == NONNEGATIVE_REAL:
            ok = np.all(col >= 0)
        else:
            ok = np.all((col >= 0) & (col <= 1))
        if not ok or not np.all(np.isfinite(col)):
            raise DomainError(f"column {s.name!r} outside {s.domain}")


def eval_batch(e: Expr, table: "BindingTable | Mapping", check: bool = True) -> np.ndarray:
    """Evaluate ``e`` on every row of ``table``; bitwise equal to :func:`evaluate` per row."""
    if not isinstance(table, BindingTable):
        table = BindingTable(table)
    if check:
        check_domains(e, table)
    return compile_batch(e)(table)


# -- text form ---------------------------------------------------------------


def _fmt_const(v: float) -> str:
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


def to_text(e: Expr) -> str:
    """Canonical prefix form, e.g. ``(add b (mul 2 s))``."""
    if e.op == "const":
        return _fmt_const(e.args[0])
    if e.op == "sym":
        return e.args[0].name
    return f"({e.op} {to_text(e.args[0])} {to_text(e.args[1])})"


_OPS = {"add", "sub", "mul", "div", "floordiv", "ceildiv", "max", "min", "eq", "ge"}


def from_text(text: str, table: SymbolTable) -> Expr:
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def parse() -> Expr:
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError("unexpected end of expression")
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            op = tokens[pos]
            pos += 1
            if op not in _OPS:
                raise ValueError(f"unknown operator {op!r}")
            a = parse()
            b = parse()
            if tokens[pos] != ")":
                raise ValueError("expected ')'")
            pos += 1
            return Expr(op, (a, b))
        try:
            return const(float(tok))
        except ValueError:
            return sym(table[tok])

    out = parse()
    if pos != len(tokens):
        raise ValueError("trailing tokens")
    return out
