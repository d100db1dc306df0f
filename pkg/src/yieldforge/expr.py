"""Symbolic expression trees.

Trees are built from four immutable node types (:class:`Const`, :class:`Var`,
:class:`Unary`, :class:`Binary`). They are the genome of the GP search and the
final, portable representation of a yield function.

Textual grammar (also the wire format used by the CLI and model files)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME '(' expr ')' | NAME | '(' expr ')'

A minus sign directly in front of a numeric literal (not followed by ``^``)
folds into a negative constant, so ``-2*x`` is ``Const(-2) * x`` while
``-(2)*x`` keeps an explicit negation node.
"""

from __future__ import annotations

import math
import re
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass
from typing import Union

import numpy as np

UNARY_OPS = ("sin", "cos", "exp", "log", "neg", "sqrt", "abs", "sign")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")

_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}
_OP_OF_SYMBOL = {v: k for k, v in _SYMBOL.items()}
_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "neg": 3, "pow": 4}
_ATOM_PREC = 5
_FUNCS = frozenset(op for op in UNARY_OPS if op != "neg")


@dataclass(frozen=True, slots=True)
class Const:
    value: float


@dataclass(frozen=True, slots=True)
class Var:
    index: int
    name: str = ""

    def __post_init__(self):
        if not self.name:
            object.__setattr__(self, "name", f"x{self.index}")


@dataclass(frozen=True, slots=True)
class Unary:
    op: str
    child: "Expr"


@dataclass(frozen=True, slots=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Const, Var, Unary, Binary]
Path = tuple[int, ...]


@dataclass(frozen=True)
class DomainViolation:
    """Returned (not raised) when evaluation leaves the real domain."""

    path: Path
    kind: str

    def __float__(self) -> float:
        return math.nan


class ParseError(ValueError):
    def __init__(self, position: int, expected: str, text: str = ""):
        self.position = position
        self.expected = expected
        super().__init__(f"expected {expected} at position {position}" + (f" in {text!r}" if text else ""))


# ---------------------------------------------------------------------------
# structure

def children(node: Expr) -> tuple[Expr, ...]:
    if isinstance(node, Unary):
        return (node.child,)
    if isinstance(node, Binary):
        return (node.left, node.right)
    return ()


def complexity(node: Expr) -> int:
    """Node count; every node weighs 1."""
    if isinstance(node, Unary):
        return 1 + complexity(node.child)
    if isinstance(node, Binary):
        return 1 + complexity(node.left) + complexity(node.right)
    return 1


def depth(node: Expr) -> int:
    """Longest root-to-leaf path counted in edges (a leaf has depth 0)."""
    if isinstance(node, Unary):
        return 1 + depth(node.child)
    if isinstance(node, Binary):
        return 1 + max(depth(node.left), depth(node.right))
    return 0


def variables(node: Expr) -> set[int]:
    if isinstance(node, Var):
        return {node.index}
    out: set[int] = set()
    for c in children(node):
        out |= variables(c)
    return out


def arity(node: Expr) -> int:
    vs = variables(node)
    return max(vs) + 1 if vs else 0


def iter_paths(node: Expr, prefix: Path = ()) -> Iterator[tuple[Path, Expr]]:
    """Pre-order walk yielding (path, subtree)."""
    yield prefix, node
    for i, c in enumerate(children(node)):
        yield from iter_paths(c, prefix + (i,))


def get_subtree(node: Expr, path: Path) -> Expr:
    for i in path:
        node = children(node)[i]
    return node


def replace_subtree(node: Expr, path: Path, new: Expr) -> Expr:
    if not path:
        return new
    head, rest = path[0], path[1:]
    if isinstance(node, Unary):
        return Unary(node.op, replace_subtree(node.child, rest, new))
    if isinstance(node, Binary):
        if head == 0:
            return Binary(node.op, replace_subtree(node.left, rest, new), node.right)
        return Binary(node.op, node.left, replace_subtree(node.right, rest, new))
    raise IndexError("path runs past a leaf")


def constants(node: Expr) -> list[float]:
    return [n.value for _, n in iter_paths(node) if isinstance(n, Const)]


def with_constants(node: Expr, values: Sequence[float]) -> Expr:
    """Replace constants in pre-order with ``values``."""
    it = iter(values)

    def go(n: Expr) -> Expr:
        if isinstance(n, Const):
            return Const(float(next(it)))
        if isinstance(n, Unary):
            return Unary(n.op, go(n.child))
        if isinstance(n, Binary):
            return Binary(n.op, go(n.left), go(n.right))
        return n

    return go(node)


def lift_constants(node: Expr, first_index: int) -> tuple[Expr, list[float]]:
    """Turn each constant into a fresh variable ``first_index + k``."""
    values: list[float] = []

    def go(n: Expr) -> Expr:
        if isinstance(n, Const):
            values.append(n.value)
            k = first_index + len(values) - 1
            return Var(k, f"c{len(values) - 1}")
        if isinstance(n, Unary):
            return Unary(n.op, go(n.child))
        if isinstance(n, Binary):
            return Binary(n.op, go(n.left), go(n.right))
        return n

    return go(node), values


def substitute(node: Expr, mapping: dict[int, Expr]) -> Expr:
    """Replace variables by index with whole subtrees."""
    if isinstance(node, Var):
        return mapping.get(node.index, node)
    if isinstance(node, Unary):
        return Unary(node.op, substitute(node.child, mapping))
    if isinstance(node, Binary):
        return Binary(node.op, substitute(node.left, mapping), substitute(node.right, mapping))
    return node


def rename(node: Expr, names: Sequence[str]) -> Expr:
    return substitute(node, {i: Var(i, n) for i, n in enumerate(names)})


# ---------------------------------------------------------------------------
# scalar evaluation


class _Violation(Exception):
    def __init__(self, path: Path, kind: str):
        self.path = path
        self.kind = kind


def _apply_unary(op: str, a: float, path: Path) -> float:
    if op == "neg":
        return -a
    if op == "sin":
        return math.sin(a)
    if op == "cos":
        return math.cos(a)
    if op == "abs":
        return abs(a)
    if op == "sign":
        return float((a > 0) - (a < 0))
    if op == "exp":
        if a > 709.78:
            raise _Violation(path, "overflow")
        return math.exp(a)
    if op == "log":
        if not a > 0:
            raise _Violation(path, "log_domain")
        return math.log(a)
    if op == "sqrt":
        if a < 0:
            raise _Violation(path, "sqrt_domain")
        return math.sqrt(a)
    raise ValueError(f"unknown unary op {op!r}")


def _apply_binary(op: str, a: float, b: float, path: Path) -> float:
    if op == "add":
        r = a + b
    elif op == "sub":
        r = a - b
    elif op == "mul":
        r = a * b
    elif op == "div":
        if b == 0:
            raise _Violation(path, "div_by_zero")
        r = a / b
    elif op == "pow":
        if a == 0 and b < 0:
            raise _Violation(path, "div_by_zero")
        if a < 0 and b != math.floor(b):
            raise _Violation(path, "pow_non_real")
        try:
            r = math.pow(a, b)
        except OverflowError:
            raise _Violation(path, "overflow") from None
    else:
        raise ValueError(f"unknown binary op {op!r}")
    if not math.isfinite(r):
        raise _Violation(path, "overflow")
    return r


def _eval(node: Expr, x: Sequence[float], path: Path) -> float:
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        return float(x[node.index])
    if isinstance(node, Unary):
        return _apply_unary(node.op, _eval(node.child, x, path + (0,)), path)
    return _apply_binary(
        node.op, _eval(node.left, x, path + (0,)), _eval(node.right, x, path + (1,)), path
    )


def evaluate(node: Expr, x: Sequence[float]) -> float | DomainViolation:
    """Evaluate at a single point, exactly as written (no folding).

    Returns a :class:`DomainViolation` instead of raising when an operator
    leaves its real domain or overflows.
    """
    need = arity(node)
    if len(x) < need:
        raise ValueError(f"expression needs {need} inputs, got {len(x)}")
    try:
        return _eval(node, x, ())
    except _Violation as v:
        return DomainViolation(v.path, v.kind)


# ---------------------------------------------------------------------------
# vectorized evaluation (violations become NaN and propagate)

def _nan_clean(r: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(r)):
        r = np.where(np.isfinite(r), r, np.nan)
    return r


def _v_div(a, b):
    with np.errstate(all="ignore"):
        return _nan_clean(np.where(b == 0, np.nan, a / np.where(b == 0, 1.0, b)))


def _v_log(a):
    with np.errstate(all="ignore"):
        return np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), np.nan)


def _v_sqrt(a):
    with np.errstate(all="ignore"):
        return np.where(a >= 0, np.sqrt(np.abs(a)), np.nan)


def _v_exp(a):
    with np.errstate(all="ignore"):
        return _nan_clean(np.exp(a))


def _v_pow(a, b):
    with np.errstate(all="ignore"):
        bad = ((a < 0) & (b != np.floor(b))) | ((a == 0) & (b < 0))
        return _nan_clean(np.where(bad, np.nan, np.power(a, b)))


def _v_mul(a, b):
    with np.errstate(all="ignore"):
        return _nan_clean(a * b)


def _v_add(a, b):
    with np.errstate(all="ignore"):
        return _nan_clean(a + b)


def _v_sub(a, b):
    with np.errstate(all="ignore"):
        return _nan_clean(a - b)


_V_UNARY: dict[str, Callable] = {
    "neg": np.negative,
    "sin": np.sin,
    "cos": np.cos,
    "abs": np.abs,
    "sign": np.sign,
    "exp": _v_exp,
    "log": _v_log,
    "sqrt": _v_sqrt,
}
_V_BINARY: dict[str, Callable] = {
    "add": _v_add,
    "sub": _v_sub,
    "mul": _v_mul,
    "div": _v_div,
    "pow": _v_pow,
}


def evaluate_array(node: Expr, X) -> np.ndarray:
    """Evaluate over many points. ``X[i]`` is the array of values of variable i.

    Domain violations yield NaN at the offending points.
    """
    if isinstance(node, Const):
        n = np.shape(X[0])[0] if len(X) else 1
        return np.full(n, node.value)
    if isinstance(node, Var):
        return np.asarray(X[node.index], dtype=float)
    if isinstance(node, Unary):
        with np.errstate(all="ignore"):
            return _V_UNARY[node.op](evaluate_array(node.child, X))
    return _V_BINARY[node.op](evaluate_array(node.left, X), evaluate_array(node.right, X))


def _emit(node: Expr) -> str:
    if isinstance(node, Const):
        return f"({node.value!r})"
    if isinstance(node, Var):
        return f"X[{node.index}]"
    if isinstance(node, Unary):
        return f"_u_{node.op}({_emit(node.child)})"
    return f"_b_{node.op}({_emit(node.left)}, {_emit(node.right)})"


_COMPILE_NS = {f"_u_{k}": v for k, v in _V_UNARY.items()} | {f"_b_{k}": v for k, v in _V_BINARY.items()}


_RAW_UNARY = {"neg": "(-{})", **{op: f"np.{op}({{}})" for op in ("sin", "cos", "exp", "log", "sqrt", "abs", "sign")}}
_RAW_BINARY = {"add": "({} + {})", "sub": "({} - {})", "mul": "({} * {})", "div": "({} / {})", "pow": "np.power({}, {})"}


def _emit_raw(node: Expr) -> str:
    if isinstance(node, Const):
        return f"({node.value!r})"
    if isinstance(node, Var):
        return f"X[{node.index}]"
    if isinstance(node, Unary):
        return _RAW_UNARY[node.op].format(_emit_raw(node.child))
    return _RAW_BINARY[node.op].format(_emit_raw(node.left), _emit_raw(node.right))


def compile_many(nodes: Sequence[Expr]) -> Callable[[Sequence], list]:
    """One raw-mode function returning the values of several trees at once."""
    body = ", ".join(_emit_raw(n) for n in nodes)
    src = f"def _f(X):\n    with np.errstate(all='ignore'):\n        return [{body}]\n"
    ns = {"np": np}
    exec(src, ns)
    return ns["_f"]


def compile_array(node: Expr, raw: bool = False) -> Callable[[Sequence[np.ndarray]], np.ndarray]:
    """Compile to a flat Python function; same semantics as :func:`evaluate_array`.

    ``raw`` emits bare numpy ufuncs: faster, and entries of ``X`` may be
    scalars, but invalid points come out as nan or inf rather than nan only.
    """
    if raw:
        src = f"def _f(X):\n    with np.errstate(all='ignore'):\n        return {_emit_raw(node)}\n"
        ns = {"np": np}
        exec(src, ns)
        return ns["_f"]
    src = f"lambda X: _broadcast({_emit(node)}, X)"
    return eval(src, dict(_COMPILE_NS, _broadcast=_broadcast, inf=math.inf, nan=math.nan))


def _broadcast(value, X) -> np.ndarray:
    n = np.shape(X[0])[0] if len(X) else 1
    return np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()


# ---------------------------------------------------------------------------
# printing

def _prec(node: Expr) -> int:
    if isinstance(node, Unary):
        return _PREC["neg"] if node.op == "neg" else _ATOM_PREC
    if isinstance(node, Binary):
        return _PREC[node.op]
    return _ATOM_PREC


def _fmt_const(v: float) -> str:
    s = repr(float(v))
    if v < 0 or (v == 0 and math.copysign(1.0, v) < 0):
        return f"({s})"
    return s


def to_string(node: Expr) -> str:
    if isinstance(node, Const):
        return _fmt_const(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        inner = to_string(node.child)
        if node.op != "neg":
            return f"{node.op}({inner})"
        # parenthesize anything that is not a function call / name / pow
        if isinstance(node.child, (Var, Binary)) and _prec(node.child) >= _PREC["pow"]:
            return f"-{inner}"
        if isinstance(node.child, Var) or (isinstance(node.child, Unary) and node.child.op != "neg"):
            return f"-{inner}"
        return f"-({inner})"
    p = _PREC[node.op]
    left, right = to_string(node.left), to_string(node.right)
    if node.op == "pow":
        if _prec(node.left) <= p:
            left = f"({left})"
        if _prec(node.right) < _ATOM_PREC:
            right = f"({right})"
    else:
        if _prec(node.left) < p:
            left = f"({left})"
        if _prec(node.right) <= p:
            right = f"({right})"
    return f"{left} {_SYMBOL[node.op]} {right}"


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ParseError(start, "a number, name, or operator", text)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, names: Sequence[str] | None):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0
        self.names = list(names) if names is not None else None

    def peek(self, k: int = 0):
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, value: str):
        kind, v, pos = self.peek()
        if v != value or kind != "op":
            raise ParseError(pos, f"'{value}'", self.text)
        self.take()

    def parse(self) -> Expr:
        node = self.expr()
        kind, _, pos = self.peek()
        if kind != "end":
            raise ParseError(pos, "end of input", self.text)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = _OP_OF_SYMBOL[self.take()[1]]
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = _OP_OF_SYMBOL[self.take()[1]]
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        kind, v, _ = self.peek()
        if kind == "op" and v == "-":
            nk, nv, _ = self.peek(1)
            after = self.peek(2)
            if nk == "num" and not (after[0] == "op" and after[1] == "^"):
                self.take()
                self.take()
                return Const(-float(nv))
            self.take()
            return Unary("neg", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return Binary("pow", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, v, pos = self.peek()
        if kind == "num":
            self.take()
            return Const(float(v))
        if kind == "name":
            self.take()
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if v not in _FUNCS:
                    raise ParseError(pos, "a known function name", self.text)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Unary(v, arg)
            return self.variable(v, pos)
        if kind == "op" and v == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        raise ParseError(pos, "expression", self.text)

    def variable(self, name: str, pos: int) -> Expr:
        if self.names is not None and name in self.names:
            return Var(self.names.index(name), name)
        m = re.fullmatch(r"x(\d+)", name)
        if m and self.names is None:
            return Var(int(m.group(1)), name)
        raise ParseError(pos, "a declared variable name", self.text)


def parse(text: str, names: Sequence[str] | None = None) -> Expr:
    """Parse infix text. Variables are ``x0..xN`` unless ``names`` is given."""
    return _Parser(text, names).parse()


# ---------------------------------------------------------------------------
# differentiation

ZERO = Const(0.0)
ONE = Const(1.0)


def _d(node: Expr, v: int) -> Expr:
    if isinstance(node, Const) or v not in variables(node):
        return ZERO
    if isinstance(node, Var):
        return ONE if node.index == v else ZERO
    if isinstance(node, Unary):
        u, du = node.child, _d(node.child, v)
        op = node.op
        if _is_zero(simplify(du)):
            return ZERO
        if op == "neg":
            return Unary("neg", du)
        if op == "sin":
            return Binary("mul", Unary("cos", u), du)
        if op == "cos":
            return Binary("mul", Unary("neg", Unary("sin", u)), du)
        if op == "exp":
            return Binary("mul", node, du)
        if op == "log":
            return Binary("div", du, u)
        if op == "sqrt":
            return Binary("div", du, Binary("mul", Const(2.0), node))
        if op == "abs":
            # subgradient 0 at the kink
            return Binary("mul", Unary("sign", u), du)
        if op == "sign":
            return ZERO
        raise ValueError(op)
    a, b = node.left, node.right
    da, db = _d(a, v), _d(b, v)
    op = node.op
    if op == "add":
        return Binary("add", da, db)
    if op == "sub":
        return Binary("sub", da, db)
    if op == "mul":
        return Binary("add", Binary("mul", da, b), Binary("mul", a, db))
    if op == "div":
        # (da - (a/b) db) / b avoids squaring b, which underflows for tiny b
        return Binary("div", Binary("sub", da, Binary("mul", node, db)), b)
    if op == "pow":
        if _is_zero(simplify(da)) and (not variables(b) or _is_zero(simplify(db))):
            return ZERO
        bc = simplify(b) if not variables(b) else b
        if isinstance(bc, Const):
            if bc.value == 0.0:
                return ZERO
            if bc.value == 1.0:
                return da
            return Binary("mul", Binary("mul", bc, Binary("pow", a, Const(bc.value - 1.0))), da)
        # v u^(v-1) u' + u^v log(u) v'; the log term only when v depends on the variable
        power_term = ZERO if _is_zero(simplify(da)) else Binary("mul", Binary("mul", b, Binary("pow", a, Binary("sub", b, ONE))), da)
        if v not in variables(b) or simplify(db) == ZERO:
            return power_term
        if _is_zero(simplify(a)):
            # 0^v is flat wherever it is defined (v > 0)
            return ZERO
        # log|u| equals log u where u > 0 and keeps the term finite for u < 0 with a locally integer v
        return Binary("add", power_term, Binary("mul", Binary("mul", node, Unary("log", Unary("abs", a))), db))
    raise ValueError(op)


def _is_zero(node: Expr) -> bool:
    """True if the node is 0 wherever it is defined (0^v, 0*u, 0/u, ...)."""
    if isinstance(node, Const):
        return node.value == 0.0
    if isinstance(node, Unary):
        return node.op in ("neg", "sqrt", "abs", "sign", "sin") and _is_zero(node.child)
    if isinstance(node, Binary):
        if node.op in ("pow", "div"):
            return _is_zero(node.left)
        if node.op == "mul":
            return _is_zero(node.left) or _is_zero(node.right)
        if node.op == "sub" and node.left == node.right:
            return True
        return _is_zero(node.left) and _is_zero(node.right)
    return False


def differentiate(node: Expr, var_index: int, simplified: bool = True) -> Expr:
    """Exact partial derivative with respect to variable ``var_index``."""
    d = _d(node, var_index)
    return simplify(d) if simplified else d


# ---------------------------------------------------------------------------
# simplification

def is_total(node: Expr) -> bool:
    """True when the subtree cannot hit a domain violation anywhere."""
    if isinstance(node, (Const, Var)):
        return True
    if isinstance(node, Unary):
        return node.op in ("neg", "sin", "cos", "abs", "sign") and is_total(node.child)
    return node.op in ("add", "sub", "mul") and is_total(node.left) and is_total(node.right)


def _is(node: Expr, value: float) -> bool:
    return isinstance(node, Const) and node.value == value


def _fold(node: Expr) -> Expr:
    if isinstance(node, Unary) and isinstance(node.child, Const):
        r = evaluate(node, ())
    elif isinstance(node, Binary) and isinstance(node.left, Const) and isinstance(node.right, Const):
        r = evaluate(node, ())
    else:
        return node
    if isinstance(r, DomainViolation):
        return node
    return Const(float(r))


def _never_inf(node: Expr) -> bool:
    """True for trees built from variables, constants, +, -, *, neg, sin and cos,
    which stay finite on finite inputs of moderate size."""
    if isinstance(node, (Const, Var)):
        return True
    if isinstance(node, Unary):
        return node.op in ("neg", "sin", "cos") and _never_inf(node.child)
    return node.op in ("add", "sub", "mul") and _never_inf(node.left) and _never_inf(node.right)


def simplify(node: Expr, preserve_domain: bool = True) -> Expr:
    """Constant folding, identity elimination, double-negation removal.

    With ``preserve_domain`` (default) a subtree that could raise a domain
    violation is never discarded, so ``0*log(x)`` stays as written.
    """
    if isinstance(node, (Const, Var)):
        return node
    if isinstance(node, Unary):
        c = simplify(node.child, preserve_domain)
        if node.op == "neg":
            if isinstance(c, Unary) and c.op == "neg":
                return c.child
            if isinstance(c, Const):
                return Const(-c.value)
            if isinstance(c, Binary) and c.op == "sub":
                return Binary("sub", c.right, c.left)
        return _fold(Unary(node.op, c))
    a = simplify(node.left, preserve_domain)
    b = simplify(node.right, preserve_domain)
    op = node.op
    droppable = (lambda t: (not preserve_domain) or is_total(t))
    folded = _fold(Binary(op, a, b))
    if isinstance(folded, Const):
        return folded
    if op == "add":
        if _is(a, 0.0):
            return b
        if _is(b, 0.0):
            return a
        if isinstance(b, Unary) and b.op == "neg":
            return simplify(Binary("sub", a, b.child), preserve_domain)
        if isinstance(b, Const) and b.value < 0:
            return Binary("sub", a, Const(-b.value))
    elif op == "sub":
        if _is(b, 0.0):
            return a
        if a == b and _never_inf(a):
            return ZERO
        if _is(a, 0.0):
            return simplify(Unary("neg", b), preserve_domain)
        if isinstance(b, Unary) and b.op == "neg":
            return simplify(Binary("add", a, b.child), preserve_domain)
    elif op == "mul":
        if isinstance(b, Const) and not isinstance(a, Const):
            a, b = b, a
        if isinstance(a, Const):
            if a.value == 0.0 and droppable(b):
                return ZERO
            if a.value == 1.0:
                return b
            if a.value == -1.0:
                return simplify(Unary("neg", b), preserve_domain)
            if isinstance(b, Unary) and b.op == "neg":
                return simplify(Binary("mul", Const(-a.value), b.child), preserve_domain)
            if isinstance(b, Binary) and b.op == "mul" and isinstance(b.left, Const):
                return simplify(Binary("mul", Const(a.value * b.left.value), b.right), preserve_domain)
    elif op == "div":
        if _is(b, 1.0):
            return a
        if _is(a, 0.0) and droppable(b):
            return ZERO
        if isinstance(b, Const) and b.value != 0.0 and isinstance(a, Binary) and a.op == "mul" and isinstance(a.left, Const):
            return simplify(Binary("mul", Const(a.left.value / b.value), a.right), preserve_domain)
    elif op == "pow":
        if _is(b, 1.0):
            return a
        if _is(b, 0.0) and droppable(a):
            return ONE
    return Binary(op, a, b)
