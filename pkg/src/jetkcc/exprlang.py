"""Symbolic scalar expressions over jet coordinates t^a, x^i and velocities v^i_a.

Expression trees are immutable and freely shared, so results of the builders in
the geometry modules are DAGs rather than trees.  Every traversal here
(evaluation, differentiation, substitution, simplification, free-variable
collection) walks the DAG iteratively with an identity memo: shared subtrees
are processed once and recursion depth is never an issue.

Variables are 1-based: ``t1..tm`` (temporal), ``x1..xn`` (spatial) and
``v<i>_<a>`` (velocity of x^i in the t^a direction).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

TEMPORAL = "temporal"
SPATIAL = "spatial"
VELOCITY = "velocity"

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "sinh", "cosh")


@dataclass(frozen=True, slots=True)
class VariableId:
    """Identity of a jet variable: kind plus its 1-based indices.

    Temporal variables use ``alpha`` only, spatial use ``i`` only, velocities
    use both.  The unused index is 0.
    """

    kind: str
    i: int = 0
    alpha: int = 0

    @property
    def name(self) -> str:
        if self.kind == TEMPORAL:
            return f"t{self.alpha}"
        if self.kind == SPATIAL:
            return f"x{self.i}"
        return f"v{self.i}_{self.alpha}"

    def in_bounds(self, m: int, n: int) -> bool:
        if self.kind == TEMPORAL:
            return 1 <= self.alpha <= m
        if self.kind == SPATIAL:
            return 1 <= self.i <= n
        return 1 <= self.i <= n and 1 <= self.alpha <= m

    def sort_key(self) -> tuple:
        order = {TEMPORAL: 0, SPATIAL: 1, VELOCITY: 2}
        return (order[self.kind], self.i, self.alpha)


class Expression:
    """Base class; all nodes are immutable and hashable by structure."""

    __slots__ = ()

    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return sub(self, as_expr(other))

    def __rsub__(self, other):
        return sub(as_expr(other), self)

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return div(self, as_expr(other))

    def __rtruediv__(self, other):
        return div(as_expr(other), self)

    def __pow__(self, other):
        return pow_(self, as_expr(other))

    def __neg__(self):
        return neg(self)

    def __str__(self) -> str:
        return to_string(self)

    def __repr__(self) -> str:
        return to_string(self)


@dataclass(frozen=True, slots=True, repr=False)
class Num(Expression):
    """Nonnegative numeric literal (negatives are ``neg`` nodes, so every
    printed expression re-parses to the same tree)."""

    value: float


@dataclass(frozen=True, slots=True, repr=False)
class Const(Expression):
    """Named constant: ``pi`` or ``e``."""

    name: str


@dataclass(frozen=True, slots=True, repr=False)
class Var(Expression):
    vid: VariableId


@dataclass(frozen=True, slots=True, repr=False)
class Unary(Expression):
    op: str  # "neg" or a function name
    arg: Expression


@dataclass(frozen=True, slots=True, repr=False)
class Binary(Expression):
    op: str  # + - * / ^
    left: Expression
    right: Expression


ZERO = Num(0.0)
ONE = Num(1.0)
PI = Const("pi")
E = Const("e")


def t_var(alpha: int) -> Var:
    return Var(VariableId(TEMPORAL, alpha=alpha))


def x_var(i: int) -> Var:
    return Var(VariableId(SPATIAL, i=i))


def v_var(i: int, alpha: int) -> Var:
    return Var(VariableId(VELOCITY, i=i, alpha=alpha))


def num(value: float) -> Expression:
    """Numeric literal; negatives normalize to neg(positive literal)."""
    value = float(value)
    if value < 0.0:
        return Unary("neg", Num(-value))
    return Num(value)


def as_expr(x) -> Expression:
    if isinstance(x, Expression):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return num(float(x))
    raise TypeError(f"cannot coerce {type(x).__name__} to Expression")


def _as_number(e: Expression) -> float | None:
    """The numeric value of a literal node (including a negated literal)."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Unary) and e.op == "neg" and isinstance(e.arg, Num):
        return -e.arg.value
    return None


def _is_value(e: Expression, v: float) -> bool:
    return isinstance(e, Num) and e.value == v


# ---------------------------------------------------------------------------
# smart constructors
#
# These perform the conservative simplifications promised by simplify():
# neutral elements, annihilation by zero, constant folding (only when the
# result is finite and defined), and double-negation removal.  Everything
# built through them comes out pre-simplified.
# ---------------------------------------------------------------------------


def neg(a) -> Expression:
    a = as_expr(a)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    if _is_value(a, 0.0):
        return ZERO
    return Unary("neg", a)


def add(a, b) -> Expression:
    a, b = as_expr(a), as_expr(b)
    av, bv = _as_number(a), _as_number(b)
    if av == 0.0:
        return b
    if bv == 0.0:
        return a
    if av is not None and bv is not None:
        s = av + bv
        if math.isfinite(s):
            return num(s)
    return Binary("+", a, b)


def sub(a, b) -> Expression:
    a, b = as_expr(a), as_expr(b)
    if a is b:
        # same node: difference is 0 wherever the operand is defined
        return ZERO
    av, bv = _as_number(a), _as_number(b)
    if bv == 0.0:
        return a
    if av is not None and bv is not None:
        s = av - bv
        if math.isfinite(s):
            return num(s)
    if av == 0.0:
        return neg(b)
    return Binary("-", a, b)


def mul(a, b) -> Expression:
    a, b = as_expr(a), as_expr(b)
    av, bv = _as_number(a), _as_number(b)
    if av is not None and bv is not None:
        p = av * bv
        if math.isfinite(p):
            return num(p)
    if av == 0.0 or bv == 0.0:
        return ZERO
    if av == 1.0:
        return b
    if bv == 1.0:
        return a
    if av == -1.0:
        return neg(b)
    if bv == -1.0:
        return neg(a)
    # collapse stacked constant factors: c1 * (c2 * x) -> (c1*c2) * x
    if av is not None and isinstance(b, Binary) and b.op == "*":
        for inner, other in ((b.left, b.right), (b.right, b.left)):
            iv = _as_number(inner)
            if iv is not None and math.isfinite(av * iv):
                return mul(num(av * iv), other)
    if bv is not None and isinstance(a, Binary) and a.op == "*":
        for inner, other in ((a.left, a.right), (a.right, a.left)):
            iv = _as_number(inner)
            if iv is not None and math.isfinite(bv * iv):
                return mul(num(bv * iv), other)
    return Binary("*", a, b)


def div(a, b) -> Expression:
    a, b = as_expr(a), as_expr(b)
    av, bv = _as_number(a), _as_number(b)
    if bv == 1.0:
        return a
    if bv == -1.0:
        return neg(a)
    if av == 0.0:
        return ZERO
    if av is not None and bv is not None and bv != 0.0:
        q = av / bv
        if math.isfinite(q):
            return num(q)
    return Binary("/", a, b)


def pow_(a, b) -> Expression:
    a, b = as_expr(a), as_expr(b)
    av, bv = _as_number(a), _as_number(b)
    if bv == 1.0:
        return a
    if bv == 0.0:
        # empty product: x^0 == 1 for every x under the repeated-product
        # reading of integer powers
        return ONE
    if av == 0.0 and bv is not None and bv > 0.0:
        return ZERO
    if av is not None and bv is not None:
        try:
            p = _pow_value(av, bv)
        except EvaluationError:
            p = None
        if p is not None and math.isfinite(p):
            return num(p)
    return Binary("^", a, b)


_UNARY_FOLD = {
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
    "sinh": math.sinh,
    "cosh": math.cosh,
}


def _unary(op: str, a: Expression) -> Expression:
    if op == "neg":
        return neg(a)
    av = _as_number(a)
    if av is not None:
        try:
            v = _UNARY_FOLD[op](av)
        except (ValueError, OverflowError):
            v = None
        if v is not None and math.isfinite(v):
            return num(v)
    return Unary(op, a)


def sin(a) -> Expression:
    return _unary("sin", as_expr(a))


def cos(a) -> Expression:
    return _unary("cos", as_expr(a))


def tan(a) -> Expression:
    return _unary("tan", as_expr(a))


def exp(a) -> Expression:
    return _unary("exp", as_expr(a))


def log(a) -> Expression:
    return _unary("log", as_expr(a))


def sqrt(a) -> Expression:
    return _unary("sqrt", as_expr(a))


def sinh(a) -> Expression:
    return _unary("sinh", as_expr(a))


def cosh(a) -> Expression:
    return _unary("cosh", as_expr(a))


def _binary(op: str, a: Expression, b: Expression) -> Expression:
    if op == "+":
        return add(a, b)
    if op == "-":
        return sub(a, b)
    if op == "*":
        return mul(a, b)
    if op == "/":
        return div(a, b)
    return pow_(a, b)


def expr_sum(terms) -> Expression:
    """Balanced sum of many terms (keeps tree depth logarithmic)."""
    items = [as_expr(t) for t in terms]
    items = [t for t in items if not _is_value(t, 0.0)]
    if not items:
        return ZERO
    while len(items) > 1:
        nxt = []
        for k in range(0, len(items) - 1, 2):
            nxt.append(add(items[k], items[k + 1]))
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def is_zero(e: Expression) -> bool:
    """Structural zero test (use after simplify/smart construction)."""
    return isinstance(e, Num) and e.value == 0.0


# ---------------------------------------------------------------------------
# traversal core
# ---------------------------------------------------------------------------


def _children(node: Expression) -> tuple:
    if isinstance(node, Binary):
        return (node.left, node.right)
    if isinstance(node, Unary):
        return (node.arg,)
    return ()


def _postorder_map(root: Expression, compute):
    """Apply ``compute(node, child_results)`` bottom-up over the DAG.

    Nodes are memoized by identity, so shared subtrees are computed once.
    """
    memo: dict[int, object] = {}
    stack: list[tuple[Expression, bool]] = [(root, False)]
    while stack:
        node, ready = stack.pop()
        key = id(node)
        if key in memo:
            continue
        kids = _children(node)
        if ready or not kids:
            memo[key] = compute(node, tuple(memo[id(k)] for k in kids))
        else:
            stack.append((node, True))
            for k in kids:
                if id(k) not in memo:
                    stack.append((k, False))
    return memo[id(root)]


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------


class ParseError(ValueError):
    """Syntax / identifier / index-range problem, with a character offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.message = message
        self.position = position


class EvaluationError(ValueError):
    """Domain error or unbound variable; carries the offending subexpression."""

    def __init__(self, message: str, expression: Expression | None = None):
        if expression is not None:
            message = f"{message} in `{to_string(expression)}`"
        super().__init__(message)
        self.expression = expression


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Bindings:
    """Values for jet variables; scalar floats or numpy arrays (all of one
    common shape) for vectorized evaluation."""

    m: int
    n: int
    values: dict[VariableId, float | np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_names(cls, m: int, n: int, by_name: dict) -> "Bindings":
        out = {}
        for name, val in by_name.items():
            out[parse_variable_name(name, m, n)] = val
        return cls(m, n, out)

    def with_value(self, vid: VariableId, value) -> "Bindings":
        vals = dict(self.values)
        vals[vid] = value
        return Bindings(self.m, self.n, vals)


_VAR_NAME_RE = re.compile(r"^(?:t([0-9]+)|x([0-9]+)|v([0-9]+)_([0-9]+))$")


def parse_variable_name(name: str, m: int, n: int) -> VariableId:
    mt = _VAR_NAME_RE.match(name)
    if not mt:
        raise ParseError(f"unknown identifier '{name}'", 0)
    vid = _classify(name, m, n, 0)
    return vid


def _classify(word: str, m: int, n: int, position: int) -> VariableId:
    mt = _VAR_NAME_RE.match(word)
    if not mt:
        raise ParseError(f"unknown identifier '{word}'", position)
    if mt.group(1) is not None:
        a = int(mt.group(1))
        if not 1 <= a <= m:
            raise ParseError(
                f"temporal index {a} out of range 1..{m} in '{word}'", position
            )
        return VariableId(TEMPORAL, alpha=a)
    if mt.group(2) is not None:
        i = int(mt.group(2))
        if not 1 <= i <= n:
            raise ParseError(
                f"spatial index {i} out of range 1..{n} in '{word}'", position
            )
        return VariableId(SPATIAL, i=i)
    i, a = int(mt.group(3)), int(mt.group(4))
    if not 1 <= i <= n:
        raise ParseError(
            f"spatial index {i} out of range 1..{n} in '{word}'", position
        )
    if not 1 <= a <= m:
        raise ParseError(
            f"temporal index {a} out of range 1..{m} in '{word}'", position
        )
    return VariableId(VELOCITY, i=i, alpha=a)


def _pow_value(base: float, ex: float) -> float:
    """Scalar power with the DSL's domain rules."""
    if float(ex).is_integer():
        k = int(ex)
        if base == 0.0 and k < 0:
            raise EvaluationError("zero raised to a negative power")
        try:
            return float(base) ** k
        except OverflowError as exc:
            raise EvaluationError("overflow in power") from exc
    if base <= 0.0:
        raise EvaluationError("non-integer power of a non-positive base")
    return math.pow(base, ex)


_UNARY_SCALAR = {
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "exp": math.exp,
    "sinh": math.sinh,
    "cosh": math.cosh,
}

_UNARY_ARRAY = {
    "neg": np.negative,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "sinh": np.sinh,
    "cosh": np.cosh,
}


def evaluate(e: Expression, bindings: Bindings):
    """Evaluate over the bindings.

    With scalar bindings the result is a float and domain errors
    (log/sqrt/division/power) raise EvaluationError identifying the offending
    subexpression.  With array bindings the evaluation is vectorized through
    numpy and out-of-domain points come back as nan/inf instead.
    """
    array_mode = any(isinstance(v, np.ndarray) for v in bindings.values.values())
    if array_mode:
        return _evaluate_array(e, bindings)
    return _evaluate_scalar(e, bindings)


def evaluate_nested(nested, bindings: Bindings, batch_size: int | None = None):
    """Evaluate a nested tuple/list of expressions into a float ndarray.

    The array shape mirrors the nesting.  When ``batch_size`` is given the
    bindings are assumed to hold arrays of that length and every leaf that
    evaluates to a plain scalar (a constant expression, say) is broadcast to
    shape ``(batch_size,)`` so the result is always rectangular with the batch
    as the trailing axis.
    """

    def go(node):
        if isinstance(node, (tuple, list)):
            return [go(k) for k in node]
        val = evaluate(node, bindings)
        if batch_size is not None and not isinstance(val, np.ndarray):
            return np.full(batch_size, float(val))
        return val

    return np.asarray(go(nested), dtype=float)


def _evaluate_scalar(e: Expression, bindings: Bindings) -> float:
    values = bindings.values

    def compute(node, kids):
        if isinstance(node, Num):
            return node.value
        if isinstance(node, Const):
            return math.pi if node.name == "pi" else math.e
        if isinstance(node, Var):
            try:
                return float(values[node.vid])
            except KeyError:
                raise EvaluationError(
                    f"unbound variable '{node.vid.name}'", node
                ) from None
        if isinstance(node, Unary):
            (a,) = kids
            op = node.op
            if op == "neg":
                return -a
            if op == "log":
                if a <= 0.0:
                    raise EvaluationError(f"log of non-positive value {a}", node)
                return math.log(a)
            if op == "sqrt":
                if a < 0.0:
                    raise EvaluationError(f"sqrt of negative value {a}", node)
                return math.sqrt(a)
            try:
                return _UNARY_SCALAR[op](a)
            except (ValueError, OverflowError) as exc:
                raise EvaluationError(f"domain error in {op}", node) from exc
        l, r = kids
        op = node.op
        if op == "+":
            return l + r
        if op == "-":
            return l - r
        if op == "*":
            return l * r
        if op == "/":
            if r == 0.0:
                raise EvaluationError("division by zero", node)
            return l / r
        try:
            return _pow_value(l, r)
        except EvaluationError as exc:
            raise EvaluationError(str(exc), node) from None

    return _postorder_map(e, compute)


def _evaluate_array(e: Expression, bindings: Bindings):
    values = bindings.values

    def compute(node, kids):
        if isinstance(node, Num):
            return node.value
        if isinstance(node, Const):
            return math.pi if node.name == "pi" else math.e
        if isinstance(node, Var):
            try:
                return values[node.vid]
            except KeyError:
                raise EvaluationError(
                    f"unbound variable '{node.vid.name}'", node
                ) from None
        if isinstance(node, Unary):
            return _UNARY_ARRAY[node.op](kids[0])
        l, r = kids
        op = node.op
        if op == "+":
            return l + r
        if op == "-":
            return l - r
        if op == "*":
            return l * r
        if op == "/":
            return l / r
        if np.isscalar(r) and float(r).is_integer():
            return np.power(l, int(r))
        return np.power(l, r)

    with np.errstate(all="ignore"):
        return _postorder_map(e, compute)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def differentiate(e: Expression, var) -> Expression:
    """Partial derivative with respect to one jet variable.

    All jet variables are independent coordinates here: d v1_1/d x1 == 0.
    Results come out pre-simplified (built through the smart constructors).
    """
    vid = var.vid if isinstance(var, Var) else var
    if not isinstance(vid, VariableId):
        raise TypeError("var must be a Var node or a VariableId")

    def compute(node, kids):
        if isinstance(node, (Num, Const)):
            return ZERO
        if isinstance(node, Var):
            return ONE if node.vid == vid else ZERO
        if isinstance(node, Unary):
            (da,) = kids
            a = node.arg
            op = node.op
            if op == "neg":
                return neg(da)
            if is_zero(da):
                return ZERO
            if op == "sin":
                return mul(cos(a), da)
            if op == "cos":
                return neg(mul(sin(a), da))
            if op == "tan":
                return mul(add(ONE, pow_(tan(a), 2.0)), da)
            if op == "exp":
                return mul(node, da)
            if op == "log":
                return div(da, a)
            if op == "sqrt":
                return div(da, mul(2.0, node))
            if op == "sinh":
                return mul(cosh(a), da)
            return mul(sinh(a), da)  # cosh
        dl, dr = kids
        l, r = node.left, node.right
        op = node.op
        if op == "+":
            return add(dl, dr)
        if op == "-":
            return sub(dl, dr)
        if op == "*":
            return add(mul(dl, r), mul(l, dr))
        if op == "/":
            return div(sub(mul(dl, r), mul(l, dr)), pow_(r, 2.0))
        # power
        rv = _as_number(r)
        if rv is not None:
            if is_zero(dl):
                return ZERO
            return mul(mul(num(rv), pow_(l, num(rv - 1.0))), dl)
        # general u^w: u^w * (dw*log(u) + w*du/u)
        return mul(node, add(mul(dr, log(l)), mul(r, div(dl, l))))

    return _postorder_map(e, compute)


def fd_partial(e: Expression, var, bindings: Bindings, step: float = 1e-6) -> float:
    """Central finite-difference partial; the numeric oracle for differentiate."""
    vid = var.vid if isinstance(var, Var) else var
    base = float(bindings.values[vid])
    hi = _evaluate_scalar(e, bindings.with_value(vid, base + step))
    lo = _evaluate_scalar(e, bindings.with_value(vid, base - step))
    return (hi - lo) / (2.0 * step)


# ---------------------------------------------------------------------------
# substitution / simplification / inspection
# ---------------------------------------------------------------------------


def substitute(e: Expression, mapping: dict) -> Expression:
    """Replace variables by expressions (simultaneous, one pass).

    Keys may be Var nodes or VariableIds; values anything coercible to an
    Expression.  The rebuild goes through the smart constructors, so the
    composed result is pre-simplified.
    """
    table: dict[VariableId, Expression] = {}
    for key, val in mapping.items():
        kid = key.vid if isinstance(key, Var) else key
        table[kid] = as_expr(val)

    def compute(node, kids):
        if isinstance(node, Var):
            return table.get(node.vid, node)
        if isinstance(node, Unary):
            if kids[0] is node.arg:
                return node
            return _unary(node.op, kids[0])
        if isinstance(node, Binary):
            if kids[0] is node.left and kids[1] is node.right:
                return node
            return _binary(node.op, kids[0], kids[1])
        return node

    return _postorder_map(e, compute)


def simplify(e: Expression) -> Expression:
    """Conservative cleanup: rebuilds the DAG through the smart constructors.

    Guarantees: 0/1 neutral elements dropped, multiplication by zero folded,
    literal subtrees folded when finite and defined, double negation removed.
    The result evaluates identically to the input on any bindings where the
    input is defined.
    """

    def compute(node, kids):
        # always rebuild through the smart constructors: the node may predate
        # them (e.g. it came straight from parse)
        if isinstance(node, Unary):
            return _unary(node.op, kids[0])
        if isinstance(node, Binary):
            return _binary(node.op, kids[0], kids[1])
        return node

    return _postorder_map(e, compute)


def free_variables(e: Expression) -> frozenset[VariableId]:
    def compute(node, kids):
        if isinstance(node, Var):
            return frozenset((node.vid,))
        if not kids:
            return frozenset()
        out = kids[0]
        for k in kids[1:]:
            out = out | k
        return out

    return _postorder_map(e, compute)


def check_bounds(e: Expression, m: int, n: int) -> None:
    """Raise ParseError if any variable index exceeds the (m, n) bounds."""
    for vid in free_variables(e):
        if not vid.in_bounds(m, n):
            raise ParseError(
                f"variable '{vid.name}' out of range for m={m}, n={n}", 0
            )


# ---------------------------------------------------------------------------
# printing
# ---------------------------------------------------------------------------

_PREC_ADD = 1
_PREC_MUL = 2
_PREC_NEG = 3
_PREC_POW = 4
_PREC_ATOM = 5


def _num_str(v: float) -> str:
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def to_string(e: Expression) -> str:
    """Render with minimal parentheses; parse(to_string(e)) rebuilds e."""

    def compute(node, kids):
        # each result is (text, precedence)
        if isinstance(node, Num):
            return (_num_str(node.value), _PREC_ATOM)
        if isinstance(node, Const):
            return (node.name, _PREC_ATOM)
        if isinstance(node, Var):
            return (node.vid.name, _PREC_ATOM)
        if isinstance(node, Unary):
            (a,) = kids
            if node.op == "neg":
                text = a[0] if a[1] >= _PREC_NEG else f"({a[0]})"
                return (f"-{text}", _PREC_NEG)
            return (f"{node.op}({a[0]})", _PREC_ATOM)
        l, r = kids
        op = node.op
        if op in "+-":
            lt = l[0] if l[1] >= _PREC_ADD else f"({l[0]})"
            rt = r[0] if r[1] > _PREC_ADD else f"({r[0]})"
            return (f"{lt} {op} {rt}", _PREC_ADD)
        if op in "*/":
            lt = l[0] if l[1] >= _PREC_MUL else f"({l[0]})"
            rt = r[0] if r[1] > _PREC_MUL else f"({r[0]})"
            return (f"{lt}{op}{rt}", _PREC_MUL)
        # ^ is right-associative and binds tighter than unary minus
        lt = l[0] if l[1] > _PREC_POW else f"({l[0]})"
        rt = r[0] if r[1] >= _PREC_NEG else f"({r[0]})"
        return (f"{lt}^{rt}", _PREC_POW)

    return _postorder_map(e, compute)[0]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<num>(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^()])
    """,
    re.VERBOSE,
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    size = len(text)
    while pos < size:
        ch = text[pos]
        if ch.isspace():
            pos += 1
            continue
        mt = _TOKEN_RE.match(text, pos)
        if not mt:
            raise ParseError(f"unexpected character {ch!r}", pos)
        kind = mt.lastgroup
        tokens.append((kind, mt.group(), pos))
        pos = mt.end()
    tokens.append(("end", "", size))
    return tokens


class _Parser:
    """Recursive descent over the token list.

    Grammar (loosest to tightest): sums, products, unary minus, powers
    (right-associative), atoms.  No implicit multiplication.
    """

    def __init__(self, text: str, m: int, n: int):
        self.tokens = _tokenize(text)
        self.k = 0
        self.m = m
        self.n = n

    def peek(self):
        return self.tokens[self.k]

    def take(self):
        tok = self.tokens[self.k]
        self.k += 1
        return tok

    def expect_op(self, symbol: str):
        kind, text, pos = self.peek()
        if kind != "op" or text != symbol:
            shown = text if text else "end of input"
            raise ParseError(f"expected '{symbol}', found '{shown}'", pos)
        return self.take()

    def parse(self) -> Expression:
        e = self.sum_()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected trailing input '{text}'", pos)
        return e

    def sum_(self) -> Expression:
        e = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.take()
                rhs = self.term()
                e = Binary(text, e, rhs)
            else:
                return e

    def term(self) -> Expression:
        e = self.factor()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.take()
                rhs = self.factor()
                e = Binary(text, e, rhs)
            else:
                return e

    def factor(self) -> Expression:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return Unary("neg", self.factor())
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.take()
            return Binary("^", base, self.factor())
        return base

    def atom(self) -> Expression:
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "op" and text == "(":
            e = self.sum_()
            self.expect_op(")")
            return e
        if kind == "ident":
            if text in FUNCTIONS:
                self.expect_op("(")
                arg = self.sum_()
                self.expect_op(")")
                return Unary(text, arg)
            if text == "pi":
                return PI
            if text == "e":
                return E
            return Var(_classify(text, self.m, self.n, pos))
        shown = text if text else "end of input"
        raise ParseError(f"expected an expression, found '{shown}'", pos)


def parse(text: str, m: int, n: int) -> Expression:
    """Parse source text into an expression tree (unsimplified, as written).

    m and n bound the admissible temporal/spatial indices; violations raise
    ParseError with the offending position.
    """
    if not 1 <= m <= 4 or not 1 <= n <= 4:
        raise ValueError("dimensions must satisfy 1 <= m, n <= 4")
    return _Parser(text, m, n).parse()
