"""Closed-form expression trees for coefficients, nonlinearities and maps.

Expressions are parsed from text with a small recursive-descent parser,
differentiated symbolically, simplified, printed back to parseable text and
evaluated either pointwise (floats) or vectorised over numpy arrays.

Grammar (one token of lookahead):

    expr     := term (('+' | '-') term)*
    term     := factor (('*' | '/') factor)*
    factor   := '-' factor | base ('^' exponent)?
    base     := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'
    exponent := '-'? NUMBER

Unary minus binds looser than '^', so -t^2 parses as -(t^2).  Exponents are
numeric literals only, which keeps differentiation closed over the node set
(the power rule never needs logarithms).

Identifiers: variables t, u, y1..y3, x1..x3; constants pi, e; functions
sin, cos, exp, tanh, sqrt, abs, log and sign.  sign is included so that
derivatives of abs stay inside the language (d abs(w) = sign(w) dw, with
sign(0) = 0); its own derivative is taken as 0.

Domain guards (division by zero, sqrt/log out of range, 0 raised to a
negative power, overflow) raise EvalError rather than returning NaN or Inf,
both in pointwise and in vectorised evaluation.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Expr", "Const", "Var", "Unary", "Binary",
    "ExprError", "ParseError", "EvalError",
    "parse", "evaluate", "diff", "simplify", "substitute",
    "free_vars", "to_string", "compiled",
]

VARIABLES = ("t", "u", "y1", "y2", "y3", "x1", "x2", "x3")
CONSTANTS = {"pi": math.pi, "e": math.e}
FUNCTIONS = ("sin", "cos", "exp", "tanh", "sqrt", "abs", "log", "sign")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")


class ExprError(Exception):
    pass


class ParseError(ExprError):
    """Syntax error with the byte offset and the tokens that were legal."""

    def __init__(self, message, offset, expected=()):
        super().__init__(f"{message} at offset {offset}"
                         + (f" (expected {', '.join(expected)})" if expected else ""))
        self.offset = offset
        self.expected = tuple(expected)


class EvalError(ExprError):
    pass


class Expr:
    """Base node.  Subclasses: Const, Var, Unary, Binary."""

    __slots__ = ()

    def __str__(self):
        return to_string(self)

    def __repr__(self):
        return f"{type(self).__name__}({to_string(self)!r})"


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value):
        self.value = float(value)


class Var(Expr):
    __slots__ = ("name",)

    def __init__(self, name):
        if name not in VARIABLES:
            raise ExprError(f"unknown variable {name!r}")
        self.name = name


class Unary(Expr):
    __slots__ = ("op", "arg")

    def __init__(self, op, arg):
        if op != "neg" and op not in FUNCTIONS:
            raise ExprError(f"unknown unary op {op!r}")
        self.op = op
        self.arg = arg


class Binary(Expr):
    __slots__ = ("op", "left", "right")

    def __init__(self, op, left, right):
        if op not in BINARY_OPS:
            raise ExprError(f"unknown binary op {op!r}")
        if op == "pow" and not isinstance(right, Const):
            raise ExprError("exponent must be a numeric constant")
        self.op = op
        self.left = left
        self.right = right


# ---------------------------------------------------------------------------
# parsing

class _Tokenizer:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.tok = None      # (kind, value, offset)
        self.advance()

    def advance(self):
        text, n = self.text, len(self.text)
        i = self.pos
        while i < n and text[i] in " \t\r\n":
            i += 1
        if i >= n:
            self.tok = ("end", "", i)
            self.pos = i
            return
        c = text[i]
        if c in "+-*/^()":
            self.tok = (c, c, i)
            self.pos = i + 1
            return
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            if j < n and text[j] == ".":
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            self.tok = ("number", text[i:j], i)
            self.pos = j
            return
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            self.tok = ("ident", text[i:j], i)
            self.pos = j
            return
        raise ParseError(f"unexpected character {c!r}", i)


class _Parser:
    def __init__(self, text):
        self.toks = _Tokenizer(text)

    def peek(self):
        return self.toks.tok

    def take(self, kind):
        tok = self.toks.tok
        if tok[0] != kind:
            raise ParseError(f"unexpected token {tok[1]!r}" if tok[0] != "end"
                             else "unexpected end of input", tok[2], (kind,))
        self.toks.advance()
        return tok

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ParseError(f"trailing input {tok[1]!r}", tok[2], ("end",))
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] in ("+", "-"):
            op = self.take(self.peek()[0])[0]
            rhs = self.term()
            node = Binary("add" if op == "+" else "sub", node, rhs)
        return node

    def term(self):
        node = self.factor()
        while self.peek()[0] in ("*", "/"):
            op = self.take(self.peek()[0])[0]
            rhs = self.factor()
            node = Binary("mul" if op == "*" else "div", node, rhs)
        return node

    def factor(self):
        if self.peek()[0] == "-":
            self.take("-")
            return Unary("neg", self.factor())
        node = self.base()
        if self.peek()[0] == "^":
            self.take("^")
            node = Binary("pow", node, Const(self.exponent()))
        return node

    def exponent(self):
        sign = 1.0
        if self.peek()[0] == "-":
            self.take("-")
            sign = -1.0
        tok = self.take("number")
        return sign * float(tok[1])

    def base(self):
        tok = self.peek()
        if tok[0] == "number":
            self.take("number")
            return Const(float(tok[1]))
        if tok[0] == "(":
            self.take("(")
            node = self.expr()
            self.take(")")
            return node
        if tok[0] == "ident":
            self.take("ident")
            name = tok[1]
            if self.peek()[0] == "(":
                if name not in FUNCTIONS:
                    raise ParseError(f"unknown function {name!r}", tok[2], FUNCTIONS)
                self.take("(")
                arg = self.expr()
                self.take(")")
                return Unary(name, arg)
            if name in CONSTANTS:
                return Const(CONSTANTS[name])
            if name in VARIABLES:
                return Var(name)
            raise ParseError(f"unknown identifier {name!r}", tok[2],
                             VARIABLES + tuple(CONSTANTS))
        kind = "end of input" if tok[0] == "end" else repr(tok[1])
        raise ParseError(f"expected an operand, found {kind}", tok[2],
                         ("number", "identifier", "(", "-"))


def parse(text: str) -> Expr:
    """Parse source text into an Expr.  Raises ParseError with .offset."""
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# evaluation

def _check_pow(base, expo):
    if not float(expo).is_integer():
        if base < 0:
            raise EvalError(f"negative base {base!r} under fractional exponent {expo!r}")
        if base == 0 and expo < 0:
            raise EvalError("zero base under negative exponent")
    elif expo < 0 and base == 0:
        raise EvalError("zero base under negative exponent")


_UNARY_FNS = {
    "neg": lambda x: -x,
    "sin": math.sin, "cos": math.cos, "exp": math.exp, "tanh": math.tanh,
    "abs": abs,
}


def evaluate(e: Expr, bindings: dict) -> float:
    """Pointwise evaluation with scalar bindings, e.g. evaluate(e, {"t": 0.0})."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            v = float(bindings[e.name])
        except KeyError:
            raise EvalError(f"unbound variable {e.name!r}") from None
        if not math.isfinite(v):
            raise EvalError(f"non-finite binding for {e.name!r}")
        return v
    if isinstance(e, Unary):
        x = evaluate(e.arg, bindings)
        if e.op == "sqrt":
            if x < 0:
                raise EvalError(f"sqrt of negative value {x!r}")
            return math.sqrt(x)
        if e.op == "log":
            if x <= 0:
                raise EvalError(f"log of non-positive value {x!r}")
            return math.log(x)
        if e.op == "sign":
            return 0.0 if x == 0 else math.copysign(1.0, x)
        try:
            return _UNARY_FNS[e.op](x)
        except OverflowError:
            raise EvalError(f"overflow in {e.op}({x!r})") from None
    a = evaluate(e.left, bindings)
    if e.op == "pow":
        expo = e.right.value
        _check_pow(a, expo)
        try:
            r = a ** expo
        except OverflowError:
            raise EvalError(f"overflow in {a!r}^{expo!r}") from None
        if isinstance(r, complex) or not math.isfinite(r):
            raise EvalError(f"non-finite result in {a!r}^{expo!r}")
        return r
    b = evaluate(e.right, bindings)
    if e.op == "add":
        r = a + b
    elif e.op == "sub":
        r = a - b
    elif e.op == "mul":
        r = a * b
    else:
        if b == 0:
            raise EvalError("division by zero")
        r = a / b
    if not math.isfinite(r):
        raise EvalError(f"non-finite result in {e.op}")
    return r


def compiled(e: Expr, names=None):
    """Vectorised evaluator: returns fn(env) computing e over numpy arrays.

    env maps variable names to arrays or scalars; arrays must broadcast
    against each other.  The same domain guards as evaluate() apply, checked
    over every element.  `names` restricts which variables may appear.
    """
    allowed = set(VARIABLES if names is None else names)
    for name in free_vars(e):
        if name not in allowed:
            raise EvalError(f"variable {e!s} uses {name!r}, not in {sorted(allowed)}")

    def rec(node):
        if isinstance(node, Const):
            c = node.value
            return lambda env: c
        if isinstance(node, Var):
            name = node.name
            def leaf(env, name=name):
                try:
                    return env[name]
                except KeyError:
                    raise EvalError(f"unbound variable {name!r}") from None
            return leaf
        if isinstance(node, Unary):
            argf = rec(node.arg)
            op = node.op
            def un(env, argf=argf, op=op):
                x = np.asarray(argf(env), dtype=float)
                if op == "neg":
                    return -x
                if op == "sqrt":
                    if np.any(x < 0):
                        raise EvalError("sqrt of negative value")
                    return np.sqrt(x)
                if op == "log":
                    if np.any(x <= 0):
                        raise EvalError("log of non-positive value")
                    return np.log(x)
                if op == "sign":
                    return np.sign(x)
                with np.errstate(over="raise"):
                    try:
                        return getattr(np, op if op != "abs" else "abs")(x)
                    except FloatingPointError:
                        raise EvalError(f"overflow in {op}") from None
            return un
        lf = rec(node.left)
        op = node.op
        if op == "pow":
            expo = node.right.value
            def pw(env, lf=lf, expo=expo):
                x = np.asarray(lf(env), dtype=float)
                if not float(expo).is_integer():
                    if np.any(x < 0):
                        raise EvalError("negative base under fractional exponent")
                    if expo < 0 and np.any(x == 0):
                        raise EvalError("zero base under negative exponent")
                elif expo < 0 and np.any(x == 0):
                    raise EvalError("zero base under negative exponent")
                with np.errstate(over="ignore"):
                    r = x ** expo
                if not np.all(np.isfinite(r)):
                    raise EvalError("non-finite result in pow")
                return r
            return pw
        rf = rec(node.right)
        def bi(env, lf=lf, rf=rf, op=op):
            a = np.asarray(lf(env), dtype=float)
            b = np.asarray(rf(env), dtype=float)
            with np.errstate(over="ignore"):
                if op == "add":
                    r = a + b
                elif op == "sub":
                    r = a - b
                elif op == "mul":
                    r = a * b
                else:
                    if np.any(b == 0):
                        raise EvalError("division by zero")
                    r = a / b
            if not np.all(np.isfinite(r)):
                raise EvalError(f"non-finite result in {op}")
            return r
        return bi

    body = rec(e)

    def fn(env):
        return np.asarray(body(env), dtype=float)
    return fn


# ---------------------------------------------------------------------------
# structure

def free_vars(e: Expr) -> frozenset:
    if isinstance(e, Const):
        return frozenset()
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Unary):
        return free_vars(e.arg)
    return free_vars(e.left) | free_vars(e.right)


def substitute(e: Expr, mapping: dict) -> Expr:
    """Simultaneous substitution of variables by expressions."""
    if isinstance(e, Const):
        return e
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, Unary):
        return Unary(e.op, substitute(e.arg, mapping))
    return Binary(e.op, substitute(e.left, mapping), substitute(e.right, mapping))


# smart constructors fold the identities that otherwise make derivative
# trees blow up; they never change values

def _is_const(e, v=None):
    return isinstance(e, Const) and (v is None or e.value == v)


def _add(a, b):
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    return Binary("add", a, b)


def _sub(a, b):
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(a, 0.0):
        return _neg(b)
    return Binary("sub", a, b)


def _mul(a, b):
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    return Binary("mul", a, b)


def _div(a, b):
    if _is_const(b, 1.0):
        return a
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a) and _is_const(b) and b.value != 0:
        return Const(a.value / b.value)
    return Binary("div", a, b)


def _neg(a):
    if _is_const(a):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def _pow(a, c):
    if c.value == 0:
        return Const(1.0)
    if c.value == 1:
        return a
    if _is_const(a):
        try:
            _check_pow(a.value, c.value)
            return Const(a.value ** c.value)
        except (EvalError, OverflowError):
            pass
    return Binary("pow", a, c)


def diff(e: Expr, var: str) -> Expr:
    """Symbolic total derivative with respect to one variable."""
    if isinstance(e, Const):
        return Const(0.0)
    if isinstance(e, Var):
        return Const(1.0 if e.name == var else 0.0)
    if isinstance(e, Unary):
        du = diff(e.arg, var)
        u = e.arg
        if e.op == "neg":
            return _neg(du)
        if e.op == "sin":
            return _mul(Unary("cos", u), du)
        if e.op == "cos":
            return _neg(_mul(Unary("sin", u), du))
        if e.op == "exp":
            return _mul(Unary("exp", u), du)
        if e.op == "tanh":
            return _mul(_sub(Const(1.0), _pow(Unary("tanh", u), Const(2.0))), du)
        if e.op == "sqrt":
            return _div(du, _mul(Const(2.0), Unary("sqrt", u)))
        if e.op == "abs":
            return _mul(Unary("sign", u), du)
        if e.op == "log":
            return _div(du, u)
        if e.op == "sign":
            return Const(0.0)   # a.e. constant
        raise ExprError(f"no derivative rule for {e.op}")
    da = diff(e.left, var)
    if e.op == "pow":
        c = e.right.value
        return _mul(_mul(Const(c), _pow(e.left, Const(c - 1.0))), da)
    db = diff(e.right, var)
    if e.op == "add":
        return _add(da, db)
    if e.op == "sub":
        return _sub(da, db)
    if e.op == "mul":
        return _add(_mul(da, e.right), _mul(e.left, db))
    # quotient rule
    num = _sub(_mul(da, e.right), _mul(e.left, db))
    return _div(num, _pow(e.right, Const(2.0)))


def simplify(e: Expr) -> Expr:
    """Bottom-up constant folding and identity elimination, value preserving."""
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Unary):
        a = simplify(e.arg)
        if e.op == "neg":
            return _neg(a)
        if isinstance(a, Const):
            try:
                return Const(evaluate(Unary(e.op, a), {}))
            except EvalError:
                pass
        return Unary(e.op, a)
    a = simplify(e.left)
    if e.op == "pow":
        return _pow(a, e.right)
    b = simplify(e.right)
    return {"add": _add, "sub": _sub, "mul": _mul, "div": _div}[e.op](a, b)


# ---------------------------------------------------------------------------
# printing

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "neg": 2, "pow": 3}
_ATOM = 9


def _prec(e):
    if isinstance(e, (Const, Var)):
        return _ATOM
    if isinstance(e, Unary):
        return _PREC["neg"] if e.op == "neg" else _ATOM
    return _PREC[e.op]


def _wrap(e, minimum):
    s = to_string(e)
    return f"({s})" if _prec(e) < minimum else s


def to_string(e: Expr) -> str:
    """Render to text that parse() maps back to an equivalent tree."""
    if isinstance(e, Const):
        if e.value < 0:
            return f"-{-e.value!r}"
        return repr(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"-{_wrap(e.arg, _PREC['neg'] + 1)}"
        return f"{e.op}({to_string(e.arg)})"
    if e.op == "pow":
        expo = e.right.value
        estr = repr(expo) if expo >= 0 else f"-{-expo!r}"
        base = _wrap(e.left, _ATOM)
        if base.startswith("-"):    # (-2)^2 must not reparse as -(2^2)
            base = f"({base})"
        return f"{base}^{estr}"
    sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[e.op]
    p = _PREC[e.op]
    left = _wrap(e.left, p)
    right = _wrap(e.right, p + 1)   # -, / are left associative
    return f"{left} {sym} {right}"
