"""Reverse-mode differentiation over a recorded scalar expression graph.

Every node is a scalar function of its operands. A node's value may be a
float or a 1-D array; an array is treated as a bundle of independent lanes
(one per sample) sharing the same graph, which is how batch losses are taped
without recording one graph per sample. Reductions (``sum``, ``mean``) fold
lanes into a true scalar.

Typical use::

    tape = record(lambda x, w: (w * x - 1.0) ** 2, x=3.0, w=0.5)
    grads = backward(tape)          # {'x': ..., 'w': ...}
"""

import math

import numpy as np

__all__ = [
    "PRIMITIVES",
    "Tape",
    "Var",
    "UnsupportedPrimitiveError",
    "ContractError",
    "StaleTapeError",
    "record",
    "backward",
    "exp",
    "log",
    "tanh",
    "sin",
    "cos",
    "relu",
    "logistic",
    "minimum",
    "maximum",
    "clamp",
    "step",
    "power",
    "asum",
    "amean",
]

PRIMITIVES = frozenset(
    {
        "add", "sub", "mul", "div", "neg", "pow",
        "exp", "log", "tanh", "sin", "cos", "relu",
        "min", "max", "clamp", "logistic", "step",
        "sum", "mean",
    }
)


class UnsupportedPrimitiveError(ValueError):
    """Raised when a graph uses an operation the tape cannot record."""


class ContractError(RuntimeError):
    """Raised when a tape is used outside its contract (e.g. non-scalar root)."""


class StaleTapeError(RuntimeError):
    """Raised when parameters changed between recording and differentiation."""


def _sigmoid(a):
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out if out.ndim else float(out)


def _fsum(a):
    # exactly rounded, so reductions do not depend on lane order
    return math.fsum(np.ravel(a)) if np.ndim(a) else float(a)


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.values[self.index]

    def __repr__(self):
        return f"Var(#{self.index}, {self.tape.kinds[self.index]})"

    def __add__(self, o):
        return self.tape.apply("add", self, o)

    def __radd__(self, o):
        return self.tape.apply("add", o, self)

    def __sub__(self, o):
        return self.tape.apply("sub", self, o)

    def __rsub__(self, o):
        return self.tape.apply("sub", o, self)

    def __mul__(self, o):
        return self.tape.apply("mul", self, o)

    def __rmul__(self, o):
        return self.tape.apply("mul", o, self)

    def __truediv__(self, o):
        return self.tape.apply("div", self, o)

    def __rtruediv__(self, o):
        return self.tape.apply("div", o, self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __pow__(self, p):
        return self.tape.apply("pow", self, p)

    def __rpow__(self, b):
        return self.tape.apply("pow", b, self)


class Tape:
    """Topologically ordered record of primitive applications.

    Nodes are appended in evaluation order, so operands always precede the
    node that consumes them. A tape is single-use: record, then differentiate.
    """

    def __init__(self):
        self.kinds = []
        self.operands = []
        self.partials = []
        self.values = []
        self.leaves = {}
        self.root = None
        self._guard = None

    def __len__(self):
        return len(self.values)

    @property
    def value(self):
        if self.root is None:
            raise ContractError("tape has no root")
        return self.values[self.root]

    def _push(self, kind, operands, partials, value):
        self.kinds.append(kind)
        self.operands.append(operands)
        self.partials.append(partials)
        self.values.append(value)
        return Var(self, len(self.values) - 1)

    def leaf(self, value, name=None):
        """Add an input node. Named leaves are reported by :func:`backward`."""
        if isinstance(value, np.ndarray):
            value = np.asarray(value, dtype=float)
        else:
            value = float(value)
        var = self._push("leaf", (), (), value)
        if name is not None:
            if name in self.leaves:
                raise ContractError(f"duplicate leaf name {name!r}")
            self.leaves[name] = var.index
        return var

    def const(self, value):
        return self._push("const", (), (), value)

    def _lift(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise ContractError("operand recorded on a different tape")
            return x
        return self.const(x)

    def guard(self, token):
        """Attach a token that must still match when :func:`backward` runs."""
        self._guard = token

    def apply(self, prim, *args, **kw):
        """Record ``prim`` applied to ``args`` and return the new node."""
        if prim not in PRIMITIVES:
            raise UnsupportedPrimitiveError(f"unsupported primitive: {prim!r}")
        return getattr(self, "_op_" + prim)(*args, **kw)

    # binary arithmetic -------------------------------------------------
    def _op_add(self, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._push("add", (a.index, b.index), (1.0, 1.0), a.value + b.value)

    def _op_sub(self, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._push("sub", (a.index, b.index), (1.0, -1.0), a.value - b.value)

    def _op_mul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._push("mul", (a.index, b.index), (b.value, a.value), a.value * b.value)

    def _op_div(self, a, b):
        a, b = self._lift(a), self._lift(b)
        q = a.value / b.value
        return self._push("div", (a.index, b.index), (1.0 / b.value, -q / b.value), q)

    def _op_neg(self, a):
        a = self._lift(a)
        return self._push("neg", (a.index,), (-1.0,), -a.value)

    def _op_pow(self, a, p):
        a = self._lift(a)
        if not isinstance(p, Var):
            p = float(p)
            out = a.value**p
            if p == 2.0:
                d = 2.0 * a.value
            elif p == 0.0:
                d = 0.0 * a.value
            else:
                d = p * a.value ** (p - 1.0)
            return self._push("pow", (a.index,), (d,), out)
        p = self._lift(p)
        out = a.value**p.value
        da = p.value * a.value ** (p.value - 1.0)
        dp = out * np.log(a.value)
        return self._push("pow", (a.index, p.index), (da, dp), out)

    # unary ---------------------------------------------------------------
    def _op_exp(self, a):
        a = self._lift(a)
        e = np.exp(a.value)
        return self._push("exp", (a.index,), (e,), e)

    def _op_log(self, a):
        a = self._lift(a)
        return self._push("log", (a.index,), (1.0 / a.value,), np.log(a.value))

    def _op_tanh(self, a):
        a = self._lift(a)
        t = np.tanh(a.value)
        return self._push("tanh", (a.index,), (1.0 - t * t,), t)

    def _op_sin(self, a):
        a = self._lift(a)
        return self._push("sin", (a.index,), (np.cos(a.value),), np.sin(a.value))

    def _op_cos(self, a):
        a = self._lift(a)
        return self._push("cos", (a.index,), (-np.sin(a.value),), np.cos(a.value))

    def _op_relu(self, a):
        a = self._lift(a)
        on = np.asarray(a.value) > 0.0
        val = np.where(on, a.value, 0.0)
        val = val if val.ndim else float(val)
        return self._push("relu", (a.index,), (on * 1.0,), val)

    def _op_logistic(self, a):
        a = self._lift(a)
        s = _sigmoid(a.value)
        return self._push("logistic", (a.index,), (s * (1.0 - s),), s)

    def _op_step(self, a, threshold=0.0):
        """Indicator ``a >= threshold``; piecewise constant, zero derivative."""
        a = self._lift(a)
        on = np.asarray(a.value) >= threshold
        val = on * 1.0 if np.ndim(a.value) else float(on)
        return self._push("step", (a.index,), (0.0,), val)

    def _op_min(self, a, b):
        a, b = self._lift(a), self._lift(b)
        first = np.asarray(a.value <= b.value)
        val = np.where(first, a.value, b.value)
        val = val * 1.0 if val.ndim else float(val)
        return self._push("min", (a.index, b.index), (first * 1.0, (~first) * 1.0), val)

    def _op_max(self, a, b):
        a, b = self._lift(a), self._lift(b)
        first = np.asarray(a.value >= b.value)
        val = np.where(first, a.value, b.value)
        val = val * 1.0 if val.ndim else float(val)
        return self._push("max", (a.index, b.index), (first * 1.0, (~first) * 1.0), val)

    def _op_clamp(self, a, lo=0.0, hi=1.0):
        a = self._lift(a)
        v = np.asarray(a.value)
        inside = (v > lo) & (v < hi)
        val = np.clip(v, lo, hi)
        val = val if val.ndim else float(val)
        return self._push("clamp", (a.index,), (inside * 1.0,), val)

    # reductions ------------------------------------------------------------
    def _op_sum(self, a):
        a = self._lift(a)
        return self._push("sum", (a.index,), (1.0,), _fsum(a.value))

    def _op_mean(self, a):
        a = self._lift(a)
        n = np.size(a.value)
        return self._push("mean", (a.index,), (1.0 / n,), _fsum(a.value) / n)

    # differentiation -------------------------------------------------------
    def adjoints(self, root=None, guard=None):
        """One reverse sweep; returns a list with one adjoint per node."""
        root = self.root if root is None else (root.index if isinstance(root, Var) else root)
        if root is None:
            raise ContractError("tape has no root")
        if np.ndim(self.values[root]) != 0:
            raise ContractError(
                f"backward needs a scalar root, got shape {np.shape(self.values[root])}"
            )
        if self._guard is not None and guard is not None and guard != self._guard:
            raise StaleTapeError("parameters changed after the tape was recorded")
        adj = [0.0] * (root + 1)
        adj[root] = 1.0
        values = self.values
        for i in range(root, -1, -1):
            g = adj[i]
            ops = self.operands[i]
            if not ops or (np.ndim(g) == 0 and g == 0.0):
                continue
            for j, d in zip(ops, self.partials[i]):
                c = g * d
                vj = values[j]
                if np.ndim(c) > np.ndim(vj):
                    c = float(np.sum(c))
                elif np.ndim(vj) and np.ndim(c) == 0:
                    c = np.full(np.shape(vj), c)
                adj[j] = adj[j] + c
        return adj


def record(fn, **leaves):
    """Record ``fn(**leaves)`` on a fresh tape whose root is the result."""
    tape = Tape()
    args = {name: tape.leaf(value, name) for name, value in leaves.items()}
    out = fn(**args)
    if not isinstance(out, Var):
        out = tape.const(out)
    tape.root = out.index
    return tape


def backward(tape, root=None, guard=None):
    """Gradient of the (scalar) root with respect to every named leaf."""
    adj = tape.adjoints(root, guard)
    grads = {}
    for name, idx in tape.leaves.items():
        g = adj[idx] if idx < len(adj) else 0.0
        v = tape.values[idx]
        if np.ndim(v) and np.ndim(g) == 0:
            g = np.full(np.shape(v), float(g))
        grads[name] = g
    return grads


# numpy/tape polymorphic elementary functions ------------------------------


def _dispatch(prim, np_fn):
    def f(a):
        if isinstance(a, Var):
            return a.tape.apply(prim, a)
        return np_fn(a)

    f.__name__ = prim
    return f


exp = _dispatch("exp", np.exp)
log = _dispatch("log", np.log)
tanh = _dispatch("tanh", np.tanh)
sin = _dispatch("sin", np.sin)
cos = _dispatch("cos", np.cos)
relu = _dispatch("relu", lambda a: np.maximum(a, 0.0))
logistic = _dispatch("logistic", _sigmoid)
asum = _dispatch("sum", lambda a: _fsum(a))
amean = _dispatch("mean", lambda a: _fsum(a) / np.size(a))


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def minimum(a, b):
    t = _tape_of(a, b)
    if t is not None:
        return t.apply("min", a, b)
    return np.where(np.asarray(a) <= b, a, b) * 1.0


def maximum(a, b):
    t = _tape_of(a, b)
    if t is not None:
        return t.apply("max", a, b)
    return np.where(np.asarray(a) >= b, a, b) * 1.0


def clamp(a, lo=0.0, hi=1.0):
    if isinstance(a, Var):
        return a.tape.apply("clamp", a, lo=lo, hi=hi)
    return np.clip(a, lo, hi)


def step(a, threshold=0.0):
    if isinstance(a, Var):
        return a.tape.apply("step", a, threshold=threshold)
    return (np.asarray(a) >= threshold) * 1.0


def power(a, p):
    t = _tape_of(a, p)
    if t is not None:
        return t.apply("pow", a, p)
    return np.power(a, p)

