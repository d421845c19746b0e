"""Minimal tape-based reverse-mode autodiff over float64 numpy arrays.

Only the handful of ops the fusion model needs are provided. A tape is a
Wengert list: nodes are appended in evaluation order, so a reverse sweep
is a valid topological traversal.

    tape = Tape()
    w = tape.param("w", np.ones((2, 2)))
    x = tape.const(np.eye(2))
    loss = sum_all(matmul(x, w))
    grads = tape.backward(loss)   # {"w": ...}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass(slots=True)
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None
    name: str | None = None
    is_param: bool = False


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        # same array as the node's value; never mutated after the push
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var({node.op}, shape={self.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self._grads: list[np.ndarray | None] | None = None

    def _push(self, op, parents, value, vjp=None, name=None, is_param=False) -> Var:
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        nodes = self.nodes
        nodes.append(Node(op, parents, value, vjp, name, is_param))
        return Var(self, len(nodes) - 1, value)

    def param(self, name: str, value) -> Var:
        # copy: parameter values are never shared with the caller
        return self._push("param", (), np.array(value, dtype=np.float64), name=name, is_param=True)

    def params(self, values: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.param(k, v) for k, v in values.items()}

    def const(self, value, name: str | None = None) -> Var:
        return self._push("const", (), np.array(value, dtype=np.float64), name=name)

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns gradients for every parameter leaf (zeros for parameters the
        loss does not depend on). Gradients of other nodes can be read
        afterwards with :meth:`grad`.
        """
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        self._grads = grads
        out = {}
        for i, node in enumerate(self.nodes):
            if node.is_param:
                g = grads[i] if i < len(grads) else None
                out[node.name] = np.zeros_like(node.value) if g is None else np.array(g)
        return out

    def grad(self, var: Var) -> np.ndarray:
        if self._grads is None:
            raise RuntimeError("call backward() first")
        g = self._grads[var.index] if var.index < len(self._grads) else None
        return np.zeros_like(var.value) if g is None else g


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.const(x)


def _pair(a, b) -> tuple[Tape, Var, Var]:
    if type(a) is Var and type(b) is Var and a.tape is b.tape:
        return a.tape, a, b
    tape = a.tape if isinstance(a, Var) else b.tape
    return tape, _lift(tape, a), _lift(tape, b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _same_shape(opname: str, a: Var, b: Var):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b) -> Var:
    tape, a, b = _pair(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")

    def vjp(g):
        return g @ bv.T, av.T @ g

    return tape._push("matmul", (a.index, b.index), av @ bv, vjp)


def add(a, b) -> Var:
    """Elementwise sum; ``b`` may broadcast (e.g. a bias row)."""
    tape, a, b = _pair(a, b)
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return tape._push("add", (a.index, b.index), out, vjp)


def sub(a, b) -> Var:
    tape, a, b = _pair(a, b)
    try:
        out = a.value - b.value
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return tape._push("sub", (a.index, b.index), out, vjp)


def hadamard(a, b) -> Var:
    tape, a, b = _pair(a, b)
    _same_shape("hadamard", a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return g * bv, g * av

    return tape._push("hadamard", (a.index, b.index), av * bv, vjp)


def scale(a: Var, c: float) -> Var:
    def vjp(g):
        return (g * c,)

    return a.tape._push("scale", (a.index,), a.value * c, vjp)


def sum_all(a: Var) -> Var:
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._push("sum", (a.index,), np.sum(a.value), vjp)


def sigmoid(a: Var) -> Var:
    x = a.value
    # branch on sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return a.tape._push("sigmoid", (a.index,), out, vjp)


def relu(a: Var) -> Var:
    mask = a.value > 0

    def vjp(g):
        return (g * mask,)

    return a.tape._push("relu", (a.index,), a.value * mask, vjp)


def layer_norm(a: Var, gain, bias, eps: float = LAYER_NORM_EPS) -> Var:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    tape = a.tape
    gain, bias = _lift(tape, gain), _lift(tape, bias)
    x = a.value
    n = x.shape[-1]
    if n < 2:
        raise ShapeError(f"layer_norm needs last dimension >= 2, got {x.shape}")
    # add.reduce skips np.mean's Python-level wrapper (hot in grad checks)
    row_mean = lambda v: np.add.reduce(v, axis=-1, keepdims=True) / n
    xc = x - row_mean(x)
    inv = 1.0 / np.sqrt(row_mean(xc * xc) + eps)
    xhat = xc * inv
    gv = gain.value
    out = xhat * gv + bias.value
    gshape, bshape = gain.shape, bias.shape

    def vjp(g):
        dxhat = g * gv
        dx = inv * (dxhat - row_mean(dxhat) - xhat * row_mean(dxhat * xhat))
        return dx, _unbroadcast(g * xhat, gshape), _unbroadcast(g, bshape)

    return tape._push("layer_norm", (a.index, gain.index, bias.index), out, vjp)


def concat(a, b) -> Var:
    """Concatenate along the last axis."""
    tape, a, b = _pair(a, b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: leading shapes differ {a.shape} vs {b.shape}")
    k = a.shape[-1]

    def vjp(g):
        return g[..., :k], g[..., k:]

    return tape._push("concat", (a.index, b.index),
                      np.concatenate([a.value, b.value], axis=-1), vjp)


def take_rows(a: Var, idx) -> Var:
    """Gather rows of a 2-D node (embedding lookup / row subset)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._push("take_rows", (a.index,), a.value[idx], vjp)


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Var, targets, smoothing: float = 0.0) -> Var:
    """Mean label-smoothed cross-entropy over rows of ``logits``.

    The smoothed target puts ``1 - smoothing`` on the gold id and spreads
    ``smoothing`` uniformly over all V classes.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    z = logits.value
    if z.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {z.shape}")
    n, v = z.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} targets for {n} logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"target id out of range [0, {v})")
    q = np.full((n, v), smoothing / v)
    q[np.arange(n), targets] += 1.0 - smoothing
    lsm = log_softmax(z)
    loss = -(q * lsm).sum() / n

    def vjp(g):
        return (g * (np.exp(lsm) - q) / n,)

    return logits.tape._push("cross_entropy", (logits.index,), loss, vjp)


def mse(a, b) -> Var:
    tape, a, b = _pair(a, b)
    _same_shape("mse", a, b)
    diff = a.value - b.value
    n = diff.size

    def vjp(g):
        d = g * 2.0 * diff / n
        return d, -d

    return tape._push("mse", (a.index, b.index), np.add.reduce((diff * diff).ravel()) / diff.size, vjp)


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)


def numeric_grad(f: Callable[[Tape, dict[str, Var]], Var],
                 params: Mapping[str, np.ndarray], name: str, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``f`` w.r.t. one named parameter."""
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    x = base[name]
    out = np.zeros_like(x)

    def evaluate():
        tape = Tape()
        return float(f(tape, tape.params(base)).value)

    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = evaluate()
        x.flat[i] = old - h
        fm = evaluate()
        x.flat[i] = old
        out.flat[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f: Callable[[Tape, dict[str, Var]], Var],
               params: Mapping[str, np.ndarray], h: float = 1e-6,
               names: Sequence[str] | None = None) -> GradCheckResult:
    """Compare backward() against central differences.

    ``f(tape, vars)`` must rebuild the computation on the given tape and
    return a scalar. The error for a parameter is the largest elementwise
    gap divided by the larger of the two gradients' max-abs values, which
    stays meaningful when individual entries are near zero.
    """
    tape = Tape()
    analytic = tape.backward(f(tape, tape.params(params)))
    per = {}
    for name in names or list(params):
        a = analytic[name]
        n = numeric_grad(f, params, name, h)
        denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
        gap = np.abs(a - n).max(initial=0.0)
        per[name] = 0.0 if gap == 0.0 else gap / max(denom, 1e-12)
    return GradCheckResult(max(per.values(), default=0.0), per)
