"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive in evaluation order.  Each recorded
node keeps its parents and a vector-Jacobian product closure, so a backward
pass is a single reverse sweep over the tape.

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    x = tape.const(np.arange(6.0).reshape(2, 3))
    loss = mean(softplus(x @ w))
    (gw,) = tape.grad(loss, [w])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# incremented once per completed backward sweep; extraction asserts it does not move
_BACKWARD_PASSES = 0


def backward_pass_count() -> int:
    return _BACKWARD_PASSES


class ShapeError(ValueError):
    pass


class Var:
    __slots__ = ("tape", "value", "parents", "vjp", "requires_grad", "index")

    def __init__(self, tape, value, parents=(), vjp=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Append-only record of primitive evaluations."""

    def __init__(self):
        self.nodes: list[Var] = []

    def leaf(self, value) -> Var:
        """Differentiable input (a parameter)."""
        return Var(self, np.array(value, dtype=np.float64), requires_grad=True)

    def const(self, value) -> Var:
        return Var(self, np.asarray(value, dtype=np.float64))

    def grad(self, output: Var, wrt) -> list[np.ndarray]:
        """Adjoints of a scalar ``output`` with respect to each var in ``wrt``."""
        global _BACKWARD_PASSES
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        if output.value.size != 1:
            raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
        adj: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        for node in reversed(self.nodes[: output.index + 1]):
            g = adj.pop(node.index, None) if node.parents else adj.get(node.index)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.index in adj:
                    adj[parent.index] = adj[parent.index] + pg
                else:
                    adj[parent.index] = pg
        _BACKWARD_PASSES += 1
        return [adj.get(v.index, np.zeros_like(v.value)) for v in wrt]


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    return tape.const(x)


def _node(tape, value, parents, vjp) -> Var:
    req = any(p.requires_grad for p in parents)
    return Var(tape, value, parents if req else (), vjp if req else None, req)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(a: Var, b: Var, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _broadcast_check(a, b, "add")
    return _node(t, a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _broadcast_check(a, b, "sub")
    return _node(t, a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _broadcast_check(a, b, "mul")
    return _node(t, a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _broadcast_check(a, b, "div")
    out = a.value / b.value
    return _node(t, out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return _node(a.tape, a.value * c, (a,), lambda g: (g * c,))


def abs(a: Var) -> Var:  # noqa: A001 - mirrors the primitive name
    # subgradient at 0 is 0
    s = np.sign(a.value)
    return _node(a.tape, np.abs(a.value), (a,), lambda g: (g * s,))


def relu(a: Var) -> Var:
    m = (a.value > 0).astype(np.float64)
    return _node(a.tape, a.value * m, (a,), lambda g: (g * m,))


def softplus(a: Var, beta: float = 1.0) -> Var:
    """``log(1 + exp(beta * x)) / beta``; large ``beta`` approaches relu smoothly."""
    x = a.value * beta
    lse = np.logaddexp(0.0, x)
    sig = np.exp(x - lse)  # logistic(beta * x), overflow-safe
    return _node(a.tape, lse / beta, (a,), lambda g: (g * sig,))


def stop_gradient(a: Var) -> Var:
    return a.tape.const(a.value.copy())


# ---------------------------------------------------------------- reductions


def sum(a: Var, axis=None, keepdims=False) -> Var:  # noqa: A001
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.tape, np.asarray(out), (a,), vjp)


def mean(a: Var, axis=None, keepdims=False) -> Var:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l2norm(a: Var, axis=-1, keepdims=False) -> Var:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    n = np.sqrt((a.value * a.value).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    unit = np.where(n > 0, a.value / safe, 0.0)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * unit,)

    return _node(a.tape, out, (a,), vjp)


def softmax(a: Var) -> Var:
    """Softmax over the last axis."""
    x = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(a.tape, p, (a,), vjp)


# ---------------------------------------------------------------- structure


def matmul(a, b) -> Var:
    """``a @ b`` for 2-D operands or stacked matrices with equal batch dims.

    A 2-D right operand broadcasts across the batch of the left operand.
    """
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = a.value @ b.value

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _node(t, out, (a, b), vjp)


def concat(xs, axis=-1) -> Var:
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat: shape mismatch " + " vs ".join(str(x.shape) for x in xs)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(t, out, tuple(xs), vjp)


def reshape(a: Var, shape) -> Var:
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(a.tape, out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Var, axes) -> Var:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.tape, np.transpose(a.value, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def take_rows(a: Var, idx) -> Var:
    """Gather ``a[idx]`` along the first axis (duplicates accumulate)."""
    idx = np.asarray(idx)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.tape, a.value[idx], (a,), vjp)


def slice_last(a: Var, start: int, stop: int) -> Var:
    def vjp(g):
        out = np.zeros_like(a.value)
        out[..., start:stop] = g
        return (out,)

    return _node(a.tape, a.value[..., start:stop], (a,), vjp)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction and no weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"diverged: non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
