"""Tape-based reverse-mode differentiation over float64 numpy arrays, plus ADAM.

A ``Tape`` records every primitive applied to tensors that (transitively)
depend on a watched leaf. ``backward`` walks the record in reverse and
accumulates vector-Jacobian products.

    tape = Tape()
    w = tape.watch(np.ones((3, 2)))
    loss = squared_norm(matmul(x, w))
    grads = backward(tape, loss)
    grads[w]
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

LAYER_NORM_EPS = 1e-5


class Tensor:
    __slots__ = ("value", "tape", "requires_grad")

    def __init__(self, value, tape: "Tape | None" = None, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    def __init__(self):
        self.nodes = []

    def watch(self, value) -> Tensor:
        """A differentiable leaf holding a private copy of ``value``."""
        return Tensor(np.array(value, dtype=np.float64), self, True)

    def record(self, value, inputs, vjp) -> Tensor:
        """Register an op; ``vjp(g)`` must return one gradient (or None) per input."""
        out = Tensor(value, self, True)
        self.nodes.append((out, inputs, vjp))
        return out


class Gradients(dict):
    """Gradients keyed by tensor identity; unreached tensors give zeros."""

    def __getitem__(self, t: Tensor):
        g = self.get(id(t))
        return np.zeros_like(t.value) if g is None else g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor) and x.requires_grad:
            return x.tape
    return None


def _check_finite(value, name):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{name} produced non-finite values")
    return value


def _op(name, value, inputs, vjp):
    _check_finite(value, name)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(value, inputs, vjp)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# primitives ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    ga, gb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (g @ bv.T if ga else None, av.T @ g if gb else None)

    return _op("matmul", av @ bv, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ValueError(f"add shape mismatch {a.shape} + {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _op("add", value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _op("scale", a.value * c, (a,), lambda g: (g * c,))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError("concat shape mismatch") from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _op("concat", value, tuple(ts), lambda g: tuple(np.split(g, sizes, axis=axis)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _op("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row over the feature axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape[-1] != n or bias.shape[-1] != n:
        raise ValueError("layer_norm gain/bias do not match the feature size")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def vjp(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dgain = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        dbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return dx, dgain, dbias

    return _op("layer_norm", xhat * gv + bias.value, (x, gain, bias), vjp)


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return _op("sum", np.array(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum(a), 1.0 / max(a.value.size, 1))


def squared_norm(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _op("squared_norm", np.array((av * av).sum()), (a,), lambda g: (2.0 * float(g) * av,))


def broadcast_rows(a, n: int) -> Tensor:
    """Repeat a (1, d) row ``n`` times; the gradient sums over the copies."""
    a = as_tensor(a)
    if a.value.ndim != 2 or a.shape[0] != 1:
        raise ValueError("broadcast_rows expects a (1, d) tensor")
    return _op("broadcast_rows", np.repeat(a.value, n, axis=0), (a,),
               lambda g: (g.sum(axis=0, keepdims=True),))


def sparse_matmul(s: sp.spmatrix, a) -> Tensor:
    """``S @ a`` for a constant sparse matrix ``S``."""
    a = as_tensor(a)
    if s.shape[1] != a.shape[0]:
        raise ValueError(f"sparse_matmul shape mismatch {s.shape} @ {a.shape}")
    st = s.T.tocsr()
    return _op("sparse_matmul", np.asarray(s @ a.value), (a,), lambda g: (np.asarray(st @ g),))


# reverse pass ----------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> Gradients:
    if loss.value.size != 1:
        raise ValueError("backward needs a scalar loss")
    grads = Gradients()
    if not loss.requires_grad or loss.tape is not tape:
        return grads
    grads[id(loss)] = np.ones_like(loss.value)
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = dict.get(grads, key) + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64).reshape(t.shape)
    return grads


# optimizer -------------------------------------------------------------

class Adam:
    """Bias-corrected ADAM over a fixed list of parameter arrays."""

    def __init__(self, shapes, lr: float = 0.002, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        """Return updated copies of ``params``; inputs are not modified."""
        if len(params) != len(self.m):
            raise ValueError("parameter count does not match optimizer state")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient passed to Adam")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != self.m[i].shape or g.shape != p.shape:
                raise ValueError("parameter/gradient shape mismatch")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out

    def state(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t}
