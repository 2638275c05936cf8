"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient. Outside a tape every op is a plain numpy call, which
is what evaluation uses.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class EmptyLossError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, inputs: Iterable["Tensor"] = ()) -> None:
        tape = active_tape()
        if tape is None:
            raise RuntimeError("backward() needs the tape that recorded the loss")
        tape.backward(self, inputs)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in creation order, so every op's inputs precede it and
    a single reverse sweep is a valid topological traversal.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, out: Tensor, parents: tuple[Tensor, ...], rule: Callable) -> None:
        self.nodes.append((out, parents, rule))

    def backward(self, loss: Tensor, inputs: Iterable[Tensor] = ()) -> None:
        if loss.data.size != 1 or loss.ndim > 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        produced = {id(out) for out, _, _ in self.nodes}
        if id(loss) not in produced and not loss.requires_grad:
            raise RuntimeError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, parents, rule in reversed(self.nodes):
            g = grads.pop(id(out), None)
            for p in parents:
                if p.requires_grad and id(p) not in produced:
                    leaves[id(p)] = p
            if g is None:
                continue
            pgrads = rule(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for t in inputs:
            leaves.setdefault(id(t), t)
        for t in leaves.values():
            if not t.requires_grad:
                continue
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g if t.grad is None else t.grad + g
        if loss.requires_grad and id(loss) not in produced:
            loss.grad = np.ones_like(loss.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], rule: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    """max(0, x). The subgradient at exactly 0 is taken as 0."""
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or not training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0 or not training:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand is the common ``tokens @ weight`` case and is folded
    into a single 2-D product for the weight gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), rule)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def getitem(x: Tensor, index) -> Tensor:
    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g) if _is_fancy(index) else gx.__setitem__(index, g)
        return (gx,)

    return _make(x.data[index], (x,), rule)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def add_at(x: Tensor, index, y: Tensor) -> Tensor:
    """Return a copy of ``x`` with ``y`` added into the basic slice ``x[index]``."""
    out = x.data.copy()
    out[index] += y.data
    return _make(out, (x, y), lambda g: (g, g[index]))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalizers

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is boolean, broadcastable to ``x``; True marks entries that take
    part. Masked entries come out exactly 0.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise InvalidMaskError("softmax row has every entry masked")
        z = np.where(mask, x.data, -np.inf)
    else:
        z = x.data.copy()
    z -= z.max(axis=-1, keepdims=True)
    # rows keep at least one finite entry, so masked cells are exp(-inf) == 0
    # exactly and no (-inf) - (-inf) can occur
    y = np.exp(z, out=z)
    y /= y.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), rule)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} do not fit width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def rule(g):
        gx = gg = gb = None
        gh = g * gamma.data
        if x.requires_grad:
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), rule)


# ---------------------------------------------------------------- losses

def l1_loss(pred: Tensor, target, visibility) -> Tensor:
    """Mean absolute error over the coordinates of visible keypoints.

    ``pred``/``target`` are ``[..., k, 2]``; ``visibility`` is ``[..., k]``.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    if pred.shape != target.shape or pred.shape[:-1] != vis.shape:
        raise ShapeError(f"l1_loss shapes disagree: {pred.shape}, {target.shape}, {vis.shape}")
    n = int(vis.sum()) * pred.shape[-1]
    if n == 0:
        raise EmptyLossError("l1_loss needs at least one visible keypoint")
    w = vis[..., None].astype(np.float64)
    diff = pred.data - target
    val = np.abs(diff * w).sum() / n
    return _make(np.asarray(val), (pred,), lambda g: (g * np.sign(diff) * w / n,))


def cross_entropy_rows(logits: Tensor, target_index, weight) -> Tensor:
    """Softmax cross-entropy of each row against an integer class, averaged
    over rows with nonzero ``weight``."""
    idx = np.asarray(target_index, dtype=np.int64)
    w = np.asarray(weight, dtype=np.float64)
    n = w.sum()
    if n <= 0:
        raise EmptyLossError("cross_entropy_rows needs at least one weighted row")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, idx[..., None], axis=-1)[..., 0]
    val = ((lse - picked) * w).sum() / n

    def rule(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, idx[..., None], np.take_along_axis(p, idx[..., None], -1) - 1.0, -1)
        return (g * p * (w[..., None] / n),)

    return _make(np.asarray(val), (logits,), rule)


# ---------------------------------------------------------------- checking

def grad_check(f: Callable[..., Tensor], x, h: float = 1e-6) -> float:
    """Largest relative disagreement between tape gradients and central
    differences, ``|a - n| / max(1, |a|, |n|)``, over every component of
    every tensor in ``x``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        y = f(*xs) if isinstance(x, Tensor) else f()
    if not np.all(np.isfinite(y.data)):
        raise EvaluationError("f(x) is not finite")
    tape.backward(y, xs)

    def value() -> float:
        return float(f(*xs).data) if isinstance(x, Tensor) else float(f().data)

    worst = 0.0
    for t in xs:
        flat = t.data.reshape(-1)
        ana = t.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = abs(ana[i] - num) / max(1.0, abs(ana[i]), abs(num))
            worst = max(worst, err)
    for t, r in zip(xs, saved):
        t.requires_grad = r
    return worst
