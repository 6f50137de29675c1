"""
Dense float64 arrays with reverse-mode automatic differentiation.

Every differentiable operation builds a `Value` that remembers its parents
and a closure mapping the upstream gradient to parent gradients. `backward`
walks the recorded graph once in reverse topological order and deposits
gradients on leaves that have ``requires_grad=True``.

Broadcasting follows numpy for the elementwise ops; gradients are summed
back to the operand shape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    DomainError,
    InputError,
    NumericError,
    ParameterError,
    UsageError,
)

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Value:
    __slots__ = ("data", "grad", "requires_grad", "frozen", "name",
                 "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.frozen = False
        self.name = name
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def freeze(self) -> None:
        """Mark as immutable: no gradient is tracked and the buffer is read-only."""
        self.requires_grad = False
        self.frozen = True
        self.data.flags.writeable = False

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _result(data: np.ndarray, parents: Sequence[Value], backward) -> Value:
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite entries produced by an operation")
    out = Value(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), bw)


def exp(x: Value) -> Value:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Value) -> Value:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive entry")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Value) -> Value:
    s = _stable_sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def silu(x: Value) -> Value:
    """x * sigmoid(x), elementwise."""
    s = _stable_sigmoid(x.data)
    out = x.data * s
    return _result(out, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


# -- reductions and shape ---------------------------------------------------

def vsum(x: Value, axis=None, keepdims: bool = False) -> Value:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw)


def mean(x: Value, axis=None, keepdims: bool = False) -> Value:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return vsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Value, shape) -> Value:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Value, axes=None) -> Value:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Value, idx) -> Value:
    out = x.data[idx]

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(np.array(out), (x,), bw)


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    out = np.concatenate([v.data for v in values], axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, values, bw)


def stack(values: Sequence[Value], axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    out = np.stack([v.data for v in values], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(values)))

    return _result(out, values, bw)


def embedding(table: Value, ids) -> Value:
    """Rows of ``table`` gathered by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _result(table.data[ids], (table,), bw)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Value:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # one flat GEMM is much faster than numpy's broadcast loop
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(lead + (b.shape[-1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), bw)

    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), bw)


# -- normalisation and attention primitives -----------------------------------

def softmax(x: Value, temperature: float = 1.0, axis: int = -1) -> Value:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _result(out, (x,), bw)


def log_softmax(x: Value, axis: int = -1) -> Value:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Value, gamma: Value | None = None, beta: Value | None = None,
               eps: float = 1e-5) -> Value:
    """Normalise over the last axis with population variance, then scale/shift."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    if eps == 0 and np.any(var == 0):
        raise DomainError("zero variance with eps=0")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = 1.0 if gamma is None else gamma.data
    bd = 0.0 if beta is None else beta.data
    out = xhat * gd + bd
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return grads

    return _result(out, parents, bw)


def max_pool_seq(E: Value, mask=None) -> Value:
    """Maximum over the sequence axis (second to last).

    ``mask`` marks valid positions with True; padded rows never win. The
    gradient goes to the first arg-max row of each column.
    """
    if E.ndim < 2 or E.shape[-2] < 1:
        raise InputError("max_pool_seq needs a non-empty sequence")
    data = E.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise InputError("max_pool_seq: a sequence has no valid positions")
        data = np.where(mask[..., None], data, -np.inf)
    idx = np.argmax(data, axis=-2)
    out = np.take_along_axis(data, idx[..., None, :], axis=-2)[..., 0, :]

    def bw(g):
        full = np.zeros_like(E.data)
        np.put_along_axis(full, idx[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return _result(out, (E,), bw)


def kl_divergence(p: Value, q: Value) -> Value:
    """Sum over the last axis of p*ln(p/q), with 0*ln(0/q) = 0.

    One value per leading index; for 1-D inputs the result is a scalar.
    """
    p, q = as_value(p), as_value(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shape mismatch {p.shape} vs {q.shape}")
    pos = p.data > 0
    if np.any(pos & (q.data <= 0)):
        raise DomainError("q has zero mass where p is positive; smooth the target first")
    safe_p = np.where(pos, p.data, 1.0)
    safe_q = np.where(pos, q.data, 1.0)
    ratio = np.log(safe_p / safe_q)
    out = np.where(pos, p.data * ratio, 0.0).sum(axis=-1)

    def bw(g):
        g = np.expand_dims(g, -1)
        gp = np.where(pos, ratio + 1.0, 0.0) * g
        gq = np.where(pos, -p.data / np.where(q.data > 0, q.data, 1.0), 0.0) * g
        return gp, gq

    return _result(np.asarray(out), (p, q), bw)


def cross_entropy(logits: Value, targets, mask=None) -> Value:
    """Mean negative log-likelihood of ``targets`` over masked-in positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise InputError("cross_entropy: every position is masked out")
    V = logits.shape[-1]
    if np.any((targets[mask] < 0) | (targets[mask] >= V)):
        raise InputError("target id outside the vocabulary")
    safe_t = np.where(mask, targets, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    sz = ez.sum(axis=-1, keepdims=True)
    logp = z - np.log(sz)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def bw(g):
        probs = ez / sz
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return ((probs - onehot) * (mask[..., None] * (float(g) / count)),)

    return _result(np.asarray(loss), (logits,), bw)


# -- graph traversal -----------------------------------------------------------

def _topological(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Value) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every requires_grad leaf.

    The recorded graph is released afterwards; a second call on the same
    loss raises `UsageError`.
    """
    if loss.size != 1:
        raise UsageError("backward needs a scalar loss")
    if loss._consumed:
        raise UsageError("graph already consumed by an earlier backward call")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any trainable leaf")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node.requires_grad = False
    loss._consumed = True


# -- verification helpers ------------------------------------------------------

def numerical_grad(fn: Callable[[], Value], leaf: Value, step: float = 1e-4,
                   indices: Iterable[tuple[int, ...]] | None = None) -> dict[tuple[int, ...], float]:
    """Central differences of ``fn()`` with respect to entries of ``leaf``."""
    writeable = leaf.data.flags.writeable
    leaf.data.flags.writeable = True
    out = {}
    try:
        if indices is None:
            indices = list(np.ndindex(*leaf.shape))
        with no_grad():
            for idx in indices:
                orig = leaf.data[idx]
                leaf.data[idx] = orig + step
                up = fn().item()
                leaf.data[idx] = orig - step
                down = fn().item()
                leaf.data[idx] = orig
                out[tuple(idx)] = (up - down) / (2 * step)
    finally:
        leaf.data.flags.writeable = writeable
    return out


def grad_check(fn: Callable[[], Value], leaves: Sequence[Value], step: float = 1e-4,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Largest relative error between autodiff and central differences.

    The error for each leaf is ``|g_auto - g_num| / max(|g_auto|, |g_num|)``
    over the checked entries (all of them, or ``max_entries`` sampled ones).
    """
    for leaf in leaves:
        leaf.grad = None
    loss = fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        auto = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad
        all_idx = list(np.ndindex(*leaf.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        num = numerical_grad(fn, leaf, step, all_idx)
        a = np.array([auto[i] for i in all_idx])
        n = np.array([num[i] for i in all_idx])
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale == 0:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst


def param(data, name: str | None = None) -> Value:
    """A trainable leaf."""
    return Value(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


__all__ = [
    "Value", "param", "no_grad", "grad_enabled", "as_value",
    "add", "sub", "mul", "div", "exp", "log", "sigmoid", "silu",
    "vsum", "mean", "reshape", "transpose", "getitem", "concat", "stack", "embedding",
    "matmul", "softmax", "log_softmax", "layer_norm", "max_pool_seq",
    "kl_divergence", "cross_entropy", "backward", "numerical_grad", "grad_check",
    "entropy",
]
