"""A small reverse-mode differentiation tape over numpy arrays.

Each op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to one gradient per parent.  Graph recording is
skipped when no input requires gradients, so the same layer code serves both
inference and training.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import UsageError

__all__ = [
    "Tensor",
    "Parameter",
    "as_tensor",
    "concat",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "silu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "glu",
    "dropout",
    "cross_entropy",
    "mse",
    "custom_op",
]

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = parents
        self._backward = backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph -----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if not self.requires_grad:
            raise UsageError("backward() on a tensor with no recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = self._topo()
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def _topo(self) -> list["Tensor"]:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order[::-1]

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.shape, other.shape
        return _make(self.data + other.data, (self, other), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.shape, other.shape
        return _make(self.data - other.data, (self, other), lambda g: (_unbroadcast(g, a), -_unbroadcast(g, b)))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        return _make(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        out = x / y
        return _make(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
        )

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __pow__(self, p: float):
        x = self.data
        return _make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        if x.ndim < 2 or y.ndim < 2:
            raise UsageError("matmul operands must be at least 2-D")

        def back(g):
            gx = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if self.requires_grad else None
            gy = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if other.requires_grad else None
            return gx, gy

        return _make(x @ y, (self, other), back)

    def __rmatmul__(self, other):
        return as_tensor(other, self.dtype) @ self

    # -- shape and reductions -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return _make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes
        axes = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        return _make(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    def flip(self, axis: int = -1):
        return _make(np.flip(self.data, axis), (self,), lambda g: (np.flip(g, axis),))

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.dtype

        basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def back(g):
            out = np.zeros(shape, dtype=dtype)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return _make(self.data[idx], (self,), back)


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    def __init__(self, data, name: str | None = None):
        arr = np.array(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        super().__init__(arr, True, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def custom_op(data, parents, backward) -> Tensor:
    """Build a node from a forward value and a hand-written pullback."""
    return _make(data, tuple(parents), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def silu(x: Tensor) -> Tensor:
    z = x.data
    s = _sigmoid(z)
    return _make(z * s, (x,), lambda g: (g * (s * (1 + z * (1 - s))),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    z = x.data
    cdf = 0.5 * (1.0 + erf(z * _SQRT_HALF))
    return _make(
        (z * cdf).astype(z.dtype, copy=False),
        (x,),
        lambda g: ((g * (cdf + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z))).astype(z.dtype, copy=False),),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -2, eps: float = 1e-5) -> Tensor:
    """Normalise along ``axis`` (channels by default), then scale and shift.

    ``gamma``/``beta`` must broadcast against ``x`` (shape C x 1 for channels-first).
    """
    z = x.data
    mu = z.mean(axis=axis, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gamma.data, beta.data
    n = z.shape[axis]

    def back(g):
        gg = _unbroadcast(g * xhat, gd.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, bd.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True) - xhat * (gh * xhat).sum(axis=axis, keepdims=True) / n)
        return gx, gg, gb

    return _make(xhat * gd + bd, (x, gamma, beta), back)


def glu(x: Tensor, axis: int = -2) -> Tensor:
    """First half gated by the sigmoid of the second half along ``axis``."""
    n = x.shape[axis]
    if n % 2:
        raise UsageError(f"GLU needs an even size along axis {axis}, got {n}")
    idx_a = [slice(None)] * x.ndim
    idx_b = [slice(None)] * x.ndim
    idx_a[axis] = slice(0, n // 2)
    idx_b[axis] = slice(n // 2, n)
    a = x.data[tuple(idx_a)]
    s = _sigmoid(x.data[tuple(idx_b)])

    def back(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=axis),)

    return _make(a * s, (x,), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B x C)."""
    labels = np.asarray(labels)
    lp = log_softmax(logits, axis=-1)
    picked = lp[np.arange(labels.size), labels]
    return -picked.mean()


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - as_tensor(target, pred.dtype)
    return (diff * diff).mean()
