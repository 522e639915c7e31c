"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

The op set is exactly what the sequence model needs: batched matmul,
transpose/reshape/concat, broadcast arithmetic, tanh, gelu, softmax with
optional masking, layer norm, dropout, and full reductions. Gradients
accumulate additively into `Tensor.grad`; callers zero them between steps.
64-bit data is used wherever gradients are checked against finite
differences; 32-bit is fine for training.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate `grad` on every requires_grad leaf reachable from this scalar.

        Repeated calls without zeroing accumulate, each pass contributing the
        gradient of an independent evaluation.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
            else:
                node._backward(g, grads)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(grads: dict[int, np.ndarray], t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    prev = grads.get(key)
    grads[key] = g if prev is None else prev + g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g, grads):
        _accumulate(grads, a, _unbroadcast(g, a.shape))
        _accumulate(grads, b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g, grads):
        _accumulate(grads, a, _unbroadcast(g, a.shape))
        _accumulate(grads, b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g, grads):
        _accumulate(grads, a, _unbroadcast(g * b.data, a.shape))
        _accumulate(grads, b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data * s

    def backward(g, grads):
        _accumulate(grads, a, g * s)

    return _make(data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # stacked-by-matrix product collapses to one 2-d GEMM
        a2 = np.ascontiguousarray(a.data).reshape(-1, a.shape[-1])
        data = (a2 @ b.data).reshape(*a.shape[:-1], b.shape[-1])

        def backward(g, grads):
            g2 = np.ascontiguousarray(g).reshape(-1, b.shape[-1])
            _accumulate(grads, a, (g2 @ b.data.T).reshape(a.shape))
            _accumulate(grads, b, a2.T @ g2)

        return _make(data, (a, b), backward)
    data = a.data @ b.data

    def backward(g, grads):
        _accumulate(grads, a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(grads, b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(data, (a, b), backward)


def linear(x, w, b) -> Tensor:
    """Fused x @ w + b over the last axis; x may carry any leading axes."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"linear needs w (in, out) and b (out,), got {w.shape}, {b.shape}")
    if x.ndim < 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear input {x.shape} does not match w {w.shape}")
    x2 = np.ascontiguousarray(x.data).reshape(-1, x.shape[-1])
    data = x2 @ w.data
    data += b.data
    data = data.reshape(*x.shape[:-1], w.shape[1])

    def backward(g, grads):
        g2 = np.ascontiguousarray(g).reshape(-1, w.shape[1])
        _accumulate(grads, x, (g2 @ w.data.T).reshape(x.shape))
        _accumulate(grads, w, x2.T @ g2)
        _accumulate(grads, b, g2.sum(axis=0))

    return _make(data, (x, w, b), backward)


def split_heads(x, n_heads: int) -> Tensor:
    """(b, t, d) -> (b, n_heads, t, d // n_heads)."""
    x = _as_tensor(x)
    b, t, d = x.shape
    data = np.ascontiguousarray(
        x.data.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)
    )

    def backward(g, grads):
        _accumulate(grads, x, g.transpose(0, 2, 1, 3).reshape(b, t, d))

    return _make(data, (x,), backward)


def merge_heads(x) -> Tensor:
    """(b, h, t, d_head) -> (b, t, h * d_head)."""
    x = _as_tensor(x)
    b, h, t, dh = x.shape
    data = x.data.transpose(0, 2, 1, 3).reshape(b, t, h * dh)

    def backward(g, grads):
        _accumulate(grads, x, g.reshape(b, t, h, dh).transpose(0, 2, 1, 3))

    return _make(data, (x,), backward)


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g, grads):
        _accumulate(grads, a, g.transpose(inverse))

    return _make(data, (a,), backward)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    old_shape = a.shape

    def backward(g, grads):
        _accumulate(grads, a, g.reshape(old_shape))

    return _make(data, (a,), backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g, grads):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accumulate(grads, t, piece)

    return _make(data, tuple(tensors), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g, grads):
        _accumulate(grads, a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    x_sq = x * x
    inner = x_sq * _GELU_A
    inner += 1.0
    inner *= x
    inner *= _GELU_C
    t = np.tanh(inner)
    data = (1.0 + t) * (0.5 * x)

    def backward(g, grads):
        # d/dx [0.5 x (1+t)] = 0.5 (1+t) + 0.5 x (1-t^2) c (1 + 3 A x^2)
        d_inner = x_sq * (3.0 * _GELU_A)
        d_inner += 1.0
        d_inner *= _GELU_C
        local = 1.0 - t * t
        local *= d_inner
        local *= x
        local += t
        local += 1.0
        local *= 0.5
        local *= g
        _accumulate(grads, a, local)

    return _make(data, (a,), backward)


def softmax(a, mask: np.ndarray | None = None, scale_by: float | None = None) -> Tensor:
    """Softmax over the last axis of (optionally pre-scaled) logits.

    Masked-out positions (mask False) get exactly zero probability and
    exactly zero gradient.
    """
    a = _as_tensor(a)
    logits = a.data if scale_by is None else a.data * scale_by
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    data = ex / ex.sum(axis=-1, keepdims=True)

    def backward(g, grads):
        inner = (g * data).sum(axis=-1, keepdims=True)
        da = data * (g - inner)
        if scale_by is not None:
            da *= scale_by
        _accumulate(grads, a, da)

    return _make(data, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean/unit variance, then apply gain/bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd
    data = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g, grads):
        _accumulate(grads, gain, _unbroadcast(g * xhat, gain.shape))
        _accumulate(grads, bias, _unbroadcast(g, bias.shape))
        dxhat = g * gain.data
        mean_d = dxhat.mean(axis=-1, keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dxhat -= mean_d
        dxhat -= xhat * mean_dx
        dxhat *= istd
        _accumulate(grads, x, dxhat)

    return _make(data, (x, gain, bias), backward)


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    a = _as_tensor(a)
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype)
    inv = 1.0 / (1.0 - rate)
    data = a.data * keep * inv

    def backward(g, grads):
        _accumulate(grads, a, g * keep * inv)

    return _make(data, (a,), backward)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())

    def backward(g, grads):
        _accumulate(grads, a, np.full(a.shape, float(g), dtype=a.dtype))

    return _make(data, (a,), backward)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.mean())
    size = a.data.size

    def backward(g, grads):
        _accumulate(grads, a, np.full(a.shape, float(g) / size, dtype=a.dtype))

    return _make(data, (a,), backward)
