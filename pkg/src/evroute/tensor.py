"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward rule on the output tensor.
``Tensor.backward`` replays the recorded graph in reverse topological order
and accumulates gradients into leaves created with ``requires_grad=True``.

Broadcasting is one-sided: one operand must already have the result shape,
the other may be a scalar or a shape that numpy broadcasts up to it (for
example ``B x N x 1`` against ``B x N x D``).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError, DomainError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A float64 array that can take part in gradient computation.

    Args:
        data: Array-like values; always stored as a C-contiguous float64 array.
        requires_grad: Whether gradients should be accumulated into ``grad``.
        name: Optional label, used by parameter tables and error messages.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        data = np.asarray(data, dtype=np.float64)
        self.data = data if data.flags.c_contiguous else data.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --------------------------------------------------------------- autodiff
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Without an explicit ``grad`` the tensor must be a scalar. Repeated
        calls add to existing leaf gradients.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -------------------------------------------------------------- arithmetic
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # ------------------------------------------------------------- shorthands
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def logsumexp(self, axis=None, keepdims=False):
        return logsumexp(self, axis, keepdims)

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


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unary(x: Tensor, out: np.ndarray, rule: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    return _make(out, (x,), lambda g: (rule(g),))


def _result_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    try:
        shape = np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"shapes {a} and {b} are not broadcastable") from None
    if shape != a and shape != b:
        raise DimensionError(f"two-sided broadcast {a} with {b} is not supported")
    return shape


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ------------------------------------------------------------------- binary
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward)


def power(x: ArrayLike, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent`` for a constant real exponent."""
    x = as_tensor(x)
    p = float(exponent)
    xd = x.data
    return _unary(x, xd**p, lambda g: g * p * xd ** (p - 1.0))


def maximum(x: ArrayLike, floor: float) -> Tensor:
    """Clamp from below by a constant; gradient is zero where clamped."""
    x = as_tensor(x)
    keep = x.data >= floor
    return _unary(x, np.where(keep, x.data, floor), lambda g: g * keep)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes.

    The operand with fewer leading axes is broadcast over the other's batch
    dimensions (typical use: ``B x N x D`` times a ``D x E`` weight).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim - 1))))
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(np.matmul(ad, bd), (a, b), backward)


# ------------------------------------------------------------- elementwise
def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _unary(x, out, lambda g: g * out)


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    xd = x.data
    return _unary(x, np.log(xd), lambda g: g / xd)


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _unary(x, out, lambda g: g * 0.5 / out)


def absolute(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _unary(x, np.abs(x.data), lambda g: g * sign)


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _unary(x, np.where(pos, x.data, 0.0), lambda g: g * pos)


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = special.expit(x.data)
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def softplus(x: ArrayLike) -> Tensor:
    """``ln(1 + e^x)`` evaluated as ``max(x, 0) + ln(1 + e^{-|x|})``."""
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    return _unary(x, out, lambda g: g * special.expit(xd))


def gelu(x: ArrayLike) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return _unary(x, xd * cdf, lambda g: g * (cdf + xd * pdf))


def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def l2norm(x: ArrayLike, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    x = as_tensor(x)
    xd = x.data
    out = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (g * np.where(out > 0, xd / safe, 0.0),)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), backward)


def masked_fill(x: ArrayLike, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; those get no gradient."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    keep = ~mask
    return _unary(x, np.where(mask, value, x.data), lambda g: g * keep)


# ---------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def _check_nonempty(x: Tensor, axes):
    if any(x.shape[a] == 0 for a in axes) or x.size == 0:
        raise DomainError(f"reduction over an empty axis of shape {x.shape}")


def _expand(g: np.ndarray, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    return _unary(
        x, np.sum(x.data, axis=axes, keepdims=keepdims), lambda g: _expand(g, shape, axes, keepdims).copy()
    )


def reduce_mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    _check_nonempty(x, axes)
    shape = x.shape
    count = float(np.prod([shape[a] for a in axes]))
    return _unary(
        x, np.mean(x.data, axis=axes, keepdims=keepdims), lambda g: _expand(g, shape, axes, keepdims) / count
    )


def reduce_max(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``. Tied maxima share the gradient equally."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    _check_nonempty(x, axes)
    xd = x.data
    m = np.max(xd, axis=axes, keepdims=True)

    def backward(g):
        hit = xd == m
        share = hit / hit.sum(axis=axes, keepdims=True)
        return (_expand(g, xd.shape, axes, keepdims) * share,)

    return _make(m if keepdims else np.squeeze(m, axis=axes), (x,), backward)


def logsumexp(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    """``log(sum(exp(x)))`` with the max-shift trick."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    _check_nonempty(x, axes)
    xd = x.data
    m = np.max(xd, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(xd - m), axis=axes, keepdims=True))

    def backward(g):
        weights = np.exp(xd - out)
        return (_expand(g, xd.shape, axes, keepdims) * weights,)

    return _make(out if keepdims else np.squeeze(out, axis=axes), (x,), backward)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    return exp(x - logsumexp(x, axis=axis, keepdims=True))


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    return x - logsumexp(x, axis=axis, keepdims=True)


# ------------------------------------------------------------------- shape
def reshape(x: ArrayLike, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _unary(x, out, lambda g: g.reshape(old))


def transpose(x: ArrayLike, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _unary(x, np.transpose(x.data, axes), lambda g: np.transpose(g, inverse))


def getitem(x: ArrayLike, index) -> Tensor:
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index], dtype=np.float64), (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward)


def conv2d(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    Args:
        x: Input of shape ``B x C_in x H x W``.
        weight: Kernel of shape ``C_out x C_in x k x k``.
        bias: Optional ``C_out`` vector.
        stride: Step between output positions.
        padding: Zero padding added on every side.

    Returns:
        Tensor of shape ``B x C_out x H_out x W_out``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {Ci}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # cols: B x Ho x Wo x C x kh x kw
    cols = np.empty((B, Ho, Wo, C, kh, kw))
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride].transpose(0, 2, 3, 1)
    wmat = weight.data.reshape(O, -1)
    out = cols.reshape(B * Ho * Wo, -1) @ wmat.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols.reshape(B * Ho * Wo, -1)).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[..., i, j].transpose(
                        0, 3, 1, 2
                    )
            gx = gxp[:, :, padding : padding + H, padding : padding + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out.copy(), parents, backward)


# ----------------------------------------------------------------- checking
def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` with respect to ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
