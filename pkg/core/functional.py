# core/functional.py
"""
Differentiable operations on ``Tensor``.

Each op computes its forward value with numpy and hands a closure with
its backward rule to ``core.tensor.record``. Rules receive dLoss/dOut and
return one gradient per input, in input order.
"""

import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf, log_softmax

from config.errors import ConfigError, ContractError, DimensionError, InputError, NumericError
from core.tensor import Tensor, record

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting added to reach ``shape``."""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.grad_node is not None


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError.mismatch(op, a.shape, b.shape)


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def _backward(g: np.ndarray):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), _backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def _backward(g: np.ndarray):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return record("sub", a.data - b.data, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)

    def _backward(g: np.ndarray):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return record("mul", a.data * b.data, (a, b), _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar."""

    def _backward(g: np.ndarray):
        return (g * factor,)

    return record("scale", x.data * factor, (x,), _backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU as used by BERT."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))

    def _backward(g: np.ndarray):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return record("gelu", x.data * cdf, (x,), _backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def _backward(g: np.ndarray):
        return (g * keep,)

    return record("dropout", x.data * keep, (x,), _backward)


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast.

    Raises:
        DimensionError: If the inner dimensions disagree.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError.mismatch("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError.mismatch("matmul", a.shape, b.shape)
    need_a, need_b = _needs_grad(a), _needs_grad(b)

    def _backward(g: np.ndarray):
        grad_a = grad_b = None
        if need_a:
            grad_a = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if need_b:
            if b.ndim == 2:
                grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                grad_b = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return grad_a, grad_b

    return record("matmul", out, (a, b), _backward)


def diag_scale(x: Tensor, diag: Tensor) -> Tensor:
    """Scale the columns of ``x`` by ``diag``: ``x @ Diag(diag)`` without the d x d matrix."""
    if diag.ndim != 1 or x.ndim < 1 or x.shape[-1] != diag.shape[0]:
        raise DimensionError.mismatch("diag_scale", x.shape, diag.shape)
    width = diag.shape[0]

    def _backward(g: np.ndarray):
        grad_diag = (g * x.data).reshape(-1, width).sum(axis=0)
        return g * diag.data, grad_diag

    return record("diag_scale", x.data * diag.data, (x, diag), _backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 axes, got shape {x.shape}")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _backward(g: np.ndarray):
        return (np.transpose(g, inverse),)

    return record("transpose", np.transpose(x.data, axes), (x,), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError.mismatch("reshape", x.shape, tuple(shape))

    def _backward(g: np.ndarray):
        return (g.reshape(x.shape),)

    return record("reshape", out, (x,), _backward)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(..., n, d)`` -> ``(..., heads, n, d / heads)``."""
    width = x.shape[-1]
    if heads < 1 or width % heads != 0:
        raise ConfigError(f"width {width} is not divisible by heads={heads}")
    split = reshape(x, x.shape[:-1] + (heads, width // heads))
    lead = tuple(range(split.ndim - 3))
    return transpose(split, lead + (split.ndim - 2, split.ndim - 3, split.ndim - 1))


def merge_heads(x: Tensor) -> Tensor:
    """``(..., heads, n, d_h)`` -> ``(..., n, heads * d_h)``."""
    if x.ndim < 3:
        raise DimensionError(f"merge_heads needs at least 3 axes, got shape {x.shape}")
    lead = tuple(range(x.ndim - 3))
    swapped = transpose(x, lead + (x.ndim - 2, x.ndim - 3, x.ndim - 1))
    return reshape(swapped, swapped.shape[:-2] + (swapped.shape[-2] * swapped.shape[-1],))


# -- normalization ---------------------------------------------------------

def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax over the last axis with max subtraction.

    Args:
        x: Logits, last axis length >= 1.
        mask: Optional additive constant (0 or -inf) broadcastable to ``x``.

    Raises:
        NumericError: If ``x`` holds non-finite values.
    """
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ContractError(f"softmax_rows needs a non-empty last axis, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows received non-finite logits")
    logits = x.data if mask is None else x.data + mask
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def _backward(g: np.ndarray):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return record("softmax_rows", probs, (x,), _backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError.mismatch("layer_norm", x.shape, gamma.shape, beta.shape)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def _backward(g: np.ndarray):
        dxhat = g * gamma.data
        grad_x = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grad_gamma = (g * xhat).reshape(-1, width).sum(axis=0)
        grad_beta = g.reshape(-1, width).sum(axis=0)
        return grad_x, grad_gamma, grad_beta

    return record("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), _backward)


# -- indexing --------------------------------------------------------------

def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of the flattened ``(N, d)`` view of ``x``."""
    index = np.asarray(index)
    width = x.shape[-1]
    flat = x.data.reshape(-1, width)

    def _backward(g: np.ndarray):
        grad = np.zeros_like(flat)
        np.add.at(grad, index, g.reshape(-1, width))
        return (grad.reshape(x.shape),)

    return record("take_rows", flat[index], (x,), _backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``table`` for integer ``ids`` of any shape.

    Raises:
        InputError: If ids are not integers or fall outside ``[0, rows)``.
    """
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise InputError(f"token id out of range [0, {rows}): min={ids.min()}, max={ids.max()}")

    def _backward(g: np.ndarray):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (grad,)

    return record("embedding_lookup", table.data[ids], (table,), _backward)


# -- reductions and losses ---------------------------------------------------

def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""

    def _backward(g: np.ndarray):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), _backward)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = np.asarray(np.mean(x.data, axis=axis, keepdims=keepdims), dtype=x.dtype)
    count = x.size // max(out.size, 1)

    def _backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return record("mean", out, (x,), _backward)


def masked_mean(x: Tensor, keep: np.ndarray) -> Tensor:
    """Mean over the second-to-last axis of ``(..., n, d)`` counting only ``keep`` rows."""
    weights = np.asarray(keep, dtype=x.dtype)
    if weights.shape != x.shape[:-1]:
        raise DimensionError.mismatch("masked_mean", x.shape, weights.shape)
    denom = weights.sum(axis=-1, keepdims=True)
    if np.any(denom == 0):
        raise InputError("masked_mean: a sequence has no unmasked positions")
    out = (x.data * weights[..., None]).sum(axis=-2) / denom

    def _backward(g: np.ndarray):
        return (weights[..., None] * (g / denom)[..., None, :],)

    return record("masked_mean", out, (x,), _backward)


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    Args:
        logits: ``(N, C)`` unnormalized scores.
        targets: ``(N,)`` class ids.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError.mismatch("cross_entropy_with_logits", logits.shape, targets.shape)
    count, classes = logits.shape
    if count == 0:
        raise ContractError("cross_entropy_with_logits needs at least one row")
    if targets.min() < 0 or targets.max() >= classes:
        raise InputError(f"target ids out of range [0, {classes})")
    rows = np.arange(count)
    log_probs = log_softmax(logits.data, axis=-1)
    loss = np.asarray(-log_probs[rows, targets].mean(), dtype=logits.dtype)

    def _backward(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (g / count),)

    return record("cross_entropy", loss, (logits,), _backward)
