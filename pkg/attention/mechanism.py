# attention/mechanism.py
"""
Scaled dot-product self-attention over any parameter variant.

Inputs are ``(n, d)`` or batched ``(batch, n, d)``. Heads are split after
projection, so shared matrices and diagonals span all heads.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from attention.params import AttentionParams, PairwiseParams, Projections
from attention.variants import AttentionVariant
from config.errors import ConfigError, ContractError, DimensionError, InputError
from core import functional as F
from core.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AttentionOutput:
    """Result of ``attend``.

    Attributes:
        output: ``(..., n, d)`` after the output projection.
        weights: ``(..., m, n, n)`` attention probabilities, when requested.
        context: ``(..., n, d)`` head outputs concatenated, before ``W_o``.
    """

    output: Tensor
    weights: Optional[Tensor] = None
    context: Optional[Tensor] = None


def project(params: AttentionParams, x: Tensor) -> Projections:
    """Q, K, V for ``x`` under the variant's projection rule."""
    return params.project(x)


def scores(
    variant: Union[str, AttentionVariant],
    q: Tensor,
    k: Tensor,
    u_head: Optional[Tensor] = None,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Attention probabilities ``softmax(Q K^T / sqrt(d_h))``.

    Pairwise attention inserts its bilinear factor: ``Q U K^T / sqrt(d_h)``.

    Args:
        variant: Attention variant tag.
        q: Queries, ``(..., n, d_h)``.
        k: Keys, same shape as ``q``.
        u_head: Bilinear factor ``(d_h, d_h)`` or per-head ``(m, d_h, d_h)``;
            required for pairwise attention and rejected otherwise.
        mask: Optional additive mask (0 or -inf) broadcastable to the logits.

    Raises:
        ContractError: If ``u_head`` presence does not match the variant.
        DimensionError: If ``q`` and ``k`` differ in shape.
    """
    variant = AttentionVariant.parse(variant)
    if q.shape != k.shape:
        raise DimensionError.mismatch("scores", q.shape, k.shape)
    if variant is AttentionVariant.PAIRWISE and u_head is None:
        raise ContractError("pairwise attention needs its bilinear factor U")
    if variant is not AttentionVariant.PAIRWISE and u_head is not None:
        raise ContractError(f"{variant.value} attention takes no bilinear factor")

    left = q if u_head is None else F.matmul(q, u_head)
    logits = F.scale(F.matmul(left, F.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return F.softmax_rows(logits, mask)


def key_padding_mask(mask: Optional[np.ndarray], x: Tensor) -> Optional[np.ndarray]:
    """Turn a boolean keep-mask over keys into an additive logit mask."""
    if mask is None:
        return None
    keep = np.asarray(mask, dtype=bool)
    if keep.shape != x.shape[:-1]:
        raise DimensionError.mismatch("key padding mask", keep.shape, x.shape[:-1])
    if not keep.any(axis=-1).all():
        raise InputError("every sequence needs at least one unmasked position")
    additive = np.where(keep, 0.0, -np.inf).astype(x.dtype)
    # (..., n) -> (..., 1, 1, n): broadcast over heads and query rows
    return additive[..., None, None, :]


def attend(
    params: AttentionParams,
    x: Tensor,
    heads: int,
    return_weights: bool = False,
    mask: Optional[np.ndarray] = None,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> AttentionOutput:
    """Multi-head self-attention.

    Args:
        params: Variant parameters.
        x: Input, ``(n, d)`` or ``(batch, n, d)``.
        heads: Number of heads ``m``; each head has width ``d / m`` and
            its logits are scaled by ``1 / sqrt(d / m)``.
        return_weights: Keep the ``(..., m, n, n)`` probabilities.
        mask: Optional boolean keep-mask over key positions, ``x.shape[:-1]``.
        dropout: Dropout rate on the attention probabilities.
        rng: Generator for dropout; dropout is skipped without one.

    Raises:
        ConfigError: If ``d`` is not divisible by ``heads``.
        InputError: If the sequence is empty.
    """
    d_model = params.d_model
    if heads < 1 or d_model % heads != 0:
        raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
    if x.ndim < 2 or x.shape[-2] < 1:
        raise InputError(f"attention needs at least one position, got shape {x.shape}")

    q, k, v = params.project(x)
    q_heads = F.split_heads(q, heads)
    k_heads = q_heads if k is q else F.split_heads(k, heads)
    v_heads = F.split_heads(v, heads)

    u = None
    if isinstance(params, PairwiseParams):
        if params.heads != heads:
            raise ConfigError(f"pairwise factor has {params.heads} heads, attend called with {heads}")
        u = params.u

    weights = scores(params.variant, q_heads, k_heads, u, key_padding_mask(mask, x))
    mixed = F.dropout(weights, dropout, rng)
    context = F.merge_heads(F.matmul(mixed, v_heads))
    output = F.matmul(context, params.w_o)
    if params.b_o is not None:
        output = F.add(output, params.b_o)
    return AttentionOutput(output=output, weights=weights if return_weights else None, context=context)
