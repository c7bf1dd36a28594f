# models/encoder.py
"""
BERT-style encoder built on any attention variant.

Post layer-norm blocks (attention -> add & norm -> GELU feed-forward ->
add & norm), learned token and position embeddings with an embedding
layer-norm, and either a masked-LM head tied to the token embedding or a
mean-pooled classification head.
"""

import logging
import math
from dataclasses import dataclass, fields
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from attention.mechanism import attend
from attention.params import (
    ArrayFactory,
    AttentionParams,
    build_attention_params,
    factorize_to_standard,
)
from attention.variants import AttentionVariant
from audit.param_audit import ParamAudit, audit
from config.errors import ContractError, InputError
from config.settings import ModelConfig
from core import functional as F
from core.tensor import Tensor, parameter
from models.tokenizer import MASK_ID
from utils.rng import Initializer

logger = logging.getLogger(__name__)

EmbeddingHook = Callable[[Tensor], Tensor]
NamedTensors = List[Tuple[str, Tensor]]


def _own_fields(obj, skip: Tuple[str, ...] = ()) -> NamedTensors:
    named = []
    for spec in fields(obj):
        value = getattr(obj, spec.name)
        if spec.name not in skip and isinstance(value, Tensor):
            named.append((spec.name, value))
    return named


@dataclass
class EncoderBlock:
    """One transformer layer: attention sub-layer then feed-forward sub-layer."""

    attention: AttentionParams
    ln_attn_gamma: Tensor
    ln_attn_beta: Tensor
    ffn_in: Tensor
    ffn_in_bias: Tensor
    ffn_out: Tensor
    ffn_out_bias: Tensor
    ln_ffn_gamma: Tensor
    ln_ffn_beta: Tensor

    def named_parameters(self) -> NamedTensors:
        named = [(f"attention.{n}", t) for n, t in self.attention.named_parameters()]
        return named + _own_fields(self)


@dataclass
class MLMHead:
    """Dense + GELU + layer-norm transform, then the (tied) vocabulary decoder."""

    transform: Tensor
    transform_bias: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    decoder: Tensor
    output_bias: Tensor

    def named_parameters(self) -> NamedTensors:
        return _own_fields(self)


@dataclass
class ClassifierHead:
    weight: Tensor
    bias: Tensor

    def named_parameters(self) -> NamedTensors:
        return _own_fields(self)


@dataclass
class ModelParams:
    """Every learnable tensor of an encoder plus the config it was built from."""

    config: ModelConfig
    token_embedding: Tensor
    position_embedding: Tensor
    emb_ln_gamma: Tensor
    emb_ln_beta: Tensor
    blocks: List[EncoderBlock]
    mlm_head: Optional[MLMHead] = None
    classifier: Optional[ClassifierHead] = None
    steps_trained: int = 0

    def named_parameters(self) -> NamedTensors:
        """Parameters in declaration order; tied tensors appear once, under their first name."""
        named = [
            ("embeddings.token", self.token_embedding),
            ("embeddings.position", self.position_embedding),
            ("embeddings.ln_gamma", self.emb_ln_gamma),
            ("embeddings.ln_beta", self.emb_ln_beta),
        ]
        for i, block in enumerate(self.blocks):
            named.extend((f"blocks.{i}.{n}", t) for n, t in block.named_parameters())
        if self.mlm_head is not None:
            named.extend((f"mlm.{n}", t) for n, t in self.mlm_head.named_parameters())
        if self.classifier is not None:
            named.extend((f"classifier.{n}", t) for n, t in self.classifier.named_parameters())

        seen = set()
        unique = []
        for name, tensor in named:
            if id(tensor) not in seen:
                seen.add(id(tensor))
                unique.append((name, tensor))
        return unique

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    @property
    def dtype(self) -> np.dtype:
        return self.token_embedding.dtype


@dataclass
class MaskedBatch:
    """Token ids with some positions replaced by ``[MASK]``.

    ``positions`` index the flattened ``(batch * n)`` token grid and
    ``targets`` hold the original ids at those positions.
    """

    tokens: np.ndarray
    positions: np.ndarray
    targets: np.ndarray


# -- construction ------------------------------------------------------------

def build_block(config: ModelConfig, make: ArrayFactory, prefix: str = "") -> EncoderBlock:
    d, width = config.d_model, config.ffn_dim

    def tensor(name: str, shape: Tuple[int, ...], kind: str) -> Tensor:
        return parameter(make(prefix + name, shape, kind), name=prefix + name)

    attention = build_attention_params(
        config.variant, d, config.heads, config.bias, make, prefix=f"{prefix}attention."
    )
    return EncoderBlock(
        attention=attention,
        ln_attn_gamma=tensor("ln_attn_gamma", (d,), "ones"),
        ln_attn_beta=tensor("ln_attn_beta", (d,), "zeros"),
        ffn_in=tensor("ffn_in", (d, width), "normal"),
        ffn_in_bias=tensor("ffn_in_bias", (width,), "zeros"),
        ffn_out=tensor("ffn_out", (width, d), "normal"),
        ffn_out_bias=tensor("ffn_out_bias", (d,), "zeros"),
        ln_ffn_gamma=tensor("ln_ffn_gamma", (d,), "ones"),
        ln_ffn_beta=tensor("ln_ffn_beta", (d,), "zeros"),
    )


def build_model(config: ModelConfig, make: ArrayFactory) -> ModelParams:
    """Allocate a model through an array factory (random init or checkpoint)."""
    d, vocab = config.d_model, config.vocab_size

    def tensor(name: str, shape: Tuple[int, ...], kind: str) -> Tensor:
        return parameter(make(name, shape, kind), name=name)

    token = tensor("embeddings.token", (vocab, d), "normal")
    params = ModelParams(
        config=config,
        token_embedding=token,
        position_embedding=tensor("embeddings.position", (config.max_seq, d), "normal"),
        emb_ln_gamma=tensor("embeddings.ln_gamma", (d,), "ones"),
        emb_ln_beta=tensor("embeddings.ln_beta", (d,), "zeros"),
        blocks=[build_block(config, make, prefix=f"blocks.{i}.") for i in range(config.layers)],
    )
    if config.head == "mlm":
        params.mlm_head = MLMHead(
            transform=tensor("mlm.transform", (d, d), "normal"),
            transform_bias=tensor("mlm.transform_bias", (d,), "zeros"),
            ln_gamma=tensor("mlm.ln_gamma", (d,), "ones"),
            ln_beta=tensor("mlm.ln_beta", (d,), "zeros"),
            decoder=token if config.tie_embeddings else tensor("mlm.decoder", (vocab, d), "normal"),
            output_bias=tensor("mlm.output_bias", (vocab,), "zeros"),
        )
    else:
        params.classifier = ClassifierHead(
            weight=tensor("classifier.weight", (d, config.num_classes), "normal"),
            bias=tensor("classifier.bias", (config.num_classes,), "zeros"),
        )
    return params


def init_model(
    config: ModelConfig,
    rng: Optional[np.random.Generator] = None,
    dtype: np.dtype = np.float64,
) -> ModelParams:
    """Randomly initialized encoder (truncated-normal matrices, unit diagonals plus jitter)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    params = build_model(config, Initializer(rng, config.init_std, config.diag_jitter, dtype))
    logger.debug(
        f"Initialized {config.variant.value} encoder: L={config.layers} d={config.d_model} "
        f"m={config.heads} V={config.vocab_size}, {params.num_parameters():,} parameters"
    )
    return params


def init_block(
    config: ModelConfig,
    rng: Optional[np.random.Generator] = None,
    dtype: np.dtype = np.float64,
) -> EncoderBlock:
    rng = rng if rng is not None else np.random.default_rng(0)
    return build_block(config, Initializer(rng, config.init_std, config.diag_jitter, dtype))


# -- forward -------------------------------------------------------------------

def block_forward(
    block: EncoderBlock,
    x: Tensor,
    config: ModelConfig,
    mask: Optional[np.ndarray] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """One post layer-norm transformer block; shape ``(..., n, d)`` is preserved."""
    hidden_rate = config.dropout_hidden if training else 0.0
    attn_rate = config.dropout_attn if training else 0.0
    eps = config.layer_norm_eps

    attended = attend(block.attention, x, config.heads, mask=mask, dropout=attn_rate, rng=rng)
    h = F.layer_norm(
        F.add(x, F.dropout(attended.output, hidden_rate, rng)), block.ln_attn_gamma, block.ln_attn_beta, eps
    )
    inner = F.gelu(F.add(F.matmul(h, block.ffn_in), block.ffn_in_bias))
    ffn = F.add(F.matmul(inner, block.ffn_out), block.ffn_out_bias)
    return F.layer_norm(F.add(h, F.dropout(ffn, hidden_rate, rng)), block.ln_ffn_gamma, block.ln_ffn_beta, eps)


def _check_tokens(params: ModelParams, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2):
        raise InputError(f"tokens must be (n,) or (batch, n), got shape {tokens.shape}")
    n = tokens.shape[-1]
    if n < 1:
        raise InputError("empty token sequence")
    if n > params.config.max_seq:
        raise InputError(f"sequence length {n} exceeds max_seq={params.config.max_seq}")
    return tokens


def embed(
    params: ModelParams,
    tokens: np.ndarray,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    embedding_hook: Optional[EmbeddingHook] = None,
) -> Tensor:
    """Token + position embeddings followed by the embedding layer-norm.

    ``embedding_hook`` sees the normalized embeddings before dropout; the
    noise harness injects its perturbation there.
    """
    tokens = _check_tokens(params, tokens)
    positions = np.arange(tokens.shape[-1])
    x = F.add(F.embedding_lookup(params.token_embedding, tokens), F.embedding_lookup(params.position_embedding, positions))
    x = F.layer_norm(x, params.emb_ln_gamma, params.emb_ln_beta, params.config.layer_norm_eps)
    if embedding_hook is not None:
        x = embedding_hook(x)
    return F.dropout(x, params.config.dropout_hidden if training else 0.0, rng)


def forward(
    params: ModelParams,
    tokens: np.ndarray,
    mask: Optional[np.ndarray] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    embedding_hook: Optional[EmbeddingHook] = None,
) -> Tensor:
    """Final hidden states ``(..., n, d)`` for integer ``tokens``.

    Args:
        params: Model parameters.
        tokens: ``(n,)`` or ``(batch, n)`` ids in ``[0, V)``.
        mask: Optional boolean keep-mask of the same shape; False marks padding.
        training: Enable dropout (needs ``rng``).
        rng: Generator for dropout.
        embedding_hook: Optional transform applied to the normalized embeddings.

    Raises:
        InputError: On out-of-range ids or ``n > max_seq``.
    """
    x = embed(params, tokens, training=training, rng=rng, embedding_hook=embedding_hook)
    for block in params.blocks:
        x = block_forward(block, x, params.config, mask=mask, training=training, rng=rng)
    return x


# -- masked language modeling -----------------------------------------------------

def mask_tokens(
    tokens: np.ndarray,
    mask_ratio: float,
    rng: np.random.Generator,
    mask_token_id: int = MASK_ID,
) -> MaskedBatch:
    """Replace ``ceil(mask_ratio * n)`` random positions per sequence by ``[MASK]``.

    Raises:
        InputError: If ``mask_ratio`` is outside (0, 1) or the sequence is empty.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise InputError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    tokens = np.asarray(tokens)
    grid = np.atleast_2d(tokens)
    batch, n = grid.shape
    count = math.ceil(round(mask_ratio * n, 9))
    if n == 0 or count < 1:
        raise InputError(f"sequence of length {n} is too short to mask a token")

    chosen = np.sort(np.argsort(rng.random((batch, n)), axis=1)[:, :count], axis=1)
    positions = (np.arange(batch)[:, None] * n + chosen).reshape(-1)
    masked = grid.copy()
    targets = masked.reshape(-1)[positions].copy()
    masked.reshape(-1)[positions] = mask_token_id
    return MaskedBatch(tokens=masked.reshape(tokens.shape), positions=positions, targets=targets)


def mlm_logits(params: ModelParams, hidden: Tensor, positions: Optional[np.ndarray] = None) -> Tensor:
    """Vocabulary logits for every position, or only the flattened ``positions``."""
    head = params.mlm_head
    if head is None:
        raise ContractError("model was built without a masked-LM head")
    h = hidden if positions is None else F.take_rows(hidden, positions)
    t = F.gelu(F.add(F.matmul(h, head.transform), head.transform_bias))
    t = F.layer_norm(t, head.ln_gamma, head.ln_beta, params.config.layer_norm_eps)
    return F.add(F.matmul(t, F.transpose(head.decoder)), head.output_bias)


def masked_lm_loss(
    params: ModelParams,
    batch: MaskedBatch,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    embedding_hook: Optional[EmbeddingHook] = None,
) -> Tensor:
    hidden = forward(params, batch.tokens, training=training, rng=rng, embedding_hook=embedding_hook)
    return F.cross_entropy_with_logits(mlm_logits(params, hidden, batch.positions), batch.targets)


def mlm_loss(
    params: ModelParams,
    tokens: np.ndarray,
    mask_ratio: float = 0.15,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
    embedding_hook: Optional[EmbeddingHook] = None,
) -> Tensor:
    """Cross-entropy over masked positions only (all-``[MASK]`` replacement)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    batch = mask_tokens(tokens, mask_ratio, rng, params.config.mask_token_id)
    return masked_lm_loss(params, batch, training=training, rng=rng, embedding_hook=embedding_hook)


def mlm_accuracy(
    params: ModelParams, batch: MaskedBatch, embedding_hook: Optional[EmbeddingHook] = None
) -> float:
    """Fraction of masked positions whose argmax prediction is the original token."""
    hidden = forward(params, batch.tokens, embedding_hook=embedding_hook)
    logits = mlm_logits(params, hidden, batch.positions)
    return float(np.mean(np.argmax(logits.data, axis=-1) == batch.targets))


# -- classification ---------------------------------------------------------------

def classify_logits(
    params: ModelParams,
    tokens: np.ndarray,
    mask: Optional[np.ndarray] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    embedding_hook: Optional[EmbeddingHook] = None,
) -> Tensor:
    """``(batch, num_classes)`` logits from mean-pooled final hidden states."""
    if params.classifier is None:
        raise ContractError("model was built without a classification head")
    tokens = np.atleast_2d(np.asarray(tokens))
    if mask is not None:
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    hidden = forward(params, tokens, mask=mask, training=training, rng=rng, embedding_hook=embedding_hook)
    keep = np.ones(tokens.shape, dtype=bool) if mask is None else mask
    pooled = F.masked_mean(hidden, keep)
    return F.add(F.matmul(pooled, params.classifier.weight), params.classifier.bias)


def classification_loss(
    params: ModelParams,
    tokens: np.ndarray,
    labels: np.ndarray,
    mask: Optional[np.ndarray] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    embedding_hook: Optional[EmbeddingHook] = None,
) -> Tensor:
    logits = classify_logits(params, tokens, mask=mask, training=training, rng=rng, embedding_hook=embedding_hook)
    return F.cross_entropy_with_logits(logits, np.asarray(labels))


def classification_accuracy(
    params: ModelParams,
    tokens: np.ndarray,
    labels: np.ndarray,
    embedding_hook: Optional[EmbeddingHook] = None,
) -> float:
    logits = classify_logits(params, tokens, embedding_hook=embedding_hook)
    return float(np.mean(np.argmax(logits.data, axis=-1) == np.asarray(labels)))


# -- accounting and conversion -------------------------------------------------------

def count_params(config: ModelConfig) -> ParamAudit:
    """Closed-form parameter audit of ``config``."""
    return audit(config)


def _clone(t: Tensor) -> Tensor:
    return parameter(t.data.copy(), name=t.name)


def convert_model(
    params: ModelParams, target: Union[str, AttentionVariant] = AttentionVariant.STANDARD
) -> ModelParams:
    """Copy of ``params`` with every attention layer rewritten in standard form.

    The conversion is exact (see ``factorize_to_standard``), so the converted
    model reproduces the hidden states of the original.

    Raises:
        ContractError: For targets other than standard, or pairwise sources.
    """
    target = AttentionVariant.parse(target)
    if target is not AttentionVariant.STANDARD:
        raise ContractError(f"models can only be converted to standard attention, not {target.value}")

    blocks = []
    for block in params.blocks:
        rest = {name: _clone(t) for name, t in _own_fields(block)}
        blocks.append(EncoderBlock(attention=factorize_to_standard(block.attention), **rest))

    token = _clone(params.token_embedding)
    converted = ModelParams(
        config=params.config.with_overrides(variant=AttentionVariant.STANDARD),
        token_embedding=token,
        position_embedding=_clone(params.position_embedding),
        emb_ln_gamma=_clone(params.emb_ln_gamma),
        emb_ln_beta=_clone(params.emb_ln_beta),
        blocks=blocks,
        steps_trained=params.steps_trained,
    )
    if params.mlm_head is not None:
        head = params.mlm_head
        tied = head.decoder is params.token_embedding
        converted.mlm_head = MLMHead(
            **{name: _clone(t) for name, t in _own_fields(head, skip=("decoder",))},
            decoder=token if tied else _clone(head.decoder),
        )
    if params.classifier is not None:
        converted.classifier = ClassifierHead(**{name: _clone(t) for name, t in _own_fields(params.classifier)})
    logger.info(f"Converted {params.config.variant.value} model with {len(blocks)} layers to standard attention")
    return converted
