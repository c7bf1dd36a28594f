# attention/params.py
"""
Learnable parameters of each attention variant.

One dataclass per variant holds exactly the tensors that variant defines,
in declaration order (projection tensors first, output projection last).
Closed-form counts and the exact conversion of tied/shared variants into
the standard three-matrix form live here as well.
"""

import logging
from dataclasses import dataclass, fields
from typing import Callable, ClassVar, List, Optional, Tuple, Union

import numpy as np

from attention.variants import AttentionVariant
from config.errors import ConfigError, ContractError, DimensionError
from core import functional as F
from core.tensor import Tensor, parameter
from utils.rng import Initializer

logger = logging.getLogger(__name__)

ArrayFactory = Callable[[str, Tuple[int, ...], str], np.ndarray]
Projections = Tuple[Tensor, Tensor, Tensor]

OUTPUT_FIELDS = ("w_o", "b_o")


def _linear(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    out = F.matmul(x, weight)
    return out if bias is None else F.add(out, bias)


@dataclass
class AttentionParams:
    """Base container; subclasses declare the variant's tensors as fields."""

    variant: ClassVar[AttentionVariant]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = []
        for spec in fields(self):
            value = getattr(self, spec.name)
            if value is not None:
                named.append((spec.name, value))
        return named

    def projection_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if n not in OUTPUT_FIELDS]

    @property
    def d_model(self) -> int:
        return self.w_o.shape[0]

    @property
    def has_bias(self) -> bool:
        return self.b_o is not None

    def _check_width(self, x: Tensor) -> None:
        if x.ndim < 2 or x.shape[-1] != self.d_model:
            raise DimensionError.mismatch(f"{self.variant.value} project", x.shape, (self.d_model, self.d_model))

    def project(self, x: Tensor) -> Projections:
        raise NotImplementedError


@dataclass
class StandardParams(AttentionParams):
    variant: ClassVar[AttentionVariant] = AttentionVariant.STANDARD

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    b_q: Optional[Tensor]
    b_k: Optional[Tensor]
    b_v: Optional[Tensor]
    w_o: Tensor
    b_o: Optional[Tensor]

    def project(self, x: Tensor) -> Projections:
        self._check_width(x)
        return _linear(x, self.w_q, self.b_q), _linear(x, self.w_k, self.b_k), _linear(x, self.w_v, self.b_v)


@dataclass
class SymmetricParams(AttentionParams):
    """Q and K share one matrix, so the score matrix is symmetric."""

    variant: ClassVar[AttentionVariant] = AttentionVariant.SYMMETRIC

    w_qk: Tensor
    w_v: Tensor
    b_qk: Optional[Tensor]
    b_v: Optional[Tensor]
    w_o: Tensor
    b_o: Optional[Tensor]

    def project(self, x: Tensor) -> Projections:
        self._check_width(x)
        qk = _linear(x, self.w_qk, self.b_qk)
        return qk, qk, _linear(x, self.w_v, self.b_v)


@dataclass
class PairwiseParams(AttentionParams):
    """Tied Q/K plus one bilinear factor ``u[h]`` of shape (d/m, d/m) per head."""

    variant: ClassVar[AttentionVariant] = AttentionVariant.PAIRWISE

    w_qk: Tensor
    w_v: Tensor
    u: Tensor
    b_qk: Optional[Tensor]
    b_v: Optional[Tensor]
    w_o: Tensor
    b_o: Optional[Tensor]

    @property
    def heads(self) -> int:
        return self.u.shape[0]

    def project(self, x: Tensor) -> Projections:
        self._check_width(x)
        qk = _linear(x, self.w_qk, self.b_qk)
        return qk, qk, _linear(x, self.w_v, self.b_v)


@dataclass
class PartialQKParams(AttentionParams):
    """Tied Q/K where K additionally gets a learned per-column scale."""

    variant: ClassVar[AttentionVariant] = AttentionVariant.PARTIAL_QK

    w_qk: Tensor
    w_v: Tensor
    k_scale: Tensor
    b_qk: Optional[Tensor]
    b_v: Optional[Tensor]
    w_o: Tensor
    b_o: Optional[Tensor]

    def project(self, x: Tensor) -> Projections:
        self._check_width(x)
        q = _linear(x, self.w_qk, self.b_qk)
        return q, F.diag_scale(q, self.k_scale), _linear(x, self.w_v, self.b_v)


@dataclass
class SharedQKVParams(AttentionParams):
    """One shared matrix ``w_s``; Q, K and V are diagonal rescalings of ``X @ w_s``."""

    variant: ClassVar[AttentionVariant] = AttentionVariant.SHARED_QKV

    w_s: Tensor
    d_q: Tensor
    d_k: Tensor
    d_v: Tensor
    b_s: Optional[Tensor]
    w_o: Tensor
    b_o: Optional[Tensor]

    def project(self, x: Tensor) -> Projections:
        self._check_width(x)
        shared = _linear(x, self.w_s, self.b_s)
        return F.diag_scale(shared, self.d_q), F.diag_scale(shared, self.d_k), F.diag_scale(shared, self.d_v)


PARAMS_BY_VARIANT = {
    cls.variant: cls
    for cls in (StandardParams, SymmetricParams, PairwiseParams, PartialQKParams, SharedQKVParams)
}


def _check_heads(d_model: int, heads: int) -> None:
    if heads < 1 or d_model % heads != 0:
        raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")


def build_attention_params(
    variant: Union[str, AttentionVariant],
    d_model: int,
    heads: int,
    bias: bool,
    make: ArrayFactory,
    prefix: str = "",
) -> AttentionParams:
    """Allocate one variant's tensors through an array factory.

    ``make(name, shape, kind)`` returns the initial array for each tensor;
    random initialization and checkpoint loading both go through here so
    the tensor names and shapes have a single definition.
    """
    variant = AttentionVariant.parse(variant)
    _check_heads(d_model, heads)
    d, head_dim = d_model, d_model // heads

    def tensor(name: str, shape: Tuple[int, ...], kind: str) -> Tensor:
        full = prefix + name
        return parameter(make(full, shape, kind), name=full)

    def bias_vector(name: str) -> Optional[Tensor]:
        return tensor(name, (d,), "zeros") if bias else None

    if variant is AttentionVariant.STANDARD:
        body = dict(
            w_q=tensor("w_q", (d, d), "normal"),
            w_k=tensor("w_k", (d, d), "normal"),
            w_v=tensor("w_v", (d, d), "normal"),
            b_q=bias_vector("b_q"),
            b_k=bias_vector("b_k"),
            b_v=bias_vector("b_v"),
        )
    elif variant is AttentionVariant.SHARED_QKV:
        body = dict(
            w_s=tensor("w_s", (d, d), "normal"),
            d_q=tensor("d_q", (d,), "diag"),
            d_k=tensor("d_k", (d,), "diag"),
            d_v=tensor("d_v", (d,), "diag"),
            b_s=bias_vector("b_s"),
        )
    else:
        body = dict(w_qk=tensor("w_qk", (d, d), "normal"), w_v=tensor("w_v", (d, d), "normal"))
        if variant is AttentionVariant.PAIRWISE:
            body["u"] = tensor("u", (heads, head_dim, head_dim), "eye")
        elif variant is AttentionVariant.PARTIAL_QK:
            body["k_scale"] = tensor("k_scale", (d,), "diag")
        body.update(b_qk=bias_vector("b_qk"), b_v=bias_vector("b_v"))

    body.update(w_o=tensor("w_o", (d, d), "normal"), b_o=bias_vector("b_o"))
    return PARAMS_BY_VARIANT[variant](**body)


def init_attention_params(
    variant: Union[str, AttentionVariant],
    d_model: int,
    heads: int,
    bias: bool = False,
    rng: Optional[np.random.Generator] = None,
    init_std: float = 0.02,
    diag_jitter: float = 0.02,
    dtype: np.dtype = np.float64,
) -> AttentionParams:
    """Randomly initialized parameters for one attention layer.

    Matrices are truncated-normal (std ``init_std``), diagonals and the
    key scale start at one plus N(0, ``diag_jitter``^2), pairwise factors
    at identity plus the same jitter, biases at zero.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    make = Initializer(rng, init_std=init_std, diag_jitter=diag_jitter, dtype=dtype)
    return build_attention_params(variant, d_model, heads, bias, make)


def count_projection_params(
    variant: Union[str, AttentionVariant], d_model: int, heads: int, bias: bool = False
) -> int:
    """Closed-form learnable count of the Q/K/V projection portion.

    Standard 3d^2, Symmetric 2d^2, Pairwise 2d^2 + d^2/m, PartialQK
    2d^2 + d, SharedQKV d^2 + 3d; biases add 3d, 2d, 2d, 2d and d.
    """
    variant = AttentionVariant.parse(variant)
    _check_heads(d_model, heads)
    d = d_model
    weights = {
        AttentionVariant.STANDARD: 3 * d * d,
        AttentionVariant.SYMMETRIC: 2 * d * d,
        AttentionVariant.PAIRWISE: 2 * d * d + d * (d // heads),
        AttentionVariant.PARTIAL_QK: 2 * d * d + d,
        AttentionVariant.SHARED_QKV: d * d + 3 * d,
    }[variant]
    biases = {
        AttentionVariant.STANDARD: 3 * d,
        AttentionVariant.SHARED_QKV: d,
    }.get(variant, 2 * d)
    return weights + (biases if bias else 0)


def count_output_params(d_model: int, bias: bool = False) -> int:
    return d_model * d_model + (d_model if bias else 0)


def enumerate_learnables(params: AttentionParams, include_output: bool = False) -> int:
    """Count the scalars actually held by ``params``."""
    named = params.named_parameters() if include_output else params.projection_parameters()
    return sum(t.size for _, t in named)


def _copy(t: Optional[Tensor], name: str) -> Optional[Tensor]:
    return None if t is None else parameter(t.data.copy(), name=name)


def _scaled(weight: Tensor, diag: Tensor, name: str) -> Tensor:
    # W @ Diag(v) scales column j by v[j]
    return parameter(weight.data * diag.data, name=name)


def _scaled_bias(b: Optional[Tensor], diag: Tensor, name: str) -> Optional[Tensor]:
    return None if b is None else parameter(b.data * diag.data, name=name)


def factorize_to_standard(params: AttentionParams) -> StandardParams:
    """Rewrite tied or shared parameters as an equivalent standard layer.

    SharedQKV becomes ``W_q = W_s Diag(d_q)`` (and likewise for K and V,
    with ``b_q = b_s * d_q``); Symmetric copies the tied matrix into both
    roles; PartialQK folds the key scale into ``W_k``. Returned tensors are
    fresh copies.

    Raises:
        ContractError: For pairwise attention, whose bilinear factor has no
            standard-form equivalent.
    """
    if isinstance(params, StandardParams):
        return StandardParams(
            **{name: _copy(getattr(params, name), name) for name in (f.name for f in fields(params))}
        )
    if isinstance(params, PairwiseParams):
        raise ContractError("pairwise attention has no exact standard-form equivalent")

    if isinstance(params, SharedQKVParams):
        body = dict(
            w_q=_scaled(params.w_s, params.d_q, "w_q"),
            w_k=_scaled(params.w_s, params.d_k, "w_k"),
            w_v=_scaled(params.w_s, params.d_v, "w_v"),
            b_q=_scaled_bias(params.b_s, params.d_q, "b_q"),
            b_k=_scaled_bias(params.b_s, params.d_k, "b_k"),
            b_v=_scaled_bias(params.b_s, params.d_v, "b_v"),
        )
    elif isinstance(params, PartialQKParams):
        body = dict(
            w_q=_copy(params.w_qk, "w_q"),
            w_k=_scaled(params.w_qk, params.k_scale, "w_k"),
            w_v=_copy(params.w_v, "w_v"),
            b_q=_copy(params.b_qk, "b_q"),
            b_k=_scaled_bias(params.b_qk, params.k_scale, "b_k"),
            b_v=_copy(params.b_v, "b_v"),
        )
    else:
        body = dict(
            w_q=_copy(params.w_qk, "w_q"),
            w_k=_copy(params.w_qk, "w_k"),
            w_v=_copy(params.w_v, "w_v"),
            b_q=_copy(params.b_qk, "b_q"),
            b_k=_copy(params.b_qk, "b_k"),
            b_v=_copy(params.b_v, "b_v"),
        )
    body.update(w_o=_copy(params.w_o, "w_o"), b_o=_copy(params.b_o, "b_o"))
    logger.debug(f"factorized {params.variant.value} attention into standard form")
    return StandardParams(**body)
