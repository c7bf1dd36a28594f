# experiments/gradcheck.py
"""
Central finite-difference checks of the autodiff gradients.

The check loss is ``sum(out * R)`` for a fixed random ``R``, so every output
element contributes with a distinct weight.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from attention.mechanism import attend
from attention.params import init_attention_params
from attention.variants import AttentionVariant
from config.settings import GradCheckConfig
from core import functional as F
from core.tensor import Tape, Tensor, backward, parameter
from utils.rng import RngStreams

logger = logging.getLogger(__name__)

DENOMINATOR_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOMINATOR_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denominator


def numerical_gradient(fn: Callable[[], float], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` with respect to every element of ``tensor``.

    ``tensor.data`` is perturbed in place and restored after each element.
    """
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn()
        flat[i] = original - step
        minus = fn()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * step)
    return grad


@dataclass
class GradCheckEntry:
    variant: str
    parameter: str
    size: int
    max_abs_error: float
    max_rel_error: float


@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry]
    tolerance: float

    @property
    def max_relative_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def merge(self, other: "GradCheckReport") -> "GradCheckReport":
        return GradCheckReport(entries=self.entries + other.entries, tolerance=min(self.tolerance, other.tolerance))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.__dict__ for e in self.entries],
                            columns=["variant", "parameter", "size", "max_abs_error", "max_rel_error"])


def check_tensors(
    label: str,
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tuple[str, Tensor]],
    step: float = 1e-5,
    tolerance: float = 1e-5,
) -> GradCheckReport:
    """Compare autodiff and finite-difference gradients of ``loss_fn`` for each tensor."""
    with Tape():
        loss = loss_fn()
        grads = backward(loss)

    def value() -> float:
        return loss_fn().item()

    entries = []
    for name, tensor in tensors:
        analytic = grads.get(tensor, np.zeros_like(tensor.data))
        numeric = numerical_gradient(value, tensor, step)
        entries.append(GradCheckEntry(
            variant=label,
            parameter=name,
            size=tensor.size,
            max_abs_error=float(np.max(np.abs(analytic - numeric))),
            max_rel_error=float(np.max(relative_error(analytic, numeric))),
        ))
        tensor.zero_grad()
    report = GradCheckReport(entries=entries, tolerance=tolerance)
    logger.info(f"gradcheck {label}: max relative error {report.max_relative_error:.3e}")
    return report


def grad_check(
    variant: Union[str, AttentionVariant],
    seq_len: int = 4,
    d_model: int = 16,
    heads: int = 2,
    seed: int = 0,
    bias: bool = False,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    include_input: bool = True,
) -> GradCheckReport:
    """Check every learnable of one attention layer (and its input) in double precision.

    Weights are drawn wider than the training initializer (std ``1/sqrt(d)``,
    diagonal jitter 0.3) so gradients are well away from zero.
    """
    variant = AttentionVariant.parse(variant)
    streams = RngStreams(seed)
    params = init_attention_params(
        variant,
        d_model,
        heads,
        bias=bias,
        rng=streams.generator("gradcheck-params", list(AttentionVariant).index(variant)),
        init_std=1.0 / np.sqrt(d_model),
        diag_jitter=0.3,
    )
    data_rng = streams.generator("gradcheck-data")
    x = parameter(data_rng.standard_normal((seq_len, d_model)), name="x")
    readout = Tensor(data_rng.standard_normal((seq_len, d_model)))

    def loss_fn() -> Tensor:
        return F.reduce_sum(F.mul(attend(params, x, heads).output, readout))

    tensors = list(params.named_parameters())
    if include_input:
        tensors.append(("x", x))
    return check_tensors(variant.value, loss_fn, tensors, step, tolerance)


def linear_grad_check(seed: int = 0, step: float = 1e-3, tolerance: float = 1e-9) -> GradCheckReport:
    """Two stacked linear maps.

    The loss is linear in each tensor on its own, so central differences are
    exact up to rounding for any step; a larger step keeps rounding small.
    """
    rng = RngStreams(seed).generator("gradcheck-linear")
    x = Tensor(rng.standard_normal((5, 4)))
    w1 = parameter(rng.standard_normal((4, 3)), name="w1")
    w2 = parameter(rng.standard_normal((3, 2)), name="w2")
    bias = parameter(rng.standard_normal(2), name="b")
    readout = Tensor(rng.standard_normal((5, 2)))

    def loss_fn() -> Tensor:
        return F.reduce_sum(F.mul(F.add(F.matmul(F.matmul(x, w1), w2), bias), readout))

    return check_tensors("linear", loss_fn, [("w1", w1), ("w2", w2), ("b", bias)], step, tolerance)


def run_grad_checks(config: GradCheckConfig) -> GradCheckReport:
    """Every configured variant at the configured shape."""
    report: Optional[GradCheckReport] = None
    for variant in config.variants:
        single = grad_check(
            variant,
            seq_len=config.seq_len,
            d_model=config.d_model,
            heads=config.heads,
            seed=config.seed,
            bias=config.bias,
            step=config.step,
            tolerance=config.tolerance,
        )
        report = single if report is None else report.merge(single)
    return report if report is not None else GradCheckReport(entries=[], tolerance=config.tolerance)
