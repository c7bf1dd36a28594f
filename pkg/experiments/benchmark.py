# experiments/benchmark.py
"""
Wall-clock timing of one encoder block, forward plus backward, per variant.

Variants share one input batch and are timed round-robin so drift in
machine load is spread evenly across them. Run single-threaded BLAS for
stable numbers (``run.py`` sets the thread environment before numpy loads).
"""

import logging
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from attention.variants import AttentionVariant
from audit.param_audit import macs_per_token
from config.settings import BenchConfig, ModelConfig
from core import functional as F
from core.tensor import Tape, Tensor, backward
from models.encoder import EncoderBlock, block_forward, init_block
from utils.rng import RngStreams

logger = logging.getLogger(__name__)


@dataclass
class BenchResult:
    variant: str
    d_model: int
    heads: int
    seq_len: int
    batch: int
    precision: str
    trials: int
    warmup: int
    mean_s: float
    std_s: float
    min_s: float
    projection_macs_per_token: int
    mac_ratio_vs_standard: float
    speedup_vs_standard: Optional[float] = None

    def to_dict(self) -> Dict:
        return asdict(self)


def _block_config(config: BenchConfig, variant: AttentionVariant) -> ModelConfig:
    return ModelConfig(
        layers=1,
        d_model=config.d_model,
        heads=config.heads,
        vocab_size=8,
        max_seq=config.seq_len,
        ffn_width=config.ffn_width,
        variant=variant,
        dropout_hidden=0.0,
        dropout_attn=0.0,
    )


def _step(block: EncoderBlock, x: Tensor, config: ModelConfig) -> None:
    with Tape():
        loss = F.mean(block_forward(block, x, config))
        backward(loss)


def _clear(block: EncoderBlock) -> None:
    for _, t in block.named_parameters():
        t.zero_grad()


def bench(config: BenchConfig) -> List[BenchResult]:
    """Time each variant in ``config.variants``.

    ``speedup_vs_standard`` is standard mean / variant mean and is only
    filled in when the standard variant is part of the run.
    """
    dtype = np.float32 if config.precision == "float32" else np.float64
    streams = RngStreams(config.seed)
    x = Tensor(
        streams.generator("bench-input").standard_normal((config.batch, config.seq_len, config.d_model)),
        dtype=dtype,
    )

    setups = {}
    for variant in config.variants:
        block_config = _block_config(config, variant)
        block = init_block(block_config, streams.generator("bench-init", list(AttentionVariant).index(variant)), dtype)
        setups[variant] = (block, block_config)

    for variant, (block, block_config) in setups.items():
        for _ in range(config.warmup):
            _step(block, x, block_config)
            _clear(block)

    samples: Dict[AttentionVariant, List[float]] = {v: [] for v in setups}
    for _ in range(config.trials):
        for variant, (block, block_config) in setups.items():
            start = time.perf_counter()
            _step(block, x, block_config)
            samples[variant].append(time.perf_counter() - start)
            _clear(block)

    standard_macs = macs_per_token(AttentionVariant.STANDARD, config.d_model, config.heads)
    means = {v: float(np.mean(s)) for v, s in samples.items()}
    standard_mean = means.get(AttentionVariant.STANDARD)
    if standard_mean is None:
        logger.warning("standard variant not benchmarked; speedup ratios left empty")

    results = []
    for variant, times in samples.items():
        macs = macs_per_token(variant, config.d_model, config.heads)
        result = BenchResult(
            variant=variant.value,
            d_model=config.d_model,
            heads=config.heads,
            seq_len=config.seq_len,
            batch=config.batch,
            precision=config.precision,
            trials=config.trials,
            warmup=config.warmup,
            mean_s=means[variant],
            std_s=float(np.std(times, ddof=1)) if len(times) > 1 else 0.0,
            min_s=float(np.min(times)),
            projection_macs_per_token=macs,
            mac_ratio_vs_standard=macs / standard_macs,
            speedup_vs_standard=None if standard_mean is None else standard_mean / means[variant],
        )
        results.append(result)
        logger.info(
            f"{variant.value}: {result.mean_s * 1e3:.2f} ms +/- {result.std_s * 1e3:.2f} ms "
            f"over {config.trials} trials"
        )
    return results
