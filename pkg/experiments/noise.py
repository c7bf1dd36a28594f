# experiments/noise.py
"""
Embedding-noise robustness.

Noise is spherical Gaussian with per-element std ``rho * mu / sqrt(d)``,
where ``mu`` is the mean L2 norm of the embedding rows, so a noise row has
expected norm close to ``rho * mu``.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config.errors import ConfigError, ContractError
from config.settings import NoiseSpec
from core import functional as F
from core.tensor import Tensor
from models.encoder import MaskedBatch, ModelParams, classification_accuracy, mask_tokens, mlm_accuracy
from utils.rng import RngStreams
from utils.task_simulator import TaskBatch, TaskSimulator

logger = logging.getLogger(__name__)

MAX_LEVEL = 0.40


def _check_level(level: float) -> None:
    if not 0.0 <= level <= MAX_LEVEL:
        raise ConfigError(f"noise level {level} outside [0, {MAX_LEVEL}]")


def sample_noise(data: np.ndarray, level: float, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Noise array for ``data`` (``(..., d)``) and the mean row norm it was scaled by."""
    width = data.shape[-1]
    mean_norm = float(np.linalg.norm(data.reshape(-1, width), axis=1).mean())
    sigma = level * mean_norm / np.sqrt(width)
    return rng.standard_normal(data.shape) * sigma, mean_norm


def inject_noise(
    embeddings: Tensor, spec: NoiseSpec, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Add embedding noise at level ``spec.level``.

    Level 0 returns ``embeddings`` itself. Without ``rng`` the noise is drawn
    from a stream keyed by ``spec.seed``. The sum is recorded on the active
    tape, so gradients pass through when noise is used during training.

    Raises:
        ConfigError: If the level is outside [0, 0.40].
    """
    _check_level(spec.level)
    if spec.level == 0.0:
        return embeddings
    rng = rng if rng is not None else RngStreams(spec.seed).generator("noise")
    noise, _ = sample_noise(embeddings.data, spec.level, rng)
    return F.add(embeddings, Tensor(noise.astype(embeddings.dtype, copy=False)))


def noise_row_norm_ratio(embeddings: np.ndarray, spec: NoiseSpec) -> float:
    """Mean L2 norm of the sampled noise rows divided by the mean embedding row norm."""
    _check_level(spec.level)
    data = np.asarray(embeddings, dtype=np.float64)
    noise, mean_norm = sample_noise(data, spec.level, RngStreams(spec.seed).generator("noise"))
    return float(np.linalg.norm(noise.reshape(-1, data.shape[-1]), axis=1).mean() / mean_norm)


class NoiseEvaluator:
    """Accuracy of one trained model on a fixed evaluation set under embedding noise.

    Masked-LM positions come from one fixed stream, so models with different
    ``mask_token_id`` values are scored on the same positions.
    """

    def __init__(self, task: TaskSimulator, eval_examples: int, seed: int, mask_ratio: float = 0.15):
        self.streams = RngStreams(seed)
        self.task = task
        self.mask_ratio = mask_ratio
        self.batch: TaskBatch = task.sample(eval_examples, self.streams.generator("eval-data"))
        self._masked: Dict[int, MaskedBatch] = {}

    def masked(self, mask_token_id: int) -> MaskedBatch:
        if mask_token_id not in self._masked:
            self._masked[mask_token_id] = mask_tokens(
                self.batch.tokens, self.mask_ratio, self.streams.generator("eval-masks"), mask_token_id
            )
        return self._masked[mask_token_id]

    def accuracy(self, params: ModelParams, level: float = 0.0, noise_seed: int = 0) -> float:
        hook = None
        if level > 0.0:
            spec = NoiseSpec(level=level, seed=noise_seed)
            hook = lambda x: inject_noise(x, spec)  # noqa: E731
        if self.task.is_classification:
            return classification_accuracy(params, self.batch.tokens, self.batch.labels, embedding_hook=hook)
        return mlm_accuracy(params, self.masked(params.config.mask_token_id), embedding_hook=hook)


def robustness_sweep(
    model_a: ModelParams,
    model_b: ModelParams,
    task: TaskSimulator,
    levels: Sequence[float],
    seeds: int = 5,
    eval_examples: int = 256,
    seed: int = 0,
    threads: int = 1,
) -> pd.DataFrame:
    """Seed-averaged accuracy of two models per noise level.

    Every (model, level, noise seed) cell evaluates the same fixed examples,
    so level 0 reproduces clean accuracy exactly. Cells are independent and
    run on a thread pool when ``threads > 1``.

    Returns:
        DataFrame with columns ``level, acc_a, acc_b``.

    Raises:
        ContractError: If either model has not been trained.
        ConfigError: If a level is outside [0, 0.40].
    """
    for label, model in (("model_a", model_a), ("model_b", model_b)):
        if model.steps_trained == 0:
            raise ContractError(f"{label} is untrained; train it before a robustness sweep")
    for level in levels:
        _check_level(level)

    evaluator = NoiseEvaluator(task, eval_examples, seed)
    streams = RngStreams(seed)
    cells = [
        (which, level, s)
        for level in levels
        for which in ("a", "b")
        for s in range(seeds)
    ]
    models = {"a": model_a, "b": model_b}

    def run(cell) -> float:
        which, level, s = cell
        noise_seed = int(streams.seed_sequence("sweep-noise", s).generate_state(1)[0])
        return evaluator.accuracy(models[which], level, noise_seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(run, cells))
    else:
        scores = [run(cell) for cell in cells]

    table: Dict[Tuple[str, float], List[float]] = {}
    for (which, level, _), score in zip(cells, scores):
        table.setdefault((which, level), []).append(score)

    rows = []
    for level in levels:
        rows.append({
            "level": level,
            "acc_a": float(np.mean(table[("a", level)])),
            "acc_b": float(np.mean(table[("b", level)])),
        })
        logger.info(f"noise level {level:.2f}: acc_a={rows[-1]['acc_a']:.4f} acc_b={rows[-1]['acc_b']:.4f}")
    return pd.DataFrame(rows, columns=["level", "acc_a", "acc_b"])
