# experiments/training.py
"""
Toy-scale training with Adam (decoupled weight decay).

Every random draw (init, batches, masks, dropout, train-time noise) comes
from its own named stream of the run seed, so a run is a pure function of
its configs.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

from config.errors import NumericError, RunError
from config.settings import ModelConfig, NoiseSpec, TrainConfig
from core.tensor import Tape, Tensor, backward
from experiments.noise import inject_noise
from models.encoder import (
    ModelParams,
    classification_accuracy,
    classification_loss,
    init_model,
    mask_tokens,
    masked_lm_loss,
    mlm_accuracy,
)
from utils.rng import RngStreams
from utils.task_simulator import TaskSimulator

logger = logging.getLogger(__name__)


class AdamW:
    """Adam with bias correction and decoupled weight decay on matrices only.

    Biases, layer-norm parameters and diagonal scalings (every tensor with
    fewer than two axes) are not decayed.
    """

    def __init__(
        self,
        params: List[Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


def clip_grad_norm(params: List[Tensor], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                # gradient arrays may be shared between leaves; never scale in place
                p.grad = p.grad * factor
    return total


def learning_rate(config: TrainConfig, step: int) -> float:
    """Constant, or linear warmup then linear decay to zero (0-based ``step``)."""
    if config.schedule == "constant":
        return config.lr
    if config.warmup_steps and step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    remaining = config.steps - config.warmup_steps
    if remaining <= 0:
        return config.lr
    return config.lr * max(0.0, (config.steps - step) / remaining)


@dataclass
class TrainResult:
    params: ModelParams
    losses: List[float]
    learning_rates: List[float]
    config: TrainConfig
    model_config: ModelConfig
    grad_norms: List[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "step": np.arange(1, len(self.losses) + 1),
            "loss": self.losses,
            "lr": self.learning_rates,
            "grad_norm": self.grad_norms,
        })


def make_task(train_config: TrainConfig, model_config: ModelConfig) -> TaskSimulator:
    return TaskSimulator(
        train_config.task,
        vocab_size=model_config.vocab_size,
        seq_len=train_config.seq_len,
        num_classes=model_config.num_classes,
        seed=train_config.seed,
        corpus_path=train_config.corpus_path,
    )


def train(
    config: TrainConfig,
    model_config: ModelConfig,
    params: Optional[ModelParams] = None,
) -> TrainResult:
    """Train an encoder on ``config.task``.

    The classification task needs ``model_config.head == "classify"``; the
    token tasks train the masked-LM head.

    Raises:
        RunError: If the loss becomes non-finite; ``step`` is the 1-based step.
    """
    if config.task == "toy-classify" and model_config.head != "classify":
        model_config = model_config.with_overrides(head="classify")
    streams = RngStreams(config.seed)
    if params is None:
        params = init_model(model_config, streams.generator("init"))
    task = make_task(config, model_config)

    batch_rng = streams.generator("batches")
    mask_rng = streams.generator("masks")
    dropout_rng = streams.generator("dropout")
    noise_streams = streams if config.noise_seed is None else RngStreams(config.noise_seed)
    noise_rng = noise_streams.generator("train-noise")

    hook = None
    if config.noise_at_train > 0.0:
        spec = NoiseSpec(level=config.noise_at_train, seed=config.seed)
        hook = lambda x: inject_noise(x, spec, rng=noise_rng)  # noqa: E731

    tensors = params.parameters()
    optimizer = AdamW(
        tensors,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    losses: List[float] = []
    rates: List[float] = []
    norms: List[float] = []
    logger.info(
        f"Training {model_config.variant.value} on '{config.task}' for {config.steps} steps "
        f"(batch={config.batch}, lr={config.lr}, schedule={config.schedule})"
    )

    for step in range(config.steps):
        batch = task.sample(config.batch, batch_rng)
        params.zero_grad()
        with Tape():
            try:
                if task.is_classification:
                    loss = classification_loss(
                        params, batch.tokens, batch.labels, training=True, rng=dropout_rng, embedding_hook=hook
                    )
                else:
                    masked = mask_tokens(batch.tokens, config.mask_ratio, mask_rng, model_config.mask_token_id)
                    loss = masked_lm_loss(params, masked, training=True, rng=dropout_rng, embedding_hook=hook)
            except NumericError as e:
                logger.error(f"Non-finite activations at step {step + 1}: {e}")
                raise RunError(f"non-finite activations at step {step + 1}", step=step + 1)
            value = loss.item()
            if not math.isfinite(value):
                logger.error(f"Loss diverged at step {step + 1}: {value}")
                raise RunError(f"loss became {value} at step {step + 1}", step=step + 1)
            backward(loss)

        norm = clip_grad_norm(tensors, config.grad_clip) if config.grad_clip else math.nan
        lr = learning_rate(config, step)
        optimizer.step(lr)
        params.steps_trained += 1

        losses.append(value)
        rates.append(lr)
        norms.append(norm)
        if (step + 1) % config.log_interval == 0 or step == 0:
            logger.info(f"step {step + 1}/{config.steps} loss={value:.4f} lr={lr:.2e}")

    params.zero_grad()
    return TrainResult(
        params=params,
        losses=losses,
        learning_rates=rates,
        config=config,
        model_config=params.config,
        grad_norms=norms,
    )


def evaluate_accuracy(
    params: ModelParams,
    task: TaskSimulator,
    examples: int = 256,
    seed: int = 0,
    mask_ratio: float = 0.15,
) -> float:
    """Argmax accuracy on a fixed evaluation draw of ``task``."""
    streams = RngStreams(seed)
    batch = task.sample(examples, streams.generator("eval-data"))
    if task.is_classification:
        return classification_accuracy(params, batch.tokens, batch.labels)
    masked = mask_tokens(batch.tokens, mask_ratio, streams.generator("eval-masks"), params.config.mask_token_id)
    return mlm_accuracy(params, masked)
