# experiments/transfer.py
"""Cross-task transfer at toy scale: train on one token task, evaluate on every other."""

import logging
from typing import Sequence

import pandas as pd

from config.errors import ConfigError
from config.settings import ModelConfig, TrainConfig
from experiments.training import evaluate_accuracy, make_task, train

logger = logging.getLogger(__name__)

TOKEN_TASKS = ("copy", "reversal", "mlm-synthetic")


def transfer_matrix(
    model_config: ModelConfig,
    train_config: TrainConfig,
    tasks: Sequence[str] = TOKEN_TASKS,
    eval_examples: int = 256,
) -> pd.DataFrame:
    """Masked-token accuracy of a model trained on each task, evaluated on each task.

    Returns:
        Long-format DataFrame with columns ``variant, train_task, eval_task, accuracy``.
    """
    for task in tasks:
        if task not in TOKEN_TASKS:
            raise ConfigError(f"transfer runs on masked-token tasks {TOKEN_TASKS}, got '{task}'")

    evaluators = {
        task: make_task(train_config.model_copy(update={"task": task}), model_config) for task in tasks
    }
    rows = []
    for source in tasks:
        result = train(train_config.model_copy(update={"task": source}), model_config)
        for target in tasks:
            accuracy = evaluate_accuracy(
                result.params, evaluators[target], eval_examples, seed=train_config.seed,
                mask_ratio=train_config.mask_ratio,
            )
            rows.append({
                "variant": model_config.variant.value,
                "train_task": source,
                "eval_task": target,
                "accuracy": accuracy,
            })
            logger.info(f"{source} -> {target}: accuracy {accuracy:.4f}")
    return pd.DataFrame(rows, columns=["variant", "train_task", "eval_task", "accuracy"])
