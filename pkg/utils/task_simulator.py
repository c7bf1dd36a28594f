# utils/task_simulator.py
"""
Synthetic token tasks for toy-scale training and evaluation.

copy          second half of each sequence repeats the first half
reversal      second half is the first half reversed
mlm-synthetic Markov chain with a fixed successor table (or windows of a text corpus)
toy-classify  tokens drawn mostly from the cluster of the sequence's label
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from config.errors import ConfigError, InputError
from models.tokenizer import NUM_SPECIAL, ToyTokenizer
from utils.rng import RngStreams

logger = logging.getLogger(__name__)


@dataclass
class TaskBatch:
    tokens: np.ndarray
    labels: Optional[np.ndarray] = None


class TaskSimulator:
    """Draws batches of one synthetic task; structure is fixed by ``seed``."""

    TASKS = ("copy", "reversal", "mlm-synthetic", "toy-classify")

    def __init__(
        self,
        task: str,
        vocab_size: int,
        seq_len: int,
        num_classes: int = 2,
        seed: int = 0,
        corpus_path: Optional[str] = None,
    ):
        if task not in self.TASKS:
            raise ConfigError(f"Unknown task '{task}' (expected one of {self.TASKS})")
        if vocab_size <= NUM_SPECIAL + 1:
            raise ConfigError(f"vocab_size={vocab_size} leaves no room for content tokens")
        if seq_len < 2:
            raise InputError(f"seq_len={seq_len} is too short for a token task")

        self.task = task
        self.vocab_size = vocab_size
        self.seq_len = seq_len
        self.num_classes = num_classes
        self.content = vocab_size - NUM_SPECIAL  # ids below NUM_SPECIAL are reserved

        structure = RngStreams(seed).generator("task-structure", self.TASKS.index(task))

        # Markov chain: follow the successor table with this probability
        self.follow_prob = 0.9
        self.successor = structure.permutation(self.content)

        # Cluster classification: share of tokens drawn from the label's cluster
        self.purity = 0.6
        self.cluster_of = structure.integers(0, num_classes, size=self.content)
        self.clusters = [np.flatnonzero(self.cluster_of == c) for c in range(num_classes)]
        for c, members in enumerate(self.clusters):
            if members.size == 0:
                self.clusters[c] = np.array([c % self.content])

        self.corpus: Optional[np.ndarray] = None
        if corpus_path is not None:
            self.corpus = self._load_corpus(corpus_path)

    @property
    def is_classification(self) -> bool:
        return self.task == "toy-classify"

    def _load_corpus(self, path: str) -> np.ndarray:
        text = Path(path).read_text(encoding="utf-8")
        tokenizer = ToyTokenizer.fit([text], max_vocab=self.vocab_size)
        ids = np.asarray(tokenizer.encode(text), dtype=np.int64)
        if ids.size < self.seq_len:
            raise InputError(f"corpus {path} has {ids.size} tokens, fewer than seq_len={self.seq_len}")
        logger.info(f"Loaded corpus {path}: {ids.size} tokens, vocabulary {tokenizer.vocab_size}")
        return ids

    def sample(self, batch: int, rng: np.random.Generator) -> TaskBatch:
        """Draw ``batch`` sequences of length ``seq_len``."""
        if self.task == "copy":
            return TaskBatch(tokens=self._mirrored(batch, rng, reverse=False))
        if self.task == "reversal":
            return TaskBatch(tokens=self._mirrored(batch, rng, reverse=True))
        if self.task == "mlm-synthetic":
            if self.corpus is not None:
                return TaskBatch(tokens=self._corpus_windows(batch, rng))
            return TaskBatch(tokens=self._markov(batch, rng))
        return self._clustered(batch, rng)

    # Copy / reversal: a random first half, echoed in the second half
    def _mirrored(self, batch: int, rng: np.random.Generator, reverse: bool) -> np.ndarray:
        half = self.seq_len // 2
        tokens = self._random_tokens(rng, (batch, self.seq_len))
        first = tokens[:, :half]
        tokens[:, half:2 * half] = first[:, ::-1] if reverse else first
        return tokens

    def _markov(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        states = np.empty((batch, self.seq_len), dtype=np.int64)
        states[:, 0] = rng.integers(0, self.content, size=batch)
        follow = rng.random((batch, self.seq_len)) < self.follow_prob
        jumps = rng.integers(0, self.content, size=(batch, self.seq_len))
        for t in range(1, self.seq_len):
            states[:, t] = np.where(follow[:, t], self.successor[states[:, t - 1]], jumps[:, t])
        return states + NUM_SPECIAL

    def _corpus_windows(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        starts = rng.integers(0, self.corpus.size - self.seq_len + 1, size=batch)
        windows = np.stack([self.corpus[s:s + self.seq_len] for s in starts])
        return np.minimum(windows, self.vocab_size - 1)

    def _clustered(self, batch: int, rng: np.random.Generator) -> TaskBatch:
        labels = rng.integers(0, self.num_classes, size=batch)
        tokens = self._random_tokens(rng, (batch, self.seq_len))
        from_cluster = rng.random((batch, self.seq_len)) < self.purity
        for row, label in enumerate(labels):
            members = self.clusters[label]
            picks = members[rng.integers(0, members.size, size=self.seq_len)] + NUM_SPECIAL
            tokens[row] = np.where(from_cluster[row], picks, tokens[row])
        return TaskBatch(tokens=tokens, labels=labels)

    def _random_tokens(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.integers(NUM_SPECIAL, self.vocab_size, size=shape, dtype=np.int64)
