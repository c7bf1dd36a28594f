# utils/rng.py
"""
Seeded randomness for every harness.

One root seed fans out into named child streams. Each stream is a
``np.random.Generator`` over the counter-based Philox bit generator, keyed
by ``(seed, crc32(name), *index)``, so a stream can be rebuilt on its own
without replaying the draws of any other stream.
"""

import zlib
from typing import Tuple

import numpy as np
from scipy.stats import truncnorm


class RngStreams:
    """Named, independent generators derived from one root seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def seed_sequence(self, name: str, *index: int) -> np.random.SeedSequence:
        key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in index)
        return np.random.SeedSequence(self.seed, spawn_key=key)

    def generator(self, name: str, *index: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self.seed_sequence(name, *index)))


def truncated_normal(
    rng: np.random.Generator,
    shape: Tuple[int, ...],
    std: float = 0.02,
    dtype: np.dtype = np.float64,
) -> np.ndarray:
    """BERT initializer: N(0, std^2) truncated at two standard deviations."""
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=dtype).reshape(shape)


class Initializer:
    """Array factory used when a model is built from scratch.

    Called as ``init(name, shape, kind)``; ``kind`` is one of ``normal``,
    ``zeros``, ``ones``, ``diag`` (ones plus Gaussian jitter) or ``eye``
    (stack of identities plus jitter, for per-head bilinear factors).
    """

    def __init__(
        self,
        rng: np.random.Generator,
        init_std: float = 0.02,
        diag_jitter: float = 0.02,
        dtype: np.dtype = np.float64,
    ):
        self.rng = rng
        self.init_std = init_std
        self.diag_jitter = diag_jitter
        self.dtype = dtype

    def __call__(self, name: str, shape: Tuple[int, ...], kind: str) -> np.ndarray:
        if kind == "normal":
            return truncated_normal(self.rng, shape, self.init_std, self.dtype)
        if kind == "zeros":
            return np.zeros(shape, dtype=self.dtype)
        if kind == "ones":
            return np.ones(shape, dtype=self.dtype)
        if kind == "diag":
            jitter = self.diag_jitter * self.rng.standard_normal(shape)
            return (1.0 + jitter).astype(self.dtype)
        if kind == "eye":
            eye = np.broadcast_to(np.eye(shape[-1]), shape)
            jitter = self.diag_jitter * self.rng.standard_normal(shape)
            return (eye + jitter).astype(self.dtype)
        raise ValueError(f"unknown initializer kind '{kind}' for {name}")
