# config/errors.py
"""Error hierarchy shared by every attnforge package.

Each error also derives from the closest builtin so callers that only
know about ``ValueError`` / ``RuntimeError`` keep working.
"""

from typing import Optional, Sequence


class AttnForgeError(Exception):
    """Base class for all attnforge errors."""


class DimensionError(AttnForgeError, ValueError):
    """Operand shapes do not agree."""

    @classmethod
    def mismatch(cls, op: str, *shapes: Sequence[int]) -> "DimensionError":
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        return cls(f"{op}: incompatible shapes {rendered}")


class ContractError(AttnForgeError, ValueError):
    """A caller violated an operation's precondition."""


class TapeError(AttnForgeError, RuntimeError):
    """Backward pass requested on a detached or already consumed tape."""


class ConfigError(AttnForgeError, ValueError):
    """Invalid configuration value."""


class InputError(AttnForgeError, ValueError):
    """Invalid model input (token ids, sequence length, masking)."""


class NumericError(AttnForgeError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class CheckpointError(AttnForgeError, ValueError):
    """Malformed or incompatible checkpoint file."""


class RunError(AttnForgeError, RuntimeError):
    """A training run diverged."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step
