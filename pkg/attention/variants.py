# attention/variants.py
"""Attention variant tags."""

from enum import Enum
from typing import List, Union

from config.errors import ConfigError


class AttentionVariant(str, Enum):
    """The five self-attention mechanisms compared by the library."""

    STANDARD = "standard"
    SYMMETRIC = "symmetric"
    PAIRWISE = "pairwise"
    PARTIAL_QK = "partial_qk"
    SHARED_QKV = "shared_qkv"

    @classmethod
    def parse(cls, value: Union[str, "AttentionVariant"]) -> "AttentionVariant":
        """Resolve a tag or one of its CLI aliases (``shared``, ``partial``)."""
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        key = _ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ConfigError(f"Unknown attention variant '{value}' (expected one of: {choices})")

    @classmethod
    def parse_list(cls, value: str) -> List["AttentionVariant"]:
        """Parse a comma separated list; ``all`` expands to every variant."""
        if value.strip().lower() == "all":
            return list(cls)
        return [cls.parse(part) for part in value.split(",") if part.strip()]


_ALIASES = {
    "shared": "shared_qkv",
    "full_qkv": "shared_qkv",
    "partial": "partial_qk",
    "sym": "symmetric",
    "std": "standard",
}

# Published projection-parameter expressions, bias excluded.
PROJECTION_EXPRESSIONS = {
    AttentionVariant.STANDARD: "3d^2",
    AttentionVariant.SYMMETRIC: "2d^2",
    AttentionVariant.PAIRWISE: "2d^2 + d^2/m",
    AttentionVariant.PARTIAL_QK: "2d^2 + d",
    AttentionVariant.SHARED_QKV: "d^2 + 3d",
}

# Published qualitative reduction column.
PUBLISHED_REDUCTION = {
    AttentionVariant.STANDARD: "0%",
    AttentionVariant.SYMMETRIC: "33%",
    AttentionVariant.PAIRWISE: "30-35%",
    AttentionVariant.PARTIAL_QK: "33%",
    AttentionVariant.SHARED_QKV: "66.67%",
}
