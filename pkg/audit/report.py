# audit/report.py
"""Audit tables for the CLI: one row per variant, CSV or text."""

from typing import Iterable, List

import pandas as pd

from attention.variants import PROJECTION_EXPRESSIONS, PUBLISHED_REDUCTION, AttentionVariant
from audit.param_audit import ParamAudit, audit, truncate_pct
from config.settings import ModelConfig

COLUMNS = [
    "variant",
    "expression",
    "projection_params",
    "projection_reduction_pct",
    "published_reduction",
    "output_params",
    "ffn_params",
    "norm_params",
    "embedding_params",
    "head_params",
    "total_params",
    "total_reduction_pct",
    "projection_macs_per_token",
    "bilinear_macs_per_token",
]


def audit_variants(config: ModelConfig, variants: Iterable[AttentionVariant]) -> List[ParamAudit]:
    return [audit(config.with_overrides(variant=v)) for v in variants]


def audit_table(audits: Iterable[ParamAudit]) -> pd.DataFrame:
    rows = []
    for item in audits:
        rows.append({
            "variant": item.variant.value,
            "expression": PROJECTION_EXPRESSIONS[item.variant],
            "projection_params": item.per_layer_attention_projection,
            "projection_reduction_pct": truncate_pct(item.reduction_vs_standard_pct),
            "published_reduction": PUBLISHED_REDUCTION[item.variant],
            "output_params": item.per_layer_attention_output,
            "ffn_params": item.per_layer_ffn,
            "norm_params": item.per_layer_norms,
            "embedding_params": item.embeddings,
            "head_params": item.heads_lm_or_cls,
            "total_params": item.total,
            "total_reduction_pct": truncate_pct(item.total_reduction_vs_standard_pct),
            "projection_macs_per_token": item.projection_macs_per_token,
            "bilinear_macs_per_token": item.bilinear_macs_per_token,
        })
    return pd.DataFrame(rows, columns=COLUMNS)


def render_audit_text(table: pd.DataFrame, config: ModelConfig) -> str:
    """Human-readable audit table with per-layer projection counts first."""
    header = (
        f"Parameter audit: L={config.layers} d={config.d_model} m={config.heads} "
        f"V={config.vocab_size} n_max={config.max_seq} bias={'on' if config.bias else 'off'} "
        "(projection/output/ffn/norm counts are per layer; percentages truncated to 2 places)"
    )
    formatted = table.copy()
    for column in ("projection_reduction_pct", "total_reduction_pct"):
        formatted[column] = formatted[column].map(lambda v: f"{v:.2f}")
    return header + "\n" + formatted.to_string(index=False)
