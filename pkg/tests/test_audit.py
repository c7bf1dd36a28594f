# tests/test_audit.py
import numpy as np
import pytest

from attention.variants import AttentionVariant
from audit.param_audit import (
    PUBLISHED_TOTALS,
    attention_core_macs_per_token,
    audit,
    bilinear_macs_per_token,
    macs_per_token,
    reconcile_bert_base,
    truncate_pct,
)
from audit.report import COLUMNS, audit_table, audit_variants, render_audit_text
from config.errors import ContractError
from config.settings import ModelConfig
from models.encoder import build_model

ALL_VARIANTS = list(AttentionVariant)


def _zeros(name, shape, kind):
    return np.zeros(shape)


def _bert(variant, **overrides):
    data = dict(layers=12, d_model=768, heads=12, vocab_size=30522, max_seq=512, variant=variant)
    data.update(overrides)
    return ModelConfig(**data)


# -- reductions -------------------------------------------------------------------

def test_shared_projection_reduction_at_bert_base():
    result = audit(_bert("shared_qkv"))
    exact = 100.0 * (1.0 - (768 ** 2 + 3 * 768) / (3 * 768 ** 2))
    assert abs(result.reduction_vs_standard_pct - exact) < 1e-9
    assert abs(result.reduction_vs_standard_pct - 66.53) < 0.01
    assert truncate_pct(result.reduction_vs_standard_pct) == 66.53


def test_symmetric_projection_reduction():
    assert truncate_pct(audit(_bert("symmetric")).reduction_vs_standard_pct) == 33.33


def test_standard_against_itself_is_zero():
    assert audit(_bert("standard")).reduction_vs_standard_pct == 0.0
    assert audit(_bert("standard", layers=1, d_model=8, heads=4)).total_reduction_vs_standard_pct == 0.0


@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.value)
def test_projection_reduction_is_independent_of_layers(variant):
    reductions = {audit(_bert(variant, layers=layers)).reduction_vs_standard_pct for layers in (1, 2, 6, 12)}
    assert len(reductions) == 1


def test_truncate_pct():
    assert truncate_pct(66.5365) == 66.53
    assert truncate_pct(12.9454) == 12.94
    assert truncate_pct(33.3333) == 33.33
    assert truncate_pct(0.0) == 0.0


# -- totals against enumeration -----------------------------------------------------

def _grid():
    for d in (8, 64, 768):
        for m in (1, 4, 12):
            if d % m:
                continue
            for layers in ((1, 2) if d == 768 else (1, 2, 12)):
                yield d, m, layers


@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.value)
@pytest.mark.parametrize("d,m,layers", list(_grid()))
def test_audit_matches_constructed_model(variant, d, m, layers):
    for bias in (False, True):
        config = ModelConfig(
            layers=layers, d_model=d, heads=m, vocab_size=40, max_seq=16, variant=variant, bias=bias
        )
        result = audit(config)
        assert build_model(config, _zeros).num_parameters() == result.total
        assert sum(result.components().values()) == result.total


def test_bert_base_components():
    result = audit(_bert("standard"))
    d, vocab = 768, 30522
    assert result.per_layer_attention_projection == 3 * d * d
    assert result.per_layer_attention_output == d * d
    assert result.per_layer_ffn == 2 * d * 3072 + 3072 + d
    assert result.per_layer_norms == 4 * d
    assert result.embeddings == vocab * d + 512 * d + 2 * d
    assert result.heads_lm_or_cls == d * d + 3 * d + vocab
    assert result.total == 109_475_898


def test_shared_total_delta_is_projection_delta():
    delta = audit(_bert("standard")).total - audit(_bert("shared_qkv")).total
    assert delta == 12 * (3 * 768 ** 2 - (768 ** 2 + 3 * 768)) == 14_128_128


# -- MACs -----------------------------------------------------------------------

def test_mac_ratio_standard_to_shared():
    ratio = macs_per_token("standard", 768) / macs_per_token("shared_qkv", 768)
    assert round(ratio, 3) == 2.988
    inverse = macs_per_token("shared_qkv", 768) / macs_per_token("standard", 768)
    assert abs(inverse - 0.3347) < 1e-4


def test_mac_small_cases():
    assert macs_per_token("shared_qkv", 1) == 4
    assert macs_per_token("symmetric", 768) == 1_179_648
    assert macs_per_token("partial_qk", 768) == 2 * 768 ** 2 + 768
    assert bilinear_macs_per_token("pairwise", 768, 12) == 768 ** 2 // 12
    assert bilinear_macs_per_token("standard", 768, 12) == 0
    assert attention_core_macs_per_token(128, 768) == 2 * 128 * 768


@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.value)
def test_mac_count_is_head_independent(variant):
    assert macs_per_token(variant, 768, 12) == macs_per_token(variant, 768, 1) == macs_per_token(variant, 768, 768)


@pytest.mark.parametrize("d_model, heads", [(768, 5), (768, 0), (0, 1), (-12, 12)])
def test_mac_count_rejects_invalid_shape(d_model, heads):
    with pytest.raises(ContractError):
        macs_per_token("standard", d_model, heads)
    with pytest.raises(ContractError):
        bilinear_macs_per_token("pairwise", d_model, heads)


# -- reconciliation -----------------------------------------------------------------

@pytest.fixture
def report():
    audits = {v: audit(_bert(v)) for v in AttentionVariant}
    return reconcile_bert_base(
        audits[AttentionVariant.STANDARD],
        audits[AttentionVariant.SHARED_QKV],
        others=[audits[AttentionVariant.SYMMETRIC], audits[AttentionVariant.PAIRWISE],
                audits[AttentionVariant.PARTIAL_QK]],
    )


def test_reconciliation_reference_arithmetic(report):
    assert report.published_delta == 14_177_080
    assert report.projection_delta == 14_128_128
    assert report.residual == 48_952
    shared = report.row("shared_qkv")
    assert truncate_pct(shared.published_delta_pct) == 12.94
    assert shared.projection_delta_bias_on == 14_146_560
    assert shared.residual_bias_on == 30_520
    assert report.published_standard_total == PUBLISHED_TOTALS[AttentionVariant.STANDARD] == 109_514_298


def test_reconciliation_tied_variants_match_bias_on_deltas(report):
    assert report.row("symmetric").residual_bias_on == 0
    assert report.row("pairwise").residual_bias_on == 0
    assert truncate_pct(report.row("symmetric").published_delta_pct) == 6.47
    assert truncate_pct(report.row("pairwise").published_delta_pct) == 5.93


def test_reconciliation_skips_unpublished_variants(report):
    with pytest.raises(KeyError):
        report.row("partial_qk")


def test_reconciliation_itemizes_assumptions(report):
    text = report.render_text()
    assert "14,177,080" in text
    assert "14,128,128" in text
    assert "48,952" in text
    assert "12.94%" in text
    assert any("Segment" in item for item in report.assumptions)
    assert any("Pooler" in item for item in report.assumptions)
    frame = report.to_frame()
    assert list(frame["variant"]) == ["shared_qkv", "symmetric", "pairwise"]


def test_reconciliation_requires_bert_base_shape():
    small_standard = audit(_bert("standard", layers=2))
    small_shared = audit(_bert("shared_qkv", layers=2))
    with pytest.raises(ContractError):
        reconcile_bert_base(small_standard, small_shared)


def test_reconciliation_requires_variant_order():
    with pytest.raises(ContractError):
        reconcile_bert_base(audit(_bert("shared_qkv")), audit(_bert("standard")))


# -- report table -------------------------------------------------------------------

def test_audit_table_has_one_row_per_variant():
    config = _bert("shared_qkv")
    table = audit_table(audit_variants(config, ALL_VARIANTS))
    assert list(table.columns) == COLUMNS
    assert list(table["variant"]) == [v.value for v in ALL_VARIANTS]
    assert list(table["expression"]) == ["3d^2", "2d^2", "2d^2 + d^2/m", "2d^2 + d", "d^2 + 3d"]
    assert list(table["projection_params"]) == [1_769_472, 1_179_648, 1_228_800, 1_180_416, 592_128]
    shared = table[table["variant"] == "shared_qkv"].iloc[0]
    assert shared["projection_reduction_pct"] == 66.53
    assert "66.53" in render_audit_text(table, config)
