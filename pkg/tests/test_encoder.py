# tests/test_encoder.py
import json
import math
import struct

import numpy as np
import pytest
from scipy.special import erf

from audit.param_audit import audit
from config.errors import CheckpointError, ContractError, InputError
from core.tensor import Tape, backward
from models.checkpoint import load_checkpoint, save_checkpoint
from models.encoder import (
    classify_logits,
    convert_model,
    count_params,
    forward,
    init_model,
    mask_tokens,
    mlm_logits,
    mlm_loss,
)
from models.tokenizer import MASK_ID, NUM_SPECIAL, SPECIAL_TOKENS, UNK_ID, ToyTokenizer
from utils.rng import RngStreams


def _model(config, seed=0):
    return init_model(config, RngStreams(seed).generator("init"))


def _tokens(config, shape, seed=1):
    return np.random.default_rng(seed).integers(0, config.vocab_size, size=shape)


# -- forward ------------------------------------------------------------------

def test_forward_shapes(tiny_config):
    params = _model(tiny_config)
    assert forward(params, _tokens(tiny_config, 8)).shape == (8, 16)
    assert forward(params, _tokens(tiny_config, (3, 8))).shape == (3, 8, 16)


def test_empty_stack_is_normalized_embedding(tiny_config):
    config = tiny_config.with_overrides(layers=0)
    params = _model(config)
    tokens = _tokens(config, 6)
    x = params.token_embedding.data[tokens] + params.position_embedding.data[:6]
    centered = x - x.mean(axis=-1, keepdims=True)
    expected = centered / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + config.layer_norm_eps)
    assert np.max(np.abs(forward(params, tokens).data - expected)) < 1e-12


@pytest.mark.parametrize("variant", ["standard", "symmetric", "pairwise", "partial_qk", "shared_qkv"])
def test_permutation_equivariance_without_positions(tiny_config, variant):
    params = _model(tiny_config.with_overrides(variant=variant))
    params.position_embedding.data[:] = 0.0
    tokens = _tokens(tiny_config, 9)
    perm = np.random.default_rng(3).permutation(9)
    out = forward(params, tokens).data
    assert np.max(np.abs(forward(params, tokens[perm]).data - out[perm])) < 1e-10


def _layer_norm(x, gamma, beta, eps):
    centered = x - x.mean(axis=-1, keepdims=True)
    return centered / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps) * gamma + beta


def _linear(x, weight, bias=None):
    out = x @ weight
    return out if bias is None else out + bias.data


def _reference_attention(att, x, heads):
    """Multi-head attention written directly against the parameter arrays."""
    name = att.variant.value
    if name == "standard":
        q = _linear(x, att.w_q.data, att.b_q)
        k = _linear(x, att.w_k.data, att.b_k)
        v = _linear(x, att.w_v.data, att.b_v)
    elif name == "shared_qkv":
        s = _linear(x, att.w_s.data, att.b_s)
        q, k, v = s * att.d_q.data, s * att.d_k.data, s * att.d_v.data
    else:
        q = _linear(x, att.w_qk.data, att.b_qk)
        k = q * att.k_scale.data if name == "partial_qk" else q
        v = _linear(x, att.w_v.data, att.b_v)

    n, d = x.shape
    head_dim = d // heads

    def split(t):
        return t.reshape(n, heads, head_dim).transpose(1, 0, 2)

    qh, kh, vh = split(q), split(k), split(v)
    if name == "pairwise":
        qh = np.matmul(qh, att.u.data)
    logits = qh @ kh.transpose(0, 2, 1) / math.sqrt(head_dim)
    weights = np.exp(logits - logits.max(axis=-1, keepdims=True))
    weights /= weights.sum(axis=-1, keepdims=True)
    context = (weights @ vh).transpose(1, 0, 2).reshape(n, d)
    return _linear(context, att.w_o.data, att.b_o)


def _reference_forward(params, tokens):
    config = params.config
    eps = config.layer_norm_eps
    x = params.token_embedding.data[tokens] + params.position_embedding.data[: len(tokens)]
    x = _layer_norm(x, params.emb_ln_gamma.data, params.emb_ln_beta.data, eps)
    for block in params.blocks:
        h = _layer_norm(
            x + _reference_attention(block.attention, x, config.heads),
            block.ln_attn_gamma.data, block.ln_attn_beta.data, eps,
        )
        pre = h @ block.ffn_in.data + block.ffn_in_bias.data
        inner = 0.5 * pre * (1.0 + erf(pre / math.sqrt(2.0)))
        ffn = inner @ block.ffn_out.data + block.ffn_out_bias.data
        x = _layer_norm(h + ffn, block.ln_ffn_gamma.data, block.ln_ffn_beta.data, eps)
    return x


@pytest.mark.parametrize("variant", ["standard", "symmetric", "pairwise", "partial_qk", "shared_qkv"])
def test_forward_matches_numpy_reference(tiny_config, variant):
    """Perturbed parameters so every norm, bias and diagonal carries weight."""
    config = tiny_config.with_overrides(variant=variant, bias=True)
    params = _model(config)
    jitter = np.random.default_rng(11)
    for _, tensor in params.named_parameters():
        tensor.data += 0.3 * jitter.standard_normal(tensor.shape)
    tokens = RngStreams(0).generator("reference-tokens").integers(0, config.vocab_size, size=8)

    out = forward(params, tokens).data
    expected = _reference_forward(params, tokens)
    assert np.max(np.abs(out - expected)) < 1e-10


def test_seeded_forward_is_reproducible(tiny_config):
    tokens = RngStreams(0).generator("reference-tokens").integers(0, tiny_config.vocab_size, size=8)
    first = forward(_model(tiny_config), tokens).data
    second = forward(_model(tiny_config), tokens).data
    assert first.tobytes() == second.tobytes()
    assert not np.array_equal(forward(_model(tiny_config, seed=1), tokens).data, first)


def test_forward_rejects_bad_tokens(tiny_config):
    params = _model(tiny_config)
    with pytest.raises(InputError):
        forward(params, np.array([1, 2, 50]))
    with pytest.raises(InputError):
        forward(params, np.array([-1, 2]))
    with pytest.raises(InputError):
        forward(params, np.zeros(17, dtype=np.int64))
    with pytest.raises(InputError):
        forward(params, np.zeros((2, 2, 2), dtype=np.int64))
    with pytest.raises(InputError):
        forward(params, np.zeros(0, dtype=np.int64))


def test_dropout_only_in_training(tiny_config):
    params = _model(tiny_config.with_overrides(dropout_hidden=0.3, dropout_attn=0.3))
    tokens = _tokens(tiny_config, 8)
    clean = forward(params, tokens).data
    np.testing.assert_array_equal(forward(params, tokens, training=False, rng=np.random.default_rng(0)).data, clean)
    noisy = forward(params, tokens, training=True, rng=np.random.default_rng(0)).data
    assert not np.allclose(noisy, clean)


def test_embedding_hook_sees_normalized_embeddings(tiny_config):
    params = _model(tiny_config)
    seen = []

    def hook(x):
        seen.append(x.data.copy())
        return x

    forward(params, _tokens(tiny_config, 5), embedding_hook=hook)
    assert seen[0].shape == (5, 16)
    np.testing.assert_allclose(seen[0].mean(axis=-1), 0.0, atol=1e-12)


# -- masked LM -----------------------------------------------------------------

def test_mask_tokens_counts_and_targets(tiny_config):
    tokens = _tokens(tiny_config, (4, 16)) + NUM_SPECIAL
    tokens = np.minimum(tokens, tiny_config.vocab_size - 1)
    batch = mask_tokens(tokens, 0.15, np.random.default_rng(0))
    assert batch.positions.shape == (4 * 3,)
    flat = batch.tokens.reshape(-1)
    assert np.all(flat[batch.positions] == MASK_ID)
    np.testing.assert_array_equal(batch.targets, tokens.reshape(-1)[batch.positions])
    untouched = np.setdiff1d(np.arange(flat.size), batch.positions)
    np.testing.assert_array_equal(flat[untouched], tokens.reshape(-1)[untouched])
    assert np.all(batch.positions // 16 == np.repeat(np.arange(4), 3))


def test_mask_count_rounds_up():
    batch = mask_tokens(np.arange(4, 7), 0.5, np.random.default_rng(0))
    assert batch.positions.size == 2


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1, 1.5])
def test_mask_ratio_outside_open_interval_is_rejected(ratio):
    with pytest.raises(InputError):
        mask_tokens(np.arange(8), ratio, np.random.default_rng(0))


def test_initial_loss_near_log_vocab(tiny_config):
    for vocab in (50, 64):
        config = tiny_config.with_overrides(vocab_size=vocab)
        params = _model(config)
        loss = mlm_loss(params, _tokens(config, (8, 16)), 0.15, np.random.default_rng(0))
        assert abs(loss.item() - math.log(vocab)) < 0.15 * math.log(vocab)


def test_mlm_loss_gradients_reach_every_parameter(tiny_config):
    params = _model(tiny_config.with_overrides(variant="pairwise"))
    with Tape():
        backward(mlm_loss(params, _tokens(tiny_config, (2, 8)), 0.25, np.random.default_rng(0)))
    missing = [name for name, t in params.named_parameters() if t.grad is None]
    assert missing == []


def test_mlm_logits_need_mlm_head(tiny_config):
    params = _model(tiny_config.with_overrides(head="classify"))
    with pytest.raises(ContractError):
        mlm_logits(params, forward(params, _tokens(tiny_config, 4)))


def test_tied_decoder_is_token_embedding(tiny_config):
    params = _model(tiny_config)
    assert params.mlm_head.decoder is params.token_embedding
    names = [n for n, _ in params.named_parameters()]
    assert "mlm.decoder" not in names
    assert len(names) == len(set(names))


# -- classification ---------------------------------------------------------------

def test_classifier_logits_shape(tiny_config):
    params = _model(tiny_config.with_overrides(head="classify", num_classes=3))
    assert classify_logits(params, _tokens(tiny_config, (5, 8))).shape == (5, 3)
    assert classify_logits(params, _tokens(tiny_config, 8)).shape == (1, 3)


def test_padding_mask_matches_truncated_sequence(tiny_config):
    params = _model(tiny_config.with_overrides(head="classify"))
    tokens = _tokens(tiny_config, 10)
    keep = np.arange(10) < 6
    padded = classify_logits(params, tokens, mask=keep).data
    truncated = classify_logits(params, tokens[:6]).data
    assert np.max(np.abs(padded - truncated)) < 1e-12


# -- accounting and conversion ---------------------------------------------------

@pytest.mark.parametrize("overrides", [
    {},
    {"bias": True},
    {"tie_embeddings": False},
    {"head": "classify", "num_classes": 4},
    {"variant": "pairwise", "bias": True},
    {"variant": "partial_qk", "layers": 3},
])
def test_num_parameters_equals_audit(tiny_config, overrides):
    config = tiny_config.with_overrides(**overrides)
    assert _model(config).num_parameters() == audit(config).total == count_params(config).total


def test_swap_equivalence_over_four_layers(tiny_config):
    config = tiny_config.with_overrides(layers=4, bias=True, diag_jitter=0.3)
    params = _model(config)
    for block in params.blocks:
        block.attention.b_s.data[:] = np.random.default_rng(5).normal(0.0, 0.1, 16)
    converted = convert_model(params)
    tokens = _tokens(config, (2, 12))
    assert converted.config.variant.value == "standard"
    assert converted.mlm_head.decoder is converted.token_embedding
    diff = np.abs(forward(params, tokens).data - forward(converted, tokens).data)
    assert np.max(diff) < 1e-8
    assert converted.num_parameters() == audit(converted.config).total


def test_convert_rejects_pairwise(tiny_config):
    with pytest.raises(ContractError):
        convert_model(_model(tiny_config.with_overrides(variant="pairwise")))


# -- checkpoints ----------------------------------------------------------------

@pytest.mark.parametrize("overrides", [{}, {"variant": "pairwise", "bias": True}, {"head": "classify"},
                                       {"tie_embeddings": False}])
def test_checkpoint_round_trip_is_bit_identical(tiny_config, tmp_path, overrides):
    params = _model(tiny_config.with_overrides(**overrides))
    tokens = _tokens(tiny_config, (2, 8))
    before = forward(params, tokens).data.tobytes()
    path = save_checkpoint(params, str(tmp_path / "model.atnf"))
    loaded = load_checkpoint(str(path))
    assert forward(loaded, tokens).data.tobytes() == before
    assert loaded.config == params.config
    if loaded.mlm_head is not None and loaded.config.tie_embeddings:
        assert loaded.mlm_head.decoder is loaded.token_embedding


def _saved(tiny_config, tmp_path):
    path = save_checkpoint(_model(tiny_config), str(tmp_path / "model.atnf"))
    return path, path.read_bytes()


def test_checkpoint_rejects_bad_magic(tiny_config, tmp_path):
    path, raw = _saved(tiny_config, tmp_path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_checkpoint_rejects_unknown_version(tiny_config, tmp_path):
    path, raw = _saved(tiny_config, tmp_path)
    path.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_checkpoint_rejects_truncation_and_trailing_bytes(tiny_config, tmp_path):
    path, raw = _saved(tiny_config, tmp_path)
    path.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))
    path.write_bytes(raw + b"\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_checkpoint_file_layout(tiny_config, tmp_path):
    """Magic, version, config JSON, then name + raw f64 per tensor and nothing else."""
    params = _model(tiny_config)
    path, raw = _saved(tiny_config, tmp_path)

    assert raw[:4] == b"ATNF"
    assert struct.unpack_from("<I", raw, 4)[0] == 1
    (size,) = struct.unpack_from("<I", raw, 8)
    offset = 12 + size
    assert json.loads(raw[12:offset].decode("utf-8")) == json.loads(tiny_config.model_dump_json())

    for name, tensor in params.named_parameters():
        (size,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        assert raw[offset:offset + size].decode("utf-8") == name
        offset += size
        block = np.frombuffer(raw, dtype="<f8", count=tensor.size, offset=offset)
        np.testing.assert_array_equal(block, tensor.data.reshape(-1))
        offset += 8 * tensor.size
    assert offset == len(raw)


def test_checkpoint_rejects_renamed_tensor(tiny_config, tmp_path):
    path, raw = _saved(tiny_config, tmp_path)
    path.write_bytes(raw.replace(b"embeddings.position", b"embeddings.positiom", 1))
    with pytest.raises(CheckpointError, match="embeddings.positiom"):
        load_checkpoint(str(path))


def test_float32_model_reloads_as_float64(tiny_config, tmp_path):
    params = init_model(tiny_config, RngStreams(0).generator("init"), dtype=np.float32)
    path = save_checkpoint(params, str(tmp_path / "model32.atnf"))
    loaded = load_checkpoint(str(path))
    assert loaded.dtype == np.float64
    for (name, original), (_, restored) in zip(params.named_parameters(), loaded.named_parameters()):
        assert restored.dtype == np.float64, name
        np.testing.assert_array_equal(restored.data, original.data.astype(np.float64))


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "absent.atnf"))


# -- tokenizer ------------------------------------------------------------------

def test_tokenizer_vocabulary_order():
    tokenizer = ToyTokenizer.fit(["the cat the dog"])
    assert tuple(tokenizer.vocab[:NUM_SPECIAL]) == SPECIAL_TOKENS
    assert tokenizer.vocab[NUM_SPECIAL:] == ["the", "cat", "dog"]
    assert tokenizer.encode("the bird") == [NUM_SPECIAL, UNK_ID]
    assert tokenizer.decode(tokenizer.encode("dog the")) == "dog the"


def test_tokenizer_char_mode_and_budget():
    tokenizer = ToyTokenizer.fit(["aab c"], mode="char", max_vocab=NUM_SPECIAL + 2)
    assert tokenizer.vocab_size == NUM_SPECIAL + 2
    assert tokenizer.encode("abc") == [NUM_SPECIAL, NUM_SPECIAL + 1, UNK_ID]


def test_tokenizer_save_load(tmp_path):
    tokenizer = ToyTokenizer.fit(["one two two"])
    tokenizer.save(str(tmp_path / "vocab.json"))
    loaded = ToyTokenizer.load(str(tmp_path / "vocab.json"))
    assert loaded.vocab == tokenizer.vocab
    assert loaded.mode == "word"


def test_tokenizer_rejects_bad_vocabulary():
    with pytest.raises(InputError):
        ToyTokenizer(["a", "b"])
    with pytest.raises(InputError):
        ToyTokenizer(list(SPECIAL_TOKENS), mode="bpe")

