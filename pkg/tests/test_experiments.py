# tests/test_experiments.py
import math

import numpy as np
import pytest
from pydantic import ValidationError

from attention.variants import AttentionVariant
from config.errors import ConfigError, ContractError, InputError, RunError
from config.settings import BenchConfig, GradCheckConfig, ModelConfig, NoiseSpec, TrainConfig, load_preset
from core.tensor import Tensor, parameter
from experiments.benchmark import bench
from experiments.gradcheck import (
    grad_check,
    linear_grad_check,
    numerical_gradient,
    relative_error,
    run_grad_checks,
)
import experiments.noise as noise_module
import experiments.training as training_module
from experiments.noise import NoiseEvaluator, inject_noise, noise_row_norm_ratio, robustness_sweep
from experiments.training import AdamW, clip_grad_norm, evaluate_accuracy, learning_rate, make_task, train
from experiments.transfer import transfer_matrix
from models.encoder import init_model
from models.tokenizer import NUM_SPECIAL
from utils.task_simulator import TaskSimulator

ALL_VARIANTS = list(AttentionVariant)


def _tiny_model(**overrides):
    data = dict(layers=1, d_model=16, heads=2, vocab_size=32, max_seq=16, variant="shared_qkv",
                dropout_hidden=0.0, dropout_attn=0.0)
    data.update(overrides)
    return ModelConfig(**data)


# -- noise ------------------------------------------------------------------------

def test_zero_noise_is_identity(rng):
    x = Tensor(rng.standard_normal((4, 8)))
    assert inject_noise(x, NoiseSpec(level=0.0, seed=3)) is x


def test_noise_row_norm_tracks_level(rng):
    embeddings = rng.standard_normal((1000, 768))
    ratio = noise_row_norm_ratio(embeddings, NoiseSpec(level=0.20, seed=0))
    assert 0.18 <= ratio <= 0.22


def test_noise_is_deterministic_per_seed(rng):
    x = Tensor(rng.standard_normal((6, 32)))
    a = inject_noise(x, NoiseSpec(level=0.1, seed=9)).data
    b = inject_noise(x, NoiseSpec(level=0.1, seed=9)).data
    c = inject_noise(x, NoiseSpec(level=0.1, seed=10)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_noise_level_bounds():
    with pytest.raises(ValidationError):
        NoiseSpec(level=0.5)
    with pytest.raises(ConfigError):
        inject_noise(Tensor(np.ones((2, 4))), NoiseSpec.model_construct(level=0.41, seed=0))


# -- tasks ------------------------------------------------------------------------

def test_copy_and_reversal_tasks(rng):
    copy = TaskSimulator("copy", vocab_size=64, seq_len=16).sample(4, rng).tokens
    np.testing.assert_array_equal(copy[:, :8], copy[:, 8:])
    rev = TaskSimulator("reversal", vocab_size=64, seq_len=16).sample(4, rng).tokens
    np.testing.assert_array_equal(rev[:, :8], rev[:, 8:][:, ::-1])
    assert copy.min() >= NUM_SPECIAL and copy.max() < 64


def test_markov_task_follows_successors(rng):
    task = TaskSimulator("mlm-synthetic", vocab_size=40, seq_len=32)
    tokens = task.sample(64, rng).tokens - NUM_SPECIAL
    follows = task.successor[tokens[:, :-1]] == tokens[:, 1:]
    assert follows.mean() > 0.8


def test_corpus_windows(tmp_path, rng):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("a b c d e f g h " * 10, encoding="utf-8")
    task = TaskSimulator("mlm-synthetic", vocab_size=20, seq_len=8, corpus_path=str(corpus))
    tokens = task.sample(3, rng).tokens
    assert tokens.shape == (3, 8)
    assert tokens.max() < 20


def test_classification_task_labels(rng):
    batch = TaskSimulator("toy-classify", vocab_size=40, seq_len=12, num_classes=3).sample(10, rng)
    assert batch.labels.shape == (10,)
    assert set(batch.labels) <= {0, 1, 2}


def test_task_validation():
    with pytest.raises(ConfigError):
        TaskSimulator("translate", vocab_size=40, seq_len=8)
    with pytest.raises(ConfigError):
        TaskSimulator("copy", vocab_size=5, seq_len=8)
    with pytest.raises(InputError):
        TaskSimulator("copy", vocab_size=40, seq_len=1)


# -- optimizer --------------------------------------------------------------------

def test_adam_decays_matrices_only():
    w = parameter(np.ones((2, 2)))
    b = parameter(np.ones(2))
    w.grad = np.zeros((2, 2))
    b.grad = np.zeros(2)
    AdamW([w, b], weight_decay=0.5).step(0.1)
    np.testing.assert_allclose(w.data, 0.95)
    np.testing.assert_array_equal(b.data, 1.0)


def test_clip_grad_norm_rescales_without_aliasing():
    shared = np.array([3.0, 4.0])
    a, b = parameter(np.zeros(2)), parameter(np.zeros(2))
    a.grad = shared
    b.grad = shared
    norm = clip_grad_norm([a, b], 1.0)
    assert norm == pytest.approx(math.sqrt(50.0))
    np.testing.assert_array_equal(shared, [3.0, 4.0])
    assert math.sqrt(np.sum(a.grad ** 2) + np.sum(b.grad ** 2)) == pytest.approx(1.0)


def test_linear_schedule():
    config = TrainConfig(steps=10, lr=1.0, schedule="linear", warmup_steps=2)
    rates = [learning_rate(config, s) for s in range(10)]
    assert rates[0] == 0.5 and rates[1] == 1.0
    assert rates[2] == 1.0
    assert all(x >= y for x, y in zip(rates[2:], rates[3:]))
    assert learning_rate(TrainConfig(lr=0.3), 99) == 0.3


# -- training ----------------------------------------------------------------------

def test_zero_learning_rate_leaves_parameters_unchanged():
    model_config = _tiny_model()
    config = TrainConfig(steps=5, batch=4, lr=0.0, seq_len=8)
    initial = init_model(model_config)
    before = {name: t.data.copy() for name, t in initial.named_parameters()}
    result = train(config, model_config, params=initial)
    for name, t in result.params.named_parameters():
        np.testing.assert_array_equal(t.data, before[name], err_msg=name)
    assert all(rate == 0.0 for rate in result.learning_rates)
    assert max(result.losses) - min(result.losses) < 0.5 * math.log(model_config.vocab_size)


def test_training_is_deterministic():
    model_config = _tiny_model(dropout_hidden=0.1, dropout_attn=0.1)
    config = TrainConfig(steps=8, batch=4, seq_len=8, seed=3, noise_at_train=0.1)
    first = train(config, model_config)
    second = train(config, model_config)
    assert first.losses == second.losses
    for (_, a), (_, b) in zip(first.params.named_parameters(), second.params.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_history_frame_columns():
    result = train(TrainConfig(steps=3, batch=2, seq_len=8), _tiny_model())
    frame = result.history_frame()
    assert list(frame.columns) == ["step", "loss", "lr", "grad_norm"]
    assert list(frame["step"]) == [1, 2, 3]
    assert result.params.steps_trained == 3


def test_divergence_reports_step():
    model_config = _tiny_model()
    params = init_model(model_config)
    params.mlm_head.output_bias.data[:] = np.nan
    with pytest.raises(RunError) as excinfo:
        train(TrainConfig(steps=3, batch=2, seq_len=8), model_config, params=params)
    assert excinfo.value.step == 1


def test_non_finite_activations_report_step():
    model_config = _tiny_model()
    params = init_model(model_config)
    params.token_embedding.data[:] = np.inf
    with pytest.raises(RunError) as excinfo:
        train(TrainConfig(steps=3, batch=2, seq_len=8), model_config, params=params)
    assert excinfo.value.step == 1


def test_classification_training_switches_head():
    result = train(TrainConfig(steps=2, batch=4, seq_len=8, task="toy-classify"), _tiny_model())
    assert result.model_config.head == "classify"
    assert result.params.classifier is not None


@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.value)
def test_copy_loss_decreases_for_every_variant(variant):
    model_config = _tiny_model(vocab_size=64, variant=variant)
    config = TrainConfig(steps=60, batch=32, lr=3e-3, seq_len=16, seed=0)
    result = train(config, model_config)
    assert abs(result.initial_loss - math.log(64)) < 0.15 * math.log(64)
    assert np.mean(result.losses[-10:]) < np.mean(result.losses[:10])


@pytest.mark.slow
@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.value)
def test_copy_task_converges(variant):
    """Copy preset, every variant: a 30% drop by step 200, below half of ln V after 2000 steps."""
    preset = load_preset("copy_task")
    model_config = preset.model.with_overrides(variant=variant)
    result = train(preset.train, model_config)
    ln_vocab = math.log(model_config.vocab_size)
    assert abs(result.initial_loss - ln_vocab) < 0.15 * ln_vocab
    assert float(np.mean(result.losses[180:200])) <= 0.7 * result.initial_loss
    assert float(np.mean(result.losses[-50:])) < 0.5 * ln_vocab


# -- robustness sweep -----------------------------------------------------------------

@pytest.fixture(scope="module")
def classifiers():
    model_config = _tiny_model(head="classify", vocab_size=40)
    config = TrainConfig(steps=150, batch=16, lr=3e-3, seq_len=12, task="toy-classify", seed=1)
    a = train(config, model_config.with_overrides(variant="standard")).params
    b = train(config, model_config.with_overrides(variant="shared_qkv")).params
    return a, b, make_task(config, model_config)


def test_sweep_at_zero_noise_equals_clean_accuracy(classifiers):
    a, b, task = classifiers
    curve = robustness_sweep(a, b, task, [0.0], seeds=2, eval_examples=64, seed=4)
    assert curve.loc[0, "acc_a"] == evaluate_accuracy(a, task, examples=64, seed=4)
    assert curve.loc[0, "acc_b"] == evaluate_accuracy(b, task, examples=64, seed=4)


def test_sweep_accuracy_does_not_rise_with_noise(classifiers):
    a, b, task = classifiers
    curve = robustness_sweep(a, b, task, [0.0, 0.2, 0.4], seeds=5, eval_examples=256, seed=0)
    for column in ("acc_a", "acc_b"):
        values = list(curve[column])
        assert all(later <= earlier + 0.03 for earlier, later in zip(values, values[1:])), values


def test_sweep_threads_do_not_change_results(classifiers):
    a, b, task = classifiers
    serial = robustness_sweep(a, b, task, [0.0, 0.3], seeds=3, eval_examples=32)
    threaded = robustness_sweep(a, b, task, [0.0, 0.3], seeds=3, eval_examples=32, threads=3)
    assert serial.equals(threaded)


def test_sweep_rejects_untrained_models(classifiers):
    a, _, task = classifiers
    untrained = init_model(a.config)
    with pytest.raises(ContractError):
        robustness_sweep(a, untrained, task, [0.0])


def test_noise_evaluator_masks_token_tasks():
    task = TaskSimulator("copy", vocab_size=32, seq_len=8)
    evaluator = NoiseEvaluator(task, eval_examples=4, seed=0)
    params = init_model(_tiny_model())
    assert 0.0 <= evaluator.accuracy(params, 0.2, noise_seed=1) <= 1.0


def _capture_masked(monkeypatch, module):
    seen = []

    def fake_accuracy(params, batch, embedding_hook=None):
        seen.append(batch)
        return 0.0

    monkeypatch.setattr(module, "mlm_accuracy", fake_accuracy)
    return seen


def test_noise_evaluator_uses_each_models_mask_id(monkeypatch):
    task = TaskSimulator("copy", vocab_size=32, seq_len=8)
    evaluator = NoiseEvaluator(task, eval_examples=4, seed=0)
    default = evaluator.masked(_tiny_model().mask_token_id)
    custom = evaluator.masked(3)
    np.testing.assert_array_equal(custom.positions, default.positions)

    seen = _capture_masked(monkeypatch, noise_module)
    evaluator.accuracy(init_model(_tiny_model(mask_token_id=3)))
    assert np.all(seen[0].tokens.reshape(-1)[seen[0].positions] == 3)


def test_evaluate_accuracy_masks_with_config_mask_id(monkeypatch):
    seen = _capture_masked(monkeypatch, training_module)
    task = TaskSimulator("copy", vocab_size=32, seq_len=8)
    evaluate_accuracy(init_model(_tiny_model(mask_token_id=3)), task, examples=16, seed=0)
    assert np.all(seen[0].tokens.reshape(-1)[seen[0].positions] == 3)


# -- gradient checks ------------------------------------------------------------------

@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.value)
def test_attention_gradients_match_finite_differences(variant):
    report = grad_check(variant, seq_len=4, d_model=16, heads=2, seed=0)
    assert report.max_relative_error < 1e-5, report.to_frame().to_string()


def test_attention_gradients_with_biases():
    report = grad_check("shared_qkv", bias=True, seed=2)
    assert report.passed


def test_shared_diagonal_entries_match_finite_differences():
    report = grad_check("shared_qkv", include_input=False)
    by_name = {e.parameter: e for e in report.entries}
    for name in ("d_q", "d_k", "d_v"):
        assert by_name[name].size == 16
        assert by_name[name].max_rel_error < 1e-5


def test_linear_network_gradients_are_exact():
    assert linear_grad_check().max_relative_error < 1e-9


def test_run_grad_checks_covers_configured_variants():
    report = run_grad_checks(GradCheckConfig(variants="standard,shared", seq_len=3, d_model=8, heads=2))
    assert {e.variant for e in report.entries} == {"standard", "shared_qkv"}
    assert report.passed


def test_relative_error_floor():
    np.testing.assert_array_equal(relative_error(np.zeros(2), np.zeros(2)), [0.0, 0.0])
    assert relative_error(np.array([1e-12]), np.array([0.0]))[0] == pytest.approx(1e-4)


def test_numerical_gradient_restores_tensor():
    t = parameter(np.array([1.0, 2.0]))
    grad = numerical_gradient(lambda: float(np.sum(t.data ** 2)), t, step=1e-4)
    np.testing.assert_allclose(grad, [2.0, 4.0], atol=1e-8)
    np.testing.assert_array_equal(t.data, [1.0, 2.0])


# -- benchmark ----------------------------------------------------------------------

def test_bench_reports_mac_ratio_and_speedups():
    config = BenchConfig(variants="standard,shared,symmetric", d_model=16, heads=2, seq_len=8, batch=2,
                         trials=20, warmup=1)
    results = {r.variant: r for r in bench(config)}
    assert results["standard"].speedup_vs_standard == 1.0
    assert results["standard"].mac_ratio_vs_standard == 1.0
    assert results["shared_qkv"].mac_ratio_vs_standard == pytest.approx((16 ** 2 + 48) / (3 * 16 ** 2))
    assert all(r.mean_s > 0 and r.trials == 20 for r in results.values())


def test_bench_mac_ratio_at_bert_width():
    config = BenchConfig(variants="standard,shared", d_model=768, heads=12, seq_len=1, batch=1, trials=20, warmup=0)
    ratio = {r.variant: r.mac_ratio_vs_standard for r in bench(config)}
    assert abs(ratio["shared_qkv"] - 0.3347) < 1e-4


def test_bench_without_standard_leaves_speedup_empty():
    config = BenchConfig(variants="shared", d_model=8, heads=2, seq_len=4, batch=1, trials=20, warmup=0)
    assert bench(config)[0].speedup_vs_standard is None


def test_bench_float32():
    config = BenchConfig(variants="standard", d_model=8, heads=2, seq_len=4, batch=1, trials=20,
                         warmup=0, precision="float32")
    assert bench(config)[0].precision == "float32"


@pytest.mark.slow
def test_shared_block_is_faster_at_bert_width():
    results = {r.variant: r for r in bench(BenchConfig())}
    assert results["shared_qkv"].mean_s < results["standard"].mean_s


# -- transfer ---------------------------------------------------------------------

def test_transfer_matrix_shape():
    frame = transfer_matrix(
        _tiny_model(), TrainConfig(steps=2, batch=2, seq_len=8), tasks=["copy", "reversal"], eval_examples=8
    )
    assert list(frame.columns) == ["variant", "train_task", "eval_task", "accuracy"]
    assert len(frame) == 4
    assert set(frame["train_task"]) == {"copy", "reversal"}
    assert frame["accuracy"].between(0.0, 1.0).all()


def test_transfer_rejects_classification():
    with pytest.raises(ConfigError):
        transfer_matrix(_tiny_model(), TrainConfig(steps=1), tasks=["toy-classify"])
