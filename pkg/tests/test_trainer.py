import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resampnet.checkpoint import load_checkpoint
from resampnet.dataset import DatasetRecipe, generate
from resampnet.errors import ConfigError, ContractError, DivergenceError, PatchError
from resampnet.gradcheck import gradcheck
from resampnet.imageops import ImageBuffer
from resampnet.losses import cross_entropy, loss_and_grad
from resampnet.network import NetworkConfig, build_network
from resampnet.trainer import (
    EvalReport,
    PlateauSchedule,
    TrainConfig,
    evaluate,
    fit,
    heatmap,
    heatmap_image,
    recalibrate_batchnorm,
    sgd_step,
    train,
)

SMALL = NetworkConfig(input_size=64, width_divisor=8)


def toy(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (n, 64, 64, 1)).astype(np.float32), np.arange(n) % 2


# ------------------------------------------------------------------ config

def test_defaults_are_the_published_hyperparameters():
    c = TrainConfig()
    assert (c.batch_size, c.momentum, c.weight_decay, c.initial_lr) == (32, 0.9, 1e-5, 0.01)
    assert (c.plateau_patience, c.lr_divisor, c.max_epochs) == (3, 10, 30)


@pytest.mark.parametrize("kw", [{"batch_size": 1}, {"momentum": 1.0}, {"weight_decay": -1}, {"initial_lr": -0.1},
                                {"plateau_patience": 0}, {"lr_divisor": 1}, {"max_epochs": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_json_keys():
    c = TrainConfig.from_dict({"batchSize": 16, "initialLR": 0.1, "maxEpochs": 2})
    assert (c.batch_size, c.initial_lr, c.max_epochs) == (16, 0.1, 2)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learningRate": 1})


# ---------------------------------------------------------------- schedule

def test_plateau_trace_drops_at_epoch_five():
    s = PlateauSchedule(0.01, patience=3, divisor=10)
    lrs = []
    for loss in [1.0, 0.9, 0.9, 0.9, 0.9]:
        s.step(loss)
        lrs.append(s.lr)
    assert lrs == [0.01, 0.01, 0.01, 0.01, 0.001]


def test_improvement_resets_patience():
    s = PlateauSchedule(1.0, patience=3)
    for loss in [1.0, 1.1, 1.2, 0.5, 0.6, 0.7]:
        s.step(loss)
    assert s.lr == 1.0 and s.stale == 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=40))
def test_lr_non_increasing_and_drops_by_divisor(losses):
    s = PlateauSchedule(0.01, 3, 10.0)
    prev = s.lr
    for loss in losses:
        s.step(loss)
        assert s.lr == prev or s.lr == prev / 10.0
        prev = s.lr


# ---------------------------------------------------------------- losses

def test_cross_entropy_is_negative_log():
    p = np.array([1.0, 0.5, 0.25, 1e-6])
    np.testing.assert_allclose(cross_entropy(p), -np.log(p), rtol=0, atol=1e-12)


@pytest.mark.parametrize("k", [2, 4])
def test_loss_gradient_matches_finite_differences(k):
    rng = np.random.default_rng(k)
    z = rng.standard_normal((5, 1 if k == 2 else k))
    y = rng.integers(0, k, 5)
    _, g = loss_and_grad(z, y, k)
    assert gradcheck(lambda: loss_and_grad(z, y, k)[0], {"z": z}, {"z": g}).passed


def test_bce_matches_sigmoid_cross_entropy_and_is_stable():
    z = np.array([[0.3], [-2.0]])
    loss, _ = loss_and_grad(z, np.array([1, 0]), 2)
    p = 1 / (1 + np.exp(-z[:, 0]))
    assert loss == pytest.approx(np.mean([-np.log(p[0]), -np.log(1 - p[1])]), abs=1e-12)
    big, _ = loss_and_grad(np.array([[1000.0], [-1000.0]]), np.array([0, 1]), 2)
    assert big == pytest.approx(1000.0)


def test_categorical_loss_matches_log_softmax():
    z = np.array([[1.0, 2.0, 3.0]])
    loss, _ = loss_and_grad(z, np.array([0]), 3)
    assert loss == pytest.approx(-np.log(np.exp(1) / np.exp(z).sum()), abs=1e-12)


# ------------------------------------------------------------------ SGD

def test_sgd_step_formula_and_decay_scope():
    net = build_network(SMALL, seed=0, dtype=np.float64)
    x, y = toy(4)
    _, d = loss_and_grad(net.forward(x.astype(np.float64), training=True), y, 2)
    net.backward(d)
    before = {n: getattr(o, a).copy() for n, o, a, _ in net.trainable()}
    grads = {n: getattr(o, f"{a}_grad").copy() for n, o, a, _ in net.trainable()}
    bufs = {n: np.full_like(v, 0.5) for n, v in before.items()}
    sgd_step(net, bufs, 0.1, 0.9, 0.01)
    for name, owner, attr, decays in net.trainable():
        want_buf = 0.9 * 0.5 + grads[name] + (0.01 * before[name] if decays else 0)
        np.testing.assert_allclose(bufs[name], want_buf, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(getattr(owner, attr), before[name] - 0.1 * want_buf, rtol=1e-12, atol=1e-15)
        assert decays == (name.endswith("conv.kernels") or name == "head.weights")


def test_zero_learning_rate_keeps_parameters_bit_identical():
    net = build_network(SMALL, seed=1)
    before = {n: getattr(o, a).copy() for n, o, a, _ in net.trainable()}
    x, y = toy(8)
    fit(net, x, y, x, y, TrainConfig(batch_size=4, initial_lr=0.0, max_epochs=2))
    for n, o, a, _ in net.trainable():
        assert np.array_equal(getattr(o, a), before[n]), n


def test_recalibration_averages_batch_statistics():
    net = build_network(SMALL, seed=0, dtype=np.float64)
    x, _ = toy(8)
    x = x.astype(np.float64)
    recalibrate_batchnorm(net, x, 4)
    # block h1 sees the noise residual directly: recompute its batch statistics
    from resampnet import layers as L
    means = []
    for start in (0, 4):
        z = L.conv2d_forward(L.conv2d_forward(x[start:start + 4], net.noise[0]), net.blocks["h1"].conv)
        means.append(z.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(net.blocks["h1"].bn.running_mean, np.mean(means, axis=0), rtol=1e-10)
    assert net.blocks["h1"].bn.momentum == 0.99


# ------------------------------------------------------------------ fit

def test_fit_writes_history_and_checkpoints(tmp_path):
    net = build_network(SMALL, seed=0)
    x, y = toy(8)
    state = fit(net, x, y, x[:4], y[:4], TrainConfig(batch_size=4, max_epochs=3), tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "history.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2", "3"]
    assert set(rows[0]) == {"epoch", "train_loss", "val_loss", "val_acc", "lr"}
    assert (tmp_path / "best.dsrn").exists() and (tmp_path / "final.dsrn").exists()
    assert state.epoch == 3 and state.step == 6 and len(state.history) == 3
    final = load_checkpoint(tmp_path / "final.dsrn")
    np.testing.assert_array_equal(final.forward(x), net.forward(x))


def test_best_checkpoint_is_the_lowest_validation_loss(tmp_path):
    net = build_network(SMALL, seed=0)
    x, y = toy(8)
    state = fit(net, x, y, x, y, TrainConfig(batch_size=4, max_epochs=4), tmp_path)
    best = load_checkpoint(tmp_path / "best.dsrn")
    logits = best.forward(x)
    assert loss_and_grad(logits, y, 2)[0] == pytest.approx(state.best_val_loss, rel=1e-6)


def test_fit_is_bit_reproducible():
    x, y = toy(8)
    histories = []
    for _ in range(2):
        net = build_network(SMALL, seed=3)
        histories.append(fit(net, x, y, x, y, TrainConfig(batch_size=4, max_epochs=2, seed=9)).history)
    assert histories[0] == histories[1]


def test_divergence_names_the_step():
    net = build_network(SMALL, seed=0)
    x, y = toy(8)
    x[5] = np.nan
    with pytest.raises(DivergenceError) as info:
        fit(net, x, y, x, y, TrainConfig(batch_size=4, max_epochs=1, seed=0))
    assert info.value.step in (1, 2) and "step" in str(info.value)


def test_fit_contract_errors():
    net = build_network(SMALL, seed=0)
    x, y = toy(8)
    with pytest.raises(ContractError):
        fit(net, x[:3], y[:3], x, y, TrainConfig(batch_size=4))
    with pytest.raises(ContractError):
        fit(net, x, y, x[:0], y[:0], TrainConfig(batch_size=4))
    with pytest.raises(ContractError):
        fit(net, np.zeros((8, 32, 32, 1), np.float32), y, x, y, TrainConfig(batch_size=4))


def test_train_from_manifest(tmp_path, sources):
    m = generate(DatasetRecipe(family="fixedParams", scale_factors=[150], quality_range=[95], patch_size=64,
                               count_per_class=14), sources, tmp_path / "ds")
    net = build_network(SMALL, seed=0)
    state = train(net, m, TrainConfig(batch_size=4, max_epochs=1))
    assert state.step == 20 // 4
    report = evaluate(net, m, "test")
    assert report.total == 4
    with pytest.raises(ContractError):
        train(build_network(NetworkConfig(input_size=64, width_divisor=8, num_classes=3)), m, TrainConfig())


# ------------------------------------------------------------- EvalReport

def test_perfect_predictor_gives_identity_confusion():
    y = np.array([0, 1, 2, 2, 1, 0, 2])
    r = EvalReport.from_predictions(y, y, ["a", "b", "c"])
    np.testing.assert_array_equal(r.confusion, np.diag([2, 2, 3]))
    assert r.accuracy == 1.0 and r.per_class_accuracy == [1.0, 1.0, 1.0]


def test_confusion_rows_are_true_labels():
    r = EvalReport.from_predictions([0, 0, 1], [1, 1, 1], ["a", "b"])
    assert r.confusion.tolist() == [[0, 2], [0, 1]]
    assert r.per_class_accuracy == [0.0, 1.0]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10**6))
def test_accuracy_is_trace_over_total_and_rows_are_class_counts(k, seed):
    rng = np.random.default_rng(seed)
    y, p = rng.integers(0, k, 100), rng.integers(0, k, 100)
    r = EvalReport.from_predictions(y, p, [str(i) for i in range(k)])
    assert r.accuracy == np.trace(r.confusion) / r.confusion.sum()
    np.testing.assert_array_equal(r.confusion.sum(axis=1), np.bincount(y, minlength=k))


def test_uniform_random_predictor_is_at_chance():
    rng = np.random.default_rng(0)
    k, n = 5, 20000
    y = np.repeat(np.arange(k), n // k)
    r = EvalReport.from_predictions(y, rng.integers(0, k, n), [str(i) for i in range(k)])
    assert abs(r.accuracy - 1 / k) < 4 * np.sqrt(0.2 * 0.8 / n)


def test_report_table_and_json():
    r = EvalReport.from_predictions([0, 0, 1, 1], [0, 1, 1, 1], ["50", "110"])
    text = r.table()
    assert text.splitlines()[0].split() == ["Tru\\Pre", "50", "110"]
    assert text.splitlines()[1].split() == ["50", "50.00", "50.00"]
    assert "accuracy 75.00%" in text
    assert '"accuracy": 0.75' in r.to_json()


# ---------------------------------------------------------------- heatmap

def test_heatmap_values_and_shape():
    net = build_network(SMALL, seed=0)
    img = ImageBuffer(np.random.default_rng(0).integers(0, 256, (100, 130, 3), dtype=np.uint8))
    prob = heatmap(net, img, 64, 32)
    assert prob.shape == (100, 130) and prob.min() >= 0 and prob.max() <= 1
    out = heatmap_image(prob)
    assert out.data.dtype == np.uint8 and out.data.shape == (100, 130)


def test_heatmap_of_single_patch_is_constant():
    net = build_network(SMALL, seed=0)
    img = ImageBuffer(np.random.default_rng(1).integers(0, 256, (64, 64), dtype=np.uint8))
    prob = heatmap(net, img, 64, 64)
    assert np.all(prob == prob[0, 0])
    want = net.probabilities(img.data[None, :, :, None].astype(np.float32) / 255)[0, 1]
    assert prob[0, 0] == pytest.approx(float(want), abs=1e-12)


def test_heatmap_errors():
    net = build_network(SMALL, seed=0)
    with pytest.raises(PatchError):
        heatmap(net, ImageBuffer(np.zeros((40, 100), np.uint8)), 64, 32)
    with pytest.raises(ContractError):
        heatmap(net, ImageBuffer(np.zeros((100, 100), np.uint8)), 96, 32)
    with pytest.raises(ContractError):
        heatmap(build_network(NetworkConfig(input_size=64, width_divisor=8, num_classes=3)),
                ImageBuffer(np.zeros((64, 64), np.uint8)))
