import math

import numpy as np
import pytest

from kquant.errors import DivergenceError, ShapeError
from kquant.gaussmath import GaussParams, normal_cdf, normal_cdf_array
import kquant.train as train_mod
from kquant.model import LayerStats, build_resnet_small, build_small_conv
from kquant.quantize import QuantConfig, build_threshold_table, quantize_activation, weight_stats
from kquant.train import (
    StageSchedule,
    TrainConfig,
    advance_stage,
    cdf_act_backward,
    cdf_act_forward,
    forward,
    level_scale,
    logit_scale,
    set_stage,
    sgd_step,
    smooth_act_backward,
    smooth_act_forward,
    smooth_weight_forward,
    softmax_xent,
    ste_weight_backward,
    train_model,
    update_stats,
)

Q2 = QuantConfig(2, 4)
S900 = LayerStats(900.0, 900.0, count=1)


# -- statistics ---------------------------------------------------------------

def test_first_batch_initializes():
    s = update_stats(LayerStats(), np.array([0.0, 0.0, 2.0, 2.0]))
    assert (s.mu, s.sigma) == (1.0, 1.0)


def test_ema_two_batches():
    s = update_stats(LayerStats(momentum_ema=0.1), np.array([0.0, 0.0, 2.0, 2.0]))
    s = update_stats(s, np.array([4.0, 8.0]))
    assert s.mu == pytest.approx(0.9 * 1.0 + 0.1 * 6.0)
    assert s.sigma == pytest.approx(0.9 * 1.0 + 0.1 * 2.0)
    assert s.count == 6


def test_constant_stream_converges():
    s = update_stats(LayerStats(), np.array([0.0, 10.0]))
    for _ in range(400):
        s = update_stats(s, np.full(8, 3.0))
    assert s.mu == pytest.approx(3.0, abs=1e-12)
    assert s.sigma == pytest.approx(0.0, abs=1e-12)


def test_stats_converge_to_source():
    rng = np.random.default_rng(0)
    s = LayerStats()
    for _ in range(200):
        s = update_stats(s, rng.normal(900, 300, 256))
    assert s.mu == pytest.approx(900, rel=0.01)
    assert s.sigma == pytest.approx(300, rel=0.01)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        update_stats(LayerStats(), np.array([]))


# -- activation estimator --------------------------------------------------------

def test_act_forward_examples():
    assert cdf_act_forward(np.array([900.0]), S900, Q2).tolist() == [2.0]
    assert cdf_act_forward(np.array([-3.0, 0.0]), S900, Q2).tolist() == [0.0, 0.0]


def test_act_forward_matches_integer_quantizer():
    xs = np.arange(-100, 2500)
    t = build_threshold_table(S900.params(), 2)
    np.testing.assert_array_equal(cdf_act_forward(xs.astype(float), S900, Q2), quantize_activation(xs, t))


def test_act_backward_examples():
    g = cdf_act_backward(np.array([2.0]), np.array([900.0]), S900, Q2, "paper-literal")
    assert g[0] == pytest.approx(2.0 / (900 * math.sqrt(2 * math.pi)))
    z = normal_cdf(0, S900.params())
    g = cdf_act_backward(np.array([1.0]), np.array([900.0]), S900, Q2, "level-scaled")
    assert g[0] == pytest.approx(4 / (1 - z) / (900 * math.sqrt(2 * math.pi)))
    assert cdf_act_backward(np.array([1.0]), np.array([900.0 + 10 * 900]), S900, Q2)[0] < 1e-20


def _fd_points(p, n=1000, seed=0):
    return np.random.default_rng(seed).uniform(p.mu - 3 * p.sigma, p.mu + 3 * p.sigma, n)


@pytest.mark.parametrize("scaling", ["level-scaled", "paper-literal"])
@pytest.mark.parametrize("b_a", [1, 2, 4])
def test_act_backward_matches_finite_differences(scaling, b_a):
    stats = LayerStats(-120.0, 700.0, count=1)
    p, cfg = stats.params(), QuantConfig(b_a, 4)
    z = normal_cdf(0, p)
    s = level_scale(z, b_a) if scaling == "level-scaled" else 1.0
    x = _fd_points(p)
    h = 1e-4 * p.sigma

    def surrogate(v):
        return s * (normal_cdf_array(v, p.mu, p.sigma) - z)

    fd = (surrogate(x + h) - surrogate(x - h)) / (2 * h)
    g = cdf_act_backward(np.ones_like(x), x, stats, cfg, scaling)
    np.testing.assert_allclose(g, fd, rtol=1e-4)


def test_smooth_act_pair():
    stats = LayerStats(300.0, 500.0, count=1)
    x = np.linspace(-1000, 2000, 301)
    x = x[np.abs(x) > 1]
    h = 1e-4 * 500
    fd = (smooth_act_forward(x + h, stats, 3) - smooth_act_forward(x - h, stats, 3)) / (2 * h)
    np.testing.assert_allclose(smooth_act_backward(np.ones_like(x), x, stats, 3), fd, rtol=1e-4, atol=1e-12)
    y = smooth_act_forward(np.array([-5.0, 1e9]), stats, 3)
    assert y[0] == 0.0 and y[1] == pytest.approx(8.0)


# -- weight estimator ---------------------------------------------------------------

def test_weight_backward_examples():
    p = GaussParams(0.1, 0.5)
    g = ste_weight_backward(np.array([1.0]), np.array([0.1]), p, 4)
    assert g[0] == pytest.approx(16 / (0.5 * math.sqrt(2 * math.pi)))
    assert ste_weight_backward(np.array([1.0]), np.array([0.1 + 5.0]), p, 4)[0] == 0.0
    assert ste_weight_backward(np.array([1.0]), np.array([0.1 - 5.0]), p, 4)[0] == 0.0


@pytest.mark.parametrize("b_w", [2, 3, 4, 8])
def test_weight_backward_matches_finite_differences(b_w):
    p = GaussParams(-0.02, 0.07)
    w = _fd_points(p, seed=b_w)
    h = 1e-4 * p.sigma
    edge = (1 << (b_w - 1)) - 0.5

    def surrogate(v):
        # unrounded quantizer, saturating exactly where the integer clamp engages
        return np.clip(smooth_weight_forward(v, p, b_w), -edge, edge)

    # the clamp kink itself has no derivative
    away = np.abs(np.abs(smooth_weight_forward(w, p, b_w)) - edge) > 1e-2
    fd = (surrogate(w + h) - surrogate(w - h)) / (2 * h)
    g = ste_weight_backward(np.ones_like(w), w, p, b_w)
    np.testing.assert_allclose(g[away], fd[away], rtol=1e-4, atol=1e-9)
    assert away.sum() > 950


# -- optimizer ------------------------------------------------------------------------

def test_plain_sgd():
    cfg = TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0)
    p, v = sgd_step(np.array([1.0, 2.0]), np.zeros(2), np.array([0.5, -1.0]), cfg)
    np.testing.assert_allclose(p, [0.95, 2.1])


def test_sgd_zero_grads_no_change():
    cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.0)
    p, v = sgd_step(np.array([1.0, -3.0]), np.zeros(2), np.zeros(2), cfg)
    np.testing.assert_array_equal(p, [1.0, -3.0])
    np.testing.assert_array_equal(v, [0.0, 0.0])


def test_sgd_two_step_trace():
    cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.01)
    p, v = sgd_step(np.array([1.0]), np.zeros(1), np.array([0.5]), cfg)
    assert v[0] == pytest.approx(0.51) and p[0] == pytest.approx(0.949)
    p, v = sgd_step(p, v, np.array([0.5]), cfg)
    assert v[0] == pytest.approx(0.96849) and p[0] == pytest.approx(0.852151)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step(np.zeros(2), np.zeros(3), np.zeros(2), TrainConfig())


@pytest.mark.parametrize("kw", [{"lr": -1}, {"momentum": 1.0}, {"weight_decay": -1e-4},
                                {"ste_scaling": "bogus"}, {"epochs_per_stage": 0}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- schedule ---------------------------------------------------------------------------

def _flags(model):
    return [u.quantized for u in model.units()]


def test_schedule_prefix():
    m = build_small_conv(widths=(2, 2, 2))
    n = len(m.units())
    sched = StageSchedule(0, n)
    assert _flags(m) == [False] * n
    for i in range(1, n + 1):
        advance_stage(sched, m)
        assert _flags(m) == [True] * i + [False] * (n - i)
    with pytest.warns(UserWarning):
        advance_stage(sched, m)
    assert _flags(m) == [True] * n and sched.stage == n


def test_block_switches_as_one_unit():
    m = build_resnet_small(widths=(2, 4))
    set_stage(m, 2)
    block = m.units()[1]
    assert block.kind == "residual_block"
    assert all(c.quantized for c in block.mac_children())
    assert not any(c.quantized for u in m.units()[2:] for c in u.mac_children())


def test_switch_resets_affected_stats():
    m = build_small_conv(widths=(2, 2, 2))
    for a in m.activations():
        a.stats = LayerStats(5.0, 2.0, count=10)
    advance_stage(StageSchedule(0, len(m.units())), m)
    counts = {a.name: a.stats.count for a in m.activations()}
    assert counts == {"conv1.act": 0, "conv2.act": 10, "conv3.act": 10}


def test_integer_path_follows_quantized_prefix():
    m = build_resnet_small(widths=(2, 4))
    assert m.integer_activations() == set()
    set_stage(m, 1)
    assert m.integer_activations() == {"block1_1.entry"}
    set_stage(m, 2)
    assert m.integer_activations() == {"block1_1.entry", "block1_1.conv1.act", "block2_1.entry"}


# -- engine ----------------------------------------------------------------------------

def _seed_stats(model, x, cfg):
    forward(model, x, cfg, train=True)


@pytest.mark.parametrize("float_weights", ["raw", "cdf"])
@pytest.mark.parametrize("builder", [
    lambda: build_small_conv(widths=(3, 4, 5), seed=1),
    lambda: build_resnet_small(widths=(3, 4), seed=2),
])
def test_float_backprop_matches_finite_differences(builder, float_weights, toy_levels, monkeypatch):
    model = builder()
    cfg = TrainConfig(quant=model.quant, float_weights=float_weights)
    # the estimators treat mu_w, sigma_w as constants; freeze them for the probe
    frozen = {id(l.weight): weight_stats(l.weight) for l in model.mac_layers()}
    monkeypatch.setattr(train_mod, "weight_stats", lambda w: frozen[id(w)])
    x, y = toy_levels[0][:6], toy_levels[1][:6]
    _seed_stats(model, x, cfg)
    scale = logit_scale(model, cfg)

    def loss():
        logits, _, _ = forward(model, x, cfg, train=False)
        return softmax_xent(logits, y, scale)[0]

    logits, backward, tape = forward(model, x, cfg, train=False)
    backward(softmax_xent(logits, y, scale)[1])
    rng = np.random.default_rng(0)
    for layer in model.mac_layers():
        for _ in range(3):
            idx = tuple(rng.integers(0, s) for s in layer.weight.shape)
            old = layer.weight[idx]
            h = 1e-5 * max(1.0, abs(old))
            layer.weight[idx] = old + h
            up = loss()
            layer.weight[idx] = old - h
            down = loss()
            layer.weight[idx] = old
            fd = (up - down) / (2 * h)
            assert tape.grads[layer.name][idx] == pytest.approx(fd, rel=1e-4, abs=1e-8), layer.name


def test_lr_zero_keeps_parameters(toy_levels):
    m = build_small_conv(widths=(2, 2, 2))
    before = [l.weight.copy() for l in m.mac_layers()]
    cfg = TrainConfig(lr=0.0, epochs_per_stage=1, float_epochs=1, quant=m.quant)
    train_model(m, toy_levels[:2], cfg)
    for b, l in zip(before, m.mac_layers()):
        np.testing.assert_array_equal(b, l.weight)


def test_training_is_deterministic(toy_levels):
    cfg = TrainConfig(epochs_per_stage=1, float_epochs=1, seed=7)
    runs = []
    for _ in range(2):
        m = build_small_conv(widths=(2, 3, 4), seed=7)
        _, recs = train_model(m, toy_levels, cfg)
        runs.append((recs, [l.weight.tobytes() for l in m.mac_layers()]))
    assert runs[0] == runs[1]


def test_stage_monotone_during_training(toy_levels):
    seen = []
    m = build_small_conv(widths=(2, 2, 2))
    cfg = TrainConfig(epochs_per_stage=1, float_epochs=1)
    train_model(m, toy_levels[:2], cfg, on_record=lambda r: seen.append(_flags(m)))
    counts = [sum(f) for f in seen]
    assert counts == sorted(counts) == [0, 1, 2, 3, 4]
    for a, b in zip(seen, seen[1:]):
        assert all(y or not x for x, y in zip(a, b))


def test_max_stage_stops_schedule(toy_levels):
    m = build_small_conv(widths=(2, 2, 2))
    train_model(m, toy_levels[:2], TrainConfig(epochs_per_stage=1, max_stage=2))
    assert _flags(m) == [True, True, False, False]


def test_divergence_detected(toy_levels):
    m = build_small_conv(widths=(2, 2, 2))
    m.units()[-1].weight[0, 0] = np.nan
    cfg = TrainConfig(float_epochs=1, float_weights="raw")
    with pytest.raises(DivergenceError):
        train_model(m, toy_levels[:2], cfg)


def test_record_layout(toy_levels):
    m = build_small_conv(widths=(2, 2, 2))
    _, recs = train_model(m, toy_levels, TrainConfig(epochs_per_stage=1, max_stage=1))
    r = recs[0]
    assert list(r) == ["stage", "epoch", "loss", "accuracy", "test_accuracy", "layers"]
    assert set(r["layers"]) == {"conv1.act", "conv2.act", "conv3.act"}
    assert set(r["layers"]["conv1.act"]) == {"mu", "sigma"}


def test_gated_ste_option(toy_levels):
    m = build_small_conv(widths=(2, 2, 2))
    cfg = TrainConfig(epochs_per_stage=1, act_ste_gate=True, max_stage=2)
    _, recs = train_model(m, toy_levels[:2], cfg)
    assert all(math.isfinite(r["loss"]) for r in recs)
