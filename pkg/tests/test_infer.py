import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from kquant.errors import ModelStateError, ShapeError
from kquant.gaussmath import GaussParams
from kquant.infer import (
    IntegerAudit,
    acc_bits_for,
    analyze_ranges,
    estimate_hw_cost,
    execute_graph,
    max_mac,
    predict,
    residual_block_forward,
)
from kquant.model import Activation, LayerSpec, LayerStats, ModelGraph, build_resnet_small, build_vgg_like
from kquant.quantize import QuantConfig, QuantizedWeights, ThresholdTable, build_threshold_table
from kquant.tensorcore import ACC, LEVEL, ConvSpec, TensorI, conv2d_int, levels, weights
from kquant.train import TrainConfig, calibrate, forward, set_stage


def _table(ts, b_a=2, p=GaussParams(0, 100)):
    return ThresholdTable(b_a, ts, 0.5, p)


def _conv(name, w, spec, table=None, b_w=4):
    l = LayerSpec(name, "conv" if len(np.shape(w)) == 4 else "fc", conv=spec,
                  weight=np.asarray(w, dtype=float), quantized=True)
    l.qweights = QuantizedWeights(weights(w, b_w), GaussParams(0, 1), b_w)
    if table is not None:
        l.act = Activation(f"{name}.act", LayerStats(1.0, 1.0, count=1), table)
    return l


def test_hand_sized_conv_and_threshold():
    layer = _conv("c", np.full((1, 1, 1, 1), 7), ConvSpec(1, 1, kernel=1, padding=0), _table((5, 10, 15)))
    model = ModelGraph([layer], (1, 2, 2), QuantConfig(2, 4))
    out = execute_graph(model, np.array([[[0, 1], [2, 3]]]))
    # MACs 0, 7, 14, 21 -> levels 0, 2, 3, 3
    assert out.data.tolist() == [[[[0, 2], [3, 3]]]]
    assert out.domain == LEVEL


def test_zero_input_gives_zero_logits(small_q, resnet_q):
    for m in (small_q, resnet_q):
        assert np.all(execute_graph(m, np.zeros((2, *m.input_shape), int)).data == 0)


@pytest.mark.parametrize("which", ["small_q", "resnet_q"])
def test_cross_path_equivalence(which, request):
    model = request.getfixturevalue(which)
    rng = np.random.default_rng(11)
    x = rng.integers(0, 16, size=(100, *model.input_shape))
    fake, _, _ = forward(model, x, TrainConfig(quant=model.quant), train=False)
    exact = execute_graph(model, x).data
    np.testing.assert_array_equal(fake, exact.astype(float))
    np.testing.assert_array_equal(predict(model, x, batch_size=33), exact.argmax(axis=1))


def test_checked_mode_clean(small_q, resnet_q, toy_levels):
    for m in (small_q, resnet_q):
        audit = IntegerAudit()
        execute_graph(m, toy_levels[2][:8], audit)
        assert audit.clean and audit.ops > 0


def test_refuses_partial_model(small_q):
    set_stage(small_q, 2)
    with pytest.raises(ModelStateError):
        execute_graph(small_q, np.zeros((1, *small_q.input_shape), int))


def test_refuses_float_input(small_q):
    with pytest.raises(ModelStateError):
        execute_graph(small_q, np.zeros((1, *small_q.input_shape)))
    with pytest.raises(ShapeError):
        execute_graph(small_q, np.zeros((1, 1, 8, 8), int))


# -- residual block ----------------------------------------------------------------

def _block(rng, ch=3, shortcut=None, hw=5):
    spec = ConvSpec(ch, ch)
    t_entry = build_threshold_table(GaussParams(40, 120), 2)
    t_mid = build_threshold_table(GaussParams(30, 90), 2)
    c1 = _conv("b.conv1", rng.integers(-7, 8, (ch, ch, 3, 3)), spec, t_mid)
    c2 = _conv("b.conv2", rng.integers(-7, 8, (ch, ch, 3, 3)), spec)
    blk = LayerSpec("b", "residual_block", act=Activation("b.entry", LayerStats(40, 120, count=1), t_entry),
                    conv1=c1, conv2=c2, shortcut=shortcut, quantized=True)
    x = TensorI(rng.integers(-300, 600, (2, ch, hw, hw)), 600, ACC)
    return blk, x


def test_zero_block_input():
    blk, x = _block(np.random.default_rng(0))
    y = residual_block_forward(TensorI(np.zeros_like(x.data), 0, ACC), blk)
    assert np.all(y.data == 0)


def test_zero_shortcut_reduces_to_chain():
    rng = np.random.default_rng(1)
    sc = _conv("b.shortcut", np.zeros((3, 3, 1, 1), int), ConvSpec(3, 3, kernel=1, padding=0))
    blk, x = _block(rng, shortcut=sc)
    y = residual_block_forward(x, blk)
    lv = levels(np.vectorize(lambda v: oracles.quantize_level(v, blk.act.table.thresholds))(x.data), 2)
    h = conv2d_int(lv, blk.conv1.qweights.values, blk.conv1.conv)
    h = levels(np.vectorize(lambda v: oracles.quantize_level(v, blk.conv1.act.table.thresholds))(h.data), 2)
    h = conv2d_int(h, blk.conv2.qweights.values, blk.conv2.conv)
    np.testing.assert_array_equal(y.data, h.data)


def test_orderings_differ_and_only_modified_keeps_scale():
    rng = np.random.default_rng(2)
    blk, x = _block(rng)
    post = build_threshold_table(GaussParams(50, 150), 2)
    a_mod, a_orig = IntegerAudit(), IntegerAudit()
    y_mod = residual_block_forward(x, blk, a_mod, "modified")
    y_orig = residual_block_forward(x, blk, a_orig, "original", post_table=post)
    assert y_mod.domain == ACC and y_orig.domain == LEVEL
    assert not np.array_equal(y_mod.data, y_orig.data)
    assert a_mod.scale_events == []
    assert a_orig.scale_events == [("b.add", ACC, LEVEL)]


def test_projection_shortcut_consumes_levels():
    rng = np.random.default_rng(3)
    sc = _conv("b.shortcut", rng.integers(-7, 8, (3, 3, 1, 1)), ConvSpec(3, 3, kernel=1, padding=0))
    blk, x = _block(rng, shortcut=sc)
    audit = IntegerAudit()
    residual_block_forward(x, blk, audit)
    assert audit.clean


def test_residual_scale_inequality():
    # modified block: residual addend bounded by an accumulator value; original: by m_a
    b_a, b_w, i, k = 4, 4, 64, 3
    m_a = 2 ** b_a - 1
    m_m = max_mac(b_a, b_w, i * k * k)
    assert m_m / m_a >= i * k * k * (2 ** (b_w - 1) - 1)


# -- range analysis ----------------------------------------------------------------

def test_range_closed_forms():
    assert max_mac(4, 4, 64 * 9) == 60480
    assert acc_bits_for(60480) == 17
    assert acc_bits_for(2 ** 16) == 18
    rows = analyze_ranges(build_vgg_like(quant=QuantConfig(4, 4), widths=(4, 64, 8, 8, 8, 8), fc_width=8)).rows
    conv3 = next(r for r in rows if r.name == "conv3")
    assert (conv3.m_a, conv3.fan_in, conv3.m_m, conv3.acc_bits) == (15, 576, 60480, 17)


def test_worst_case_hits_bound():
    spec = ConvSpec(2, 64)
    x = levels(np.full((1, 64, 3, 3), 15), 4)
    w = weights(np.full((2, 64, 3, 3), 7), 4)
    out = conv2d_int(x, w, spec)
    assert out.data.max() == 60480 == out.bound


@given(seed=st.integers(0, 2 ** 32 - 1))
@settings(max_examples=20, deadline=None)
def test_random_macs_within_bound(seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(4, 8)
    x = levels(rng.integers(0, 16, (3, 8, 4, 4)), 4)
    w = weights(rng.integers(-7, 8, (4, 8, 3, 3)), 4)
    assert np.abs(conv2d_int(x, w, spec).data).max() <= max_mac(4, 4, 72)


def test_resnet_range_rows(resnet_q):
    names = [r.name for r in analyze_ranges(resnet_q).rows]
    assert names == ["stem", "block1_1.conv1", "block1_1.conv2", "block1_1.add",
                     "block2_1.conv1", "block2_1.conv2", "block2_1.shortcut", "block2_1.add",
                     "head_act", "head_pool", "fc"]


def test_one_block_net_respects_bounds(toy_levels):
    m = build_resnet_small(stages=(1,), widths=(4,), seed=9)
    calibrate(m, toy_levels[0], TrainConfig(quant=m.quant), batches=2)
    assert m.layers[1].shortcut is None
    audit = IntegerAudit()
    out = execute_graph(m, toy_levels[2][:16], audit)
    assert audit.clean
    rows = {r.name: r for r in analyze_ranges(m).rows}
    assert np.abs(out.data).max() <= rows["fc"].m_m


# -- hardware cost -----------------------------------------------------------------

def test_comparators_per_unit():
    for b_a, per in [(3, 7), (4, 15)]:
        cost = estimate_hw_cost(build_vgg_like(quant=QuantConfig(b_a, 4), widths=(2, 2, 2, 2, 2, 2), fc_width=4))
        act_rows = [r for r in cost.rows if r.units]
        assert all(r.comparators == per * r.units for r in act_rows)


def test_vgg_cost_matches_hand_sum():
    cost = estimate_hw_cost(build_vgg_like(quant=QuantConfig(4, 4)))
    # accumulator widths by hand: conv1 13, conv2-3 18, conv4-5 19, conv6 20, fc1 21, fc2 18
    assert cost.totals == {"units": 7, "comparators": 105, "mux_count": 105,
                           "comparator_bits": 15 * (13 + 18 + 18 + 19 + 19 + 20 + 21),
                           "adder_bits": 13 + 18 + 18 + 19 + 19 + 20 + 21 + 18}
    keys = cost.totals
    for k in keys:
        assert keys[k] == sum(getattr(r, k) for r in cost.rows)


def test_parallel_cost_scales_with_feature_maps():
    m = build_vgg_like(quant=QuantConfig(4, 4), widths=(2, 2, 2, 2, 2, 2), fc_width=4)
    par = {r.name: r for r in estimate_hw_cost(m, parallel=True).rows}
    assert par["conv1"].units == 2 * 32 * 32
    assert par["fc1"].units == 4
    assert par["pool1"].units == 0
