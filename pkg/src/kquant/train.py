"""Quantization-aware training.

Reverse-mode differentiation is done with a tape of backward closures, one
per op in the supported set (conv, fc, maxpool, threshold activation,
residual add). Quantized layers run fake-quantized forwards (integer-valued
floats) and pass gradients through straight-through estimators built on the
normal PDF.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import DivergenceError, ModelStateError, ShapeError
from .gaussmath import SQRT2PI, GaussParams, normal_cdf, normal_cdf_array, normal_pdf_array
from .model import Activation, LayerSpec, LayerStats, ModelGraph
from .quantize import QuantConfig, build_threshold_table, quantize_activation, weight_levels, weight_stats
from .tensorcore import col2im, im2col, maxpool2d, maxpool2d_backward

log = logging.getLogger(__name__)

STE_MODES = ("level-scaled", "paper-literal")
FLOAT_WEIGHT_MODES = ("cdf", "raw")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_stage_decay: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs_per_stage: int = 2
    float_epochs: int = 0
    batch_size: int = 64
    quant: QuantConfig = field(default_factory=QuantConfig)
    ste_scaling: str = "level-scaled"
    # also zero the activation STE where x <= 0 (the forward is flat there)
    act_ste_gate: bool = False
    # full-precision layers use the unrounded weight quantizer ("cdf") or raw weights
    float_weights: str = "cdf"
    stats_momentum: float = 0.1
    seed: int = 0
    max_stage: int | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 < self.lr_stage_decay <= 1:
            raise ValueError("lr_stage_decay must be in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.ste_scaling not in STE_MODES:
            raise ValueError(f"ste_scaling must be one of {STE_MODES}")
        if self.float_weights not in FLOAT_WEIGHT_MODES:
            raise ValueError(f"float_weights must be one of {FLOAT_WEIGHT_MODES}")
        if self.batch_size < 1 or self.epochs_per_stage < 1 or self.float_epochs < 0:
            raise ValueError("batch_size and epochs_per_stage must be >= 1, float_epochs >= 0")


@dataclass
class StageSchedule:
    stage: int
    n: int


# -- statistics ---------------------------------------------------------------

def update_stats(stats: LayerStats, batch_mac) -> LayerStats:
    x = np.asarray(batch_mac, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty batch")
    mean, std = float(x.mean()), float(x.std())
    if stats.count == 0:
        return replace(stats, mu=mean, sigma=std, count=x.size)
    m = stats.momentum_ema
    return replace(stats, mu=(1 - m) * stats.mu + m * mean,
                   sigma=(1 - m) * stats.sigma + m * std, count=stats.count + x.size)


# -- activation and weight estimators ------------------------------------------------

def level_scale(z: float, b_a: int) -> float:
    return (1 << b_a) / (1.0 - z)


def cdf_act_forward(x, stats: LayerStats, cfg: QuantConfig, table=None) -> np.ndarray:
    """Fake-quantized threshold activation: integer levels carried as floats."""
    if table is None:
        table = build_threshold_table(stats.params(), cfg.b_a, cfg.rounding)
    return quantize_activation(np.asarray(x, dtype=np.float64), table).astype(np.float64)


def cdf_act_backward(upstream, x, stats: LayerStats, cfg: QuantConfig,
                     scaling: str = "level-scaled") -> np.ndarray:
    """STE: upstream * pdf(x; mu, sigma) * S, S = 2^b_a / (1 - Z) or 1."""
    p = stats.params()
    s = level_scale(normal_cdf(0.0, p), cfg.b_a) if scaling == "level-scaled" else 1.0
    return np.asarray(upstream) * normal_pdf_array(x, p.mu, p.sigma) * s


def ste_weight_backward(upstream, w, params: GaussParams, b_w: int) -> np.ndarray:
    """Gradient of (F(w) - 0.5) * 2^b_w with rounding as identity.

    Zero where the clamp to +-(2^(b_w-1) - 1) is active, i.e. where the
    unrounded value would round beyond the representable range.
    """
    w = np.asarray(w, dtype=np.float64)
    scaled = (normal_cdf_array(w, params.mu, params.sigma) - 0.5) * (1 << b_w)
    live = np.abs(scaled) < (1 << (b_w - 1)) - 0.5
    return np.asarray(upstream) * normal_pdf_array(w, params.mu, params.sigma) * (1 << b_w) * live


def smooth_weight_forward(w, params: GaussParams, b_w: int) -> np.ndarray:
    """Unrounded weight quantizer (F(w) - 0.5) * 2^b_w."""
    return (normal_cdf_array(w, params.mu, params.sigma) - 0.5) * (1 << b_w)


def smooth_weight_backward(upstream, w, params: GaussParams, b_w: int) -> np.ndarray:
    return np.asarray(upstream) * normal_pdf_array(w, params.mu, params.sigma) * (1 << b_w)


def smooth_act_forward(x, stats: LayerStats, b_a: int) -> np.ndarray:
    """Full-precision counterpart of the threshold activation: S * (F(x) - Z) for x > 0."""
    p = stats.params()
    z = normal_cdf(0.0, p)
    y = level_scale(z, b_a) * (normal_cdf_array(x, p.mu, p.sigma) - z)
    return np.where(x > 0, y, 0.0)


def smooth_act_backward(upstream, x, stats: LayerStats, b_a: int) -> np.ndarray:
    p = stats.params()
    s = level_scale(normal_cdf(0.0, p), b_a)
    return upstream * normal_pdf_array(x, p.mu, p.sigma) * s * (x > 0)


# -- optimizer / schedule ---------------------------------------------------------

def sgd_step(params: np.ndarray, velocity: np.ndarray, grads: np.ndarray, cfg: TrainConfig):
    if params.shape != velocity.shape or params.shape != grads.shape:
        raise ShapeError("params, velocity and grads must share a shape")
    v = cfg.momentum * velocity + (grads + cfg.weight_decay * params)
    return params - cfg.lr * v, v


def _downstream_entry(model: ModelGraph, idx: int) -> Activation | None:
    for l in model.layers[idx + 1:]:
        if l.kind == "maxpool":
            continue
        if l.kind in ("act_quant", "residual_block"):
            return l.act
        return None
    return None


def advance_stage(schedule: StageSchedule, model: ModelGraph) -> ModelGraph:
    """Quantize the next layer in order; activations fed by it restart their
    statistics because their input switches to the integer MAC scale."""
    units = model.units()
    if schedule.stage >= schedule.n or schedule.stage >= len(units):
        warnings.warn(f"already at final stage {schedule.stage}; nothing to advance")
        return model
    unit = units[schedule.stage]
    unit.set_quantized(True)
    for a in unit.activations():
        if a is not unit.act or unit.kind != "residual_block":
            a.reset()
    nxt = _downstream_entry(model, model.layers.index(unit))
    if nxt is not None:
        nxt.reset()
    schedule.stage += 1
    return model


def set_stage(model: ModelGraph, stage: int) -> ModelGraph:
    """Flag the first ``stage`` units quantized without touching statistics."""
    for i, u in enumerate(model.units()):
        u.set_quantized(i < stage)
    return model


# -- forward / backward engine ---------------------------------------------------

Backward = Callable[[np.ndarray], np.ndarray]


class Tape:
    """Collects parameter gradients during the backward sweep."""

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, g: np.ndarray) -> None:
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g


def _mac_forward(l: LayerSpec, x, x_int, cfg: TrainConfig, tape: Tape):
    q = cfg.quant
    w = l.weight
    if l.quantized:
        if not x_int:
            raise ModelStateError(f"{l.name} is quantized but receives real-valued input")
        wp = weight_stats(w)
        w_eff = weight_levels(w, wp, q.b_w, q.rounding).astype(np.float64)
    elif cfg.float_weights == "cdf":
        wp = weight_stats(w)
        w_eff = smooth_weight_forward(w, wp, q.b_w)
    else:
        w_eff = w
    n = x.shape[0]
    if l.kind == "fc":
        xs = x.reshape(n, -1)
        out = xs @ w_eff.T

        def back_lin(g):
            dw = g.T @ xs
            return (g @ w_eff).reshape(x.shape), dw
        inner = back_lin
    else:
        spec = l.conv
        cols, oh, ow = im2col(x, spec)
        wm = w_eff.reshape(spec.out_ch, -1)
        out = (cols @ wm.T).reshape(n, oh, ow, spec.out_ch).transpose(0, 3, 1, 2)

        def back_conv(g):
            gm = g.transpose(0, 2, 3, 1).reshape(-1, spec.out_ch)
            dw = (gm.T @ cols).reshape(w.shape)
            return col2im(gm @ wm, x.shape, spec), dw
        inner = back_conv

    def back(g):
        dx, dw = inner(g)
        if l.quantized:
            dw = ste_weight_backward(dw, w, wp, q.b_w)
        elif cfg.float_weights == "cdf":
            dw = smooth_weight_backward(dw, w, wp, q.b_w)
        tape.add(l.name, dw)
        return dx

    return out, l.quantized, back


def _act_forward(act: Activation, x, x_int, cfg: TrainConfig, train: bool):
    q = cfg.quant
    if train:
        act.stats = update_stats(act.stats, x)
    elif act.stats.count == 0:
        raise ModelStateError(f"activation {act.name} has no statistics yet")
    stats = act.stats
    if x_int:
        if train or act.table is None:
            act.table = build_threshold_table(stats.params(), q.b_a, q.rounding)
        y = cdf_act_forward(x, stats, q, act.table)
        if cfg.act_ste_gate:
            return y, True, lambda g: cdf_act_backward(g, x, stats, q, cfg.ste_scaling) * (x > 0)
        return y, True, lambda g: cdf_act_backward(g, x, stats, q, cfg.ste_scaling)
    act.table = None
    if stats.sigma <= 0:
        raise DivergenceError(f"activation {act.name} input collapsed to a constant")
    y = smooth_act_forward(x, stats, q.b_a)
    return y, False, lambda g: smooth_act_backward(g, x, stats, q.b_a)


def _layer_forward(l: LayerSpec, x, x_int, cfg, tape, train):
    if l.kind in ("conv", "fc"):
        y, y_int, back_mac = _mac_forward(l, x, x_int, cfg, tape)
        if l.act is None:
            return y, y_int, back_mac
        z, z_int, back_act = _act_forward(l.act, y, y_int, cfg, train)
        return z, z_int, lambda g: back_mac(back_act(g))
    if l.kind == "maxpool":
        y = maxpool2d(x, l.window)
        return y, x_int, lambda g: maxpool2d_backward(g, x, l.window)
    if l.kind == "act_quant":
        return _act_forward(l.act, x, x_int, cfg, train)
    # modified basic block: entry activation, conv1+act, conv2, plus shortcut
    lv, lv_int, b_entry = _act_forward(l.act, x, x_int, cfg, train)
    h1, h1_int, b_c1 = _layer_forward(l.conv1, lv, lv_int, cfg, tape, train)
    h2, h2_int, b_c2 = _mac_forward(l.conv2, h1, h1_int, cfg, tape)
    if l.shortcut is not None:
        sc, _, b_sc = _mac_forward(l.shortcut, lv, lv_int, cfg, tape)
    else:
        sc, b_sc = x, None

    def back(g):
        d_lv = b_c1(b_c2(g))
        if b_sc is not None:
            return b_entry(d_lv + b_sc(g))
        return b_entry(d_lv) + g

    return h2 + sc, h2_int, back


def forward(model: ModelGraph, x, cfg: TrainConfig, train: bool = False):
    """Training-path forward. Returns (logits, backward_fn, tape).

    Inputs are integer activation levels (as floats or ints); the quantized
    prefix of the model therefore stays on integer values end to end.
    """
    tape = Tape()
    h = np.asarray(x, dtype=np.float64)
    if h.ndim == 3:
        h = h[None]
    is_int = True
    backs = []
    for l in model.layers:
        h, is_int, b = _layer_forward(l, h, is_int, cfg, tape, train)
        backs.append(b)

    def backward(g):
        for b in reversed(backs):
            g = b(g)
        return g

    return h, backward, tape


def logit_scale(model: ModelGraph, cfg: TrainConfig) -> float:
    """Loss-side divisor for classifier logits.

    The (smooth or rounded) weight quantizer multiplies weights by roughly
    2^b_w * pdf(mu_w), its slope at the mean; dividing that back out keeps
    the softmax temperature comparable to a raw-weight classifier. Argmax is
    unaffected.
    """
    last = model.units()[-1]
    if not last.quantized and cfg.float_weights == "raw":
        return 1.0
    p = weight_stats(last.weight)
    return (1 << model.quant.b_w) / (p.sigma * SQRT2PI)


def softmax_xent(logits: np.ndarray, y: np.ndarray, scale: float = 1.0):
    z = logits / scale
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(-np.log(p[np.arange(n), y] + 1e-300).mean())
    g = p
    g[np.arange(n), y] -= 1.0
    return loss, g / (n * scale)


def evaluate(model: ModelGraph, x, y, cfg: TrainConfig, batch_size: int = 500) -> float:
    correct = 0
    for i in range(0, len(x), batch_size):
        logits, _, _ = forward(model, x[i:i + batch_size], cfg, train=False)
        correct += int((logits.argmax(axis=1) == y[i:i + batch_size]).sum())
    return correct / len(x)


def _stats_snapshot(model: ModelGraph) -> dict:
    return {a.name: {"mu": a.stats.mu, "sigma": a.stats.sigma} for a in model.activations()}


def train_epoch(model, x, y, cfg: TrainConfig, rng, velocity: dict) -> tuple[float, float]:
    """One pass in seed-fixed order; returns (mean loss, running train accuracy)."""
    params = {m.name: m for m in model.mac_layers()}
    order = rng.permutation(len(x))
    total, seen, correct = 0.0, 0, 0
    for i in range(0, len(x), cfg.batch_size):
        idx = order[i:i + cfg.batch_size]
        logits, backward, tape = forward(model, x[idx], cfg, train=True)
        correct += int((logits.argmax(axis=1) == y[idx]).sum())
        loss, g = softmax_xent(logits, y[idx], logit_scale(model, cfg))
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at sample {i}")
        backward(g)
        for name, grad in tape.grads.items():
            layer = params[name]
            v = velocity.get(name)
            if v is None:
                v = np.zeros_like(layer.weight)
            layer.weight, velocity[name] = sgd_step(layer.weight, v, grad, cfg)
        total += loss * len(idx)
        seen += len(idx)
    return total / seen, correct / seen


def train_model(model: ModelGraph, dataset, cfg: TrainConfig, on_record=None):
    """Float epochs (stage 0), then ``epochs_per_stage`` epochs at each stage
    1..N of the gradual schedule. Returns (model, records).

    ``dataset`` is (x_train, y_train) or (x_train, y_train, x_test, y_test)
    with inputs already encoded as integer levels.
    """
    x, y = dataset[0], np.asarray(dataset[1])
    if len(x) == 0:
        raise ValueError("empty dataset")
    test = dataset[2:4] if len(dataset) >= 4 else None
    rng = np.random.default_rng(cfg.seed)
    n_units = len(model.units())
    last = n_units if cfg.max_stage is None else min(cfg.max_stage, n_units)
    schedule = StageSchedule(model.stage(), n_units)
    velocity: dict[str, np.ndarray] = {}
    records = []

    def run(stage, epochs):
        stage_cfg = replace(cfg, lr=cfg.lr * cfg.lr_stage_decay ** stage)
        for e in range(epochs):
            loss, acc = train_epoch(model, x, y, stage_cfg, rng, velocity)
            rec = {"stage": stage, "epoch": len(records), "loss": loss, "accuracy": acc}
            if test is not None:
                rec["test_accuracy"] = evaluate(model, test[0], np.asarray(test[1]), cfg)
            rec["layers"] = _stats_snapshot(model)
            records.append(rec)
            log.info("stage %d epoch %d loss %.4f acc %.4f", stage, rec["epoch"], loss, rec["accuracy"])
            if on_record is not None:
                on_record(rec)

    if schedule.stage == 0:
        run(0, cfg.float_epochs)
    while schedule.stage < last:
        advance_stage(schedule, model)
        run(schedule.stage, cfg.epochs_per_stage)
    model.freeze()
    return model, records


def calibrate(model: ModelGraph, x, cfg: TrainConfig, batches: int = 8) -> ModelGraph:
    """Post-hoc quantization: walk the schedule, refreshing statistics at each
    stage with forward passes only (no weight updates)."""
    rng = np.random.default_rng(cfg.seed)
    for u in model.units():
        u.set_quantized(False)
    for a in model.activations():
        a.reset()
    schedule = StageSchedule(0, len(model.units()))
    last = schedule.n if cfg.max_stage is None else min(cfg.max_stage, schedule.n)
    while schedule.stage < last:
        advance_stage(schedule, model)
        order = rng.permutation(len(x))
        for b in range(batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if len(idx) == 0:
                break
            forward(model, x[idx], cfg, train=True)
    return model.freeze()
