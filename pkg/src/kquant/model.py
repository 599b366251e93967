"""Layer graph shared by the training and integer inference paths, plus the
model zoo (VGG-like, a toy conv net, and residual nets built from the
modified basic block whose post-add activation lives at the next block's
input).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ModelStateError, ShapeError
from .gaussmath import GaussParams
from .quantize import QuantConfig, QuantizedWeights, ThresholdTable, build_threshold_table, quantize_weights
from .tensorcore import ConvSpec

KINDS = ("conv", "fc", "maxpool", "act_quant", "residual_block")


@dataclass(frozen=True)
class LayerStats:
    """Running mean/stddev of one activation's input (MAC values)."""

    mu: float = 0.0
    sigma: float = 0.0
    momentum_ema: float = 0.1
    count: int = 0

    def params(self) -> GaussParams:
        return GaussParams(self.mu, self.sigma)


@dataclass
class Activation:
    """A threshold activation node: statistics plus the table built from them.

    ``table`` is only present while the node sees integer (quantized) input.
    """

    name: str
    stats: LayerStats = field(default_factory=LayerStats)
    table: ThresholdTable | None = None

    def reset(self) -> None:
        self.stats = LayerStats(momentum_ema=self.stats.momentum_ema)
        self.table = None


@dataclass
class LayerSpec:
    name: str
    kind: str
    conv: ConvSpec | None = None
    weight: np.ndarray | None = None
    qweights: QuantizedWeights | None = None
    act: Activation | None = None
    window: int = 0
    quantized: bool = False
    # residual_block only; ``act`` is then the block's entry activation and
    # conv1.act the activation between the two convolutions
    conv1: "LayerSpec | None" = None
    conv2: "LayerSpec | None" = None
    shortcut: "LayerSpec | None" = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")

    @property
    def is_mac(self) -> bool:
        return self.kind in ("conv", "fc", "residual_block")

    def mac_children(self) -> list["LayerSpec"]:
        if self.kind == "residual_block":
            return [c for c in (self.conv1, self.conv2, self.shortcut) if c is not None]
        if self.kind in ("conv", "fc"):
            return [self]
        return []

    def set_quantized(self, flag: bool) -> None:
        self.quantized = flag
        if self.kind == "residual_block":
            for c in self.mac_children():
                c.quantized = flag

    def activations(self) -> list[Activation]:
        acts = []
        if self.act is not None:
            acts.append(self.act)
        if self.kind == "residual_block" and self.conv1.act is not None:
            acts.append(self.conv1.act)
        return acts


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    quant: QuantConfig = field(default_factory=QuantConfig)
    input_bits: int | None = None
    arch: str = "custom"
    num_classes: int = 10

    def __post_init__(self):
        if self.input_bits is None:
            self.input_bits = self.quant.b_a
        self.input_shape = tuple(int(v) for v in self.input_shape)

    # -- structure ---------------------------------------------------------
    def units(self) -> list[LayerSpec]:
        """Schedulable layers, in order (each switches to quantized as a whole)."""
        return [l for l in self.layers if l.is_mac]

    def mac_layers(self) -> Iterator[LayerSpec]:
        for l in self.layers:
            yield from l.mac_children()

    def activations(self) -> Iterator[Activation]:
        for l in self.layers:
            yield from l.activations()

    def stage(self) -> int:
        return sum(u.quantized for u in self.units())

    def is_fully_quantized(self) -> bool:
        return all(u.quantized for u in self.units())

    def integer_activations(self) -> set[str]:
        """Names of activation nodes whose input is on the integer path."""
        names = set()
        int_in = True
        for l in self.layers:
            if l.kind in ("conv", "fc"):
                if l.quantized and not int_in:
                    raise ModelStateError(f"{l.name} is quantized but its input is not")
                int_in = l.quantized
                if l.act is not None and int_in:
                    names.add(l.act.name)
            elif l.kind == "act_quant":
                if int_in:
                    names.add(l.act.name)
            elif l.kind == "residual_block":
                if int_in:
                    names.add(l.act.name)
                if l.quantized and not int_in:
                    raise ModelStateError(f"{l.name} is quantized but its input is not")
                int_in = l.quantized
                if int_in:
                    names.add(l.conv1.act.name)
        return names

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape after each top-level layer."""
        shape = self.input_shape
        out = []
        for l in self.layers:
            shape = layer_out_shape(l, shape)
            out.append(shape)
        return out

    def param_count(self) -> int:
        return sum(int(m.weight.size) for m in self.mac_layers())

    def freeze(self) -> "ModelGraph":
        """Materialise integer weights and threshold tables for quantized parts."""
        q = self.quant
        for m in self.mac_layers():
            m.qweights = quantize_weights(m.weight, q.b_w, q.rounding) if m.quantized else None
        int_acts = self.integer_activations()
        for a in self.activations():
            if a.name in int_acts:
                if a.stats.count == 0 or a.stats.sigma <= 0:
                    raise ModelStateError(f"activation {a.name} has no statistics")
                a.table = build_threshold_table(a.stats.params(), q.b_a, q.rounding)
            else:
                a.table = None
        return self


def layer_out_shape(l: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if l.kind == "conv":
        c, h, w = shape
        if c != l.conv.in_ch:
            raise ShapeError(f"{l.name}: expects {l.conv.in_ch} channels, got {c}")
        return (l.conv.out_ch, *l.conv.out_hw(h, w))
    if l.kind == "fc":
        n_in = int(np.prod(shape))
        if n_in != l.conv.in_ch:
            raise ShapeError(f"{l.name}: expects {l.conv.in_ch} features, got {n_in}")
        return (l.conv.out_ch,)
    if l.kind == "maxpool":
        c, h, w = shape
        if h % l.window or w % l.window:
            raise ShapeError(f"{l.name}: window {l.window} does not tile {h}x{w}")
        return (c, h // l.window, w // l.window)
    if l.kind == "act_quant":
        return shape
    s1 = layer_out_shape(l.conv1, shape)
    s2 = layer_out_shape(l.conv2, s1)
    ss = layer_out_shape(l.shortcut, shape) if l.shortcut is not None else shape
    if s2 != ss:
        raise ShapeError(f"{l.name}: residual shapes {s2} and {ss} differ")
    return s2


# -- constructors --------------------------------------------------------------

def _he(rng, shape, fan_in, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


def conv_layer(name, in_ch, out_ch, rng, kernel=3, stride=1, padding=None, act=True) -> LayerSpec:
    spec = ConvSpec(out_ch, in_ch, kernel, stride, kernel // 2 if padding is None else padding)
    w = _he(rng, (out_ch, in_ch, kernel, kernel), spec.fan_in)
    return LayerSpec(name, "conv", conv=spec, weight=w,
                     act=Activation(f"{name}.act") if act else None)


def fc_layer(name, n_in, n_out, rng, act=True, gain=2.0) -> LayerSpec:
    spec = ConvSpec(n_out, n_in, 1, 1, 0)
    return LayerSpec(name, "fc", conv=spec, weight=_he(rng, (n_out, n_in), n_in, gain),
                     act=Activation(f"{name}.act") if act else None)


def _classifier(name, n_in, n_classes, rng, quant):
    # inputs are activation levels (mean ~ half scale), so start with small logits
    return fc_layer(name, n_in, n_classes, rng, act=False, gain=1.0 / quant.max_level ** 2)


def build_vgg_like(num_classes: int = 10, quant: QuantConfig | None = None,
                   in_shape=(3, 32, 32), widths=(128, 128, 256, 256, 512, 512),
                   fc_width: int = 1024, seed: int = 0) -> ModelGraph:
    """conv3-128 x2, pool, conv3-256 x2, pool, conv3-512 x2, pool, FC-1024, FC-classes."""
    quant = quant or QuantConfig()
    rng = np.random.default_rng(seed)
    c, h, w = in_shape
    layers = []
    for i, width in enumerate(widths):
        layers.append(conv_layer(f"conv{i + 1}", c, width, rng))
        c = width
        if i % 2 == 1:
            layers.append(LayerSpec(f"pool{i // 2 + 1}", "maxpool", window=2))
            h, w = h // 2, w // 2
    layers.append(fc_layer("fc1", c * h * w, fc_width, rng))
    layers.append(_classifier("fc2", fc_width, num_classes, rng, quant))
    return ModelGraph(layers, in_shape, quant, arch="vgg_like", num_classes=num_classes)


def build_small_conv(num_classes: int = 10, quant: QuantConfig | None = None,
                     in_shape=(1, 12, 12), widths=(16, 16, 32), seed: int = 0) -> ModelGraph:
    """Toy VGG-style net: conv, conv, pool, conv, pool, classifier."""
    quant = quant or QuantConfig()
    rng = np.random.default_rng(seed)
    c, h, w = in_shape
    layers = [conv_layer("conv1", c, widths[0], rng),
              conv_layer("conv2", widths[0], widths[1], rng),
              LayerSpec("pool1", "maxpool", window=2),
              conv_layer("conv3", widths[1], widths[2], rng),
              LayerSpec("pool2", "maxpool", window=2)]
    n_in = widths[2] * (h // 4) * (w // 4)
    layers.append(_classifier("fc", n_in, num_classes, rng, quant))
    return ModelGraph(layers, in_shape, quant, arch="small_conv", num_classes=num_classes)


def residual_block(name, in_ch, out_ch, stride, rng) -> LayerSpec:
    conv1 = conv_layer(f"{name}.conv1", in_ch, out_ch, rng, stride=stride)
    conv2 = conv_layer(f"{name}.conv2", out_ch, out_ch, rng, act=False)
    shortcut = None
    if stride != 1 or in_ch != out_ch:
        shortcut = conv_layer(f"{name}.shortcut", in_ch, out_ch, rng, kernel=1,
                              stride=stride, padding=0, act=False)
    return LayerSpec(name, "residual_block", act=Activation(f"{name}.entry"),
                     conv1=conv1, conv2=conv2, shortcut=shortcut)


def build_resnet_small(stages=(1, 1), quant: QuantConfig | None = None, widths=(16, 32),
                       in_shape=(1, 12, 12), num_classes: int = 10, head_pool: int = 2,
                       seed: int = 0) -> ModelGraph:
    """Stem conv, then modified basic blocks; each stage after the first opens
    with a stride-2 block whose 1x1 shortcut conv consumes the entry levels.

    ``stages=(2, 2, 2, 2), widths=(64, 128, 256, 512)`` is the ResNet-18 layout.
    """
    if len(stages) < 1 or len(stages) != len(widths) or min(stages) < 1:
        raise ShapeError("need one width per stage and at least one block per stage")
    quant = quant or QuantConfig()
    rng = np.random.default_rng(seed)
    c, h, w = in_shape
    layers = [conv_layer("stem", c, widths[0], rng, act=False)]
    c = widths[0]
    for s, (n_blocks, width) in enumerate(zip(stages, widths)):
        for b in range(n_blocks):
            stride = 2 if (s > 0 and b == 0) else 1
            layers.append(residual_block(f"block{s + 1}_{b + 1}", c, width, stride, rng))
            if stride == 2:
                h, w = (h + 1) // 2, (w + 1) // 2
            c = width
    layers.append(LayerSpec("head_act", "act_quant", act=Activation("head_act")))
    if head_pool > 1:
        layers.append(LayerSpec("head_pool", "maxpool", window=head_pool))
        h, w = h // head_pool, w // head_pool
    layers.append(_classifier("fc", c * h * w, num_classes, rng, quant))
    return ModelGraph(layers, in_shape, quant, arch="resnet_small", num_classes=num_classes)


def count_blocks(model: ModelGraph) -> int:
    return sum(l.kind == "residual_block" for l in model.layers)
