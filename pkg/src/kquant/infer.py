"""Integer-only execution of a quantized ModelGraph, worst-case range
analysis and comparator/MUX resource counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ModelStateError, ShapeError
from .model import LayerSpec, ModelGraph, layer_out_shape
from .quantize import ThresholdTable, comparator_count, quantize_activation
from .tensorcore import ACC, LEVEL, TensorI, conv2d_int, levels, linear_int, mac_bound, maxpool2d


@dataclass
class IntegerAudit:
    """Checked-mode recorder.

    Every tensor produced on the inference path is inspected: a non-integer
    dtype counts as a fractional-arithmetic event, and additions whose
    operands live in different scale domains count as scale events.
    """

    ops: int = 0
    fractional_events: list[str] = field(default_factory=list)
    scale_events: list[tuple[str, str, str]] = field(default_factory=list)

    def record(self, op: str, t: TensorI) -> TensorI:
        self.ops += 1
        if np.asarray(t.data).dtype.kind not in "iu":
            self.fractional_events.append(op)
        t.check_bound()
        return t

    def check_add(self, op: str, a: TensorI, b: TensorI) -> None:
        if a.domain != b.domain:
            self.scale_events.append((op, a.domain, b.domain))

    @property
    def clean(self) -> bool:
        return not self.fractional_events and not self.scale_events


def _rec(audit, op, t):
    return audit.record(op, t) if audit is not None else t


def apply_table(x: TensorI, table: ThresholdTable) -> TensorI:
    return levels(quantize_activation(x.data, table), table.b_a)


def _need_weights(l: LayerSpec):
    if not l.quantized or l.qweights is None:
        raise ModelStateError(f"layer {l.name} is not quantized; refusing integer execution")
    return l.qweights.values


def _need_table(act) -> ThresholdTable:
    if act.table is None:
        raise ModelStateError(f"activation {act.name} has no threshold table")
    return act.table


def _mac(l: LayerSpec, x: TensorI, audit) -> TensorI:
    w = _need_weights(l)
    if audit is not None and x.domain != LEVEL:
        audit.scale_events.append((l.name, x.domain, LEVEL))
    y = conv2d_int(x, w, l.conv) if l.kind == "conv" else linear_int(x, w)
    y = _rec(audit, l.name, y)
    if l.act is not None:
        y = _rec(audit, l.act.name, apply_table(y, _need_table(l.act)))
    return y


def residual_block_forward(x_acc: TensorI, block: LayerSpec, audit: IntegerAudit | None = None,
                           ordering: str = "modified", post_table: ThresholdTable | None = None) -> TensorI:
    """Integer forward of one basic block.

    ``modified``: y = conv2(act(conv1(act_entry(x)))) + shortcut, with the
    identity shortcut tapping x in the accumulator domain; y is returned
    pre-activation for the next block's entry activation.

    ``original``: the post-add activation stays inside the block, so the
    residual addend is the entry activation's output (levels) and the block
    returns levels quantized with ``post_table``.
    """
    lv = _rec(audit, block.act.name, apply_table(x_acc, _need_table(block.act)))
    h = _mac(block.conv1, lv, audit)
    h = _mac(block.conv2, h, audit)
    if block.shortcut is not None:
        addend = _mac(block.shortcut, lv, audit)
    elif ordering == "modified":
        addend = x_acc
    else:
        addend = lv
    if h.shape != addend.shape:
        raise ShapeError(f"{block.name}: cannot add {h.shape} and {addend.shape}")
    if audit is not None:
        audit.check_add(f"{block.name}.add", h, addend)
    y = _rec(audit, f"{block.name}.add", TensorI(h.data + addend.data, h.bound + addend.bound, ACC))
    if ordering == "modified":
        return y
    if ordering != "original":
        raise ValueError(f"unknown ordering {ordering!r}")
    if post_table is None:
        raise ValueError("original ordering needs the post-add threshold table")
    return _rec(audit, f"{block.name}.post_act", apply_table(y, post_table))


def execute_graph(model: ModelGraph, x, audit: IntegerAudit | None = None) -> TensorI:
    """Run a fully quantized model on integer input levels; returns integer logits."""
    if not model.is_fully_quantized():
        raise ModelStateError(
            f"model is at stage {model.stage()}/{len(model.units())}; every layer must be quantized")
    if not isinstance(x, TensorI):
        x = np.asarray(x)
        if x.dtype.kind not in "iu":
            raise ModelStateError("integer execution needs integer input levels")
        x = levels(x, model.input_bits)
    if x.data.ndim == 3:
        x = TensorI(x.data[None], x.bound, x.domain)
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != model input {model.input_shape}")
    _rec(audit, "input", x)
    for l in model.layers:
        if l.kind in ("conv", "fc"):
            x = _mac(l, x, audit)
        elif l.kind == "maxpool":
            x = _rec(audit, l.name, maxpool2d(x, l.window))
        elif l.kind == "act_quant":
            x = _rec(audit, l.name, apply_table(x, _need_table(l.act)))
        else:
            x = residual_block_forward(x, l, audit)
    return x


def predict(model: ModelGraph, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x)
    out = [execute_graph(model, x[i:i + batch_size]).data.argmax(axis=1)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


# -- range analysis -------------------------------------------------------------

@dataclass
class RangeRow:
    name: str
    kind: str
    fan_in: int | None
    m_a: int
    m_m: int | None
    acc_bits: int | None


@dataclass
class RangeReport:
    rows: list[RangeRow]

    @property
    def max_acc_bits(self) -> int:
        return max((r.acc_bits for r in self.rows if r.acc_bits), default=0)


def acc_bits_for(m_m: int) -> int:
    """Signed accumulator width holding +-m_m (magnitude bits + sign)."""
    return int(m_m).bit_length() + 1


def max_mac(b_a: int, b_w: int, fan_in: int) -> int:
    return mac_bound((1 << b_a) - 1, (1 << (b_w - 1)) - 1, fan_in)


def analyze_ranges(model: ModelGraph) -> RangeReport:
    """Closed-form worst cases: M_a = 2^b_a - 1, M_m = M_a * (2^(b_w-1) - 1) * I * K^2."""
    q = model.quant
    rows = []
    m_a_in = (1 << model.input_bits) - 1
    m_a = (1 << q.b_a) - 1
    w_max = q.max_weight
    cur_bound = m_a_in  # bound on the current tensor entering the next layer
    cur_level = m_a_in  # level bound of the current tensor (when it is levels)

    def mac_row(l: LayerSpec, in_level: int) -> RangeRow:
        mm = mac_bound(in_level, w_max, l.conv.fan_in)
        return RangeRow(l.name, l.kind, l.conv.fan_in, in_level, mm, acc_bits_for(mm))

    for l in model.layers:
        if l.kind in ("conv", "fc"):
            row = mac_row(l, cur_level)
            rows.append(row)
            if l.act is not None:
                cur_bound = cur_level = m_a
            else:
                cur_bound = row.m_m
        elif l.kind == "maxpool":
            rows.append(RangeRow(l.name, l.kind, None, cur_level, None, None))
        elif l.kind == "act_quant":
            rows.append(RangeRow(l.name, l.kind, None, m_a, None, None))
            cur_bound = cur_level = m_a
        else:
            r1 = mac_row(l.conv1, m_a)
            r2 = mac_row(l.conv2, m_a)
            rows += [r1, r2]
            if l.shortcut is not None:
                rs = mac_row(l.shortcut, m_a)
                rows.append(rs)
                addend = rs.m_m
            else:
                addend = cur_bound
            total = r2.m_m + addend
            rows.append(RangeRow(f"{l.name}.add", "residual_add", None, m_a, total, acc_bits_for(total)))
            cur_bound = total
    return RangeReport(rows)


# -- hardware cost ---------------------------------------------------------------

@dataclass
class HwRow:
    name: str
    kind: str
    units: int
    comparators: int
    mux_count: int
    comparator_bits: int
    adder_bits: int


@dataclass
class HwCost:
    rows: list[HwRow]
    parallel: bool = False

    @property
    def totals(self) -> dict[str, int]:
        keys = ("units", "comparators", "mux_count", "comparator_bits", "adder_bits")
        return {k: sum(getattr(r, k) for r in self.rows) for k in keys}


def estimate_hw_cost(model: ModelGraph, parallel: bool = False) -> HwCost:
    """Count threshold-activation hardware.

    Each activation unit is a chain of 2^b_a - 1 comparators as wide as the
    producing accumulator, feeding a MUX chain of the same length. By default
    one time-multiplexed unit per layer; ``parallel`` instantiates one unit
    per output element of a sample.
    """
    q = model.quant
    per_unit = comparator_count(q.b_a)
    ranges = {r.name: r for r in analyze_ranges(model).rows}
    rows = []
    shape = model.input_shape
    # accumulator width of the tensor feeding the next block-entry activation
    prev_bits = 0

    def act_row(name, kind, width, elems, adder_bits):
        units = elems if parallel else 1
        return HwRow(name, kind, units, units * per_unit, units * per_unit,
                     units * per_unit * width, adder_bits)

    for l in model.layers:
        out_shape = layer_out_shape(l, shape)
        elems = int(np.prod(out_shape))
        if l.kind in ("conv", "fc"):
            bits = ranges[l.name].acc_bits
            if l.act is not None:
                rows.append(act_row(l.name, l.kind, bits, elems, bits))
            else:
                rows.append(HwRow(l.name, l.kind, 0, 0, 0, 0, bits))
            prev_bits = bits
        elif l.kind == "maxpool":
            rows.append(HwRow(l.name, l.kind, 0, 0, 0, 0, 0))
        elif l.kind == "act_quant":
            rows.append(act_row(l.name, l.kind, prev_bits, elems, 0))
        else:
            in_elems = int(np.prod(shape))
            mid_elems = int(np.prod(layer_out_shape(l.conv1, shape)))
            entry = act_row(f"{l.name}.entry", "act_quant", prev_bits, in_elems, 0)
            b1 = ranges[l.conv1.name].acc_bits
            mid = act_row(l.conv1.name, "conv", b1, mid_elems, b1)
            adders = ranges[l.conv2.name].acc_bits + ranges[f"{l.name}.add"].acc_bits
            if l.shortcut is not None:
                adders += ranges[l.shortcut.name].acc_bits
            rows.append(HwRow(l.name, l.kind, entry.units + mid.units,
                              entry.comparators + mid.comparators, entry.mux_count + mid.mux_count,
                              entry.comparator_bits + mid.comparator_bits,
                              mid.adder_bits + adders))
            prev_bits = ranges[f"{l.name}.add"].acc_bits
        shape = out_shape
    return HwCost(rows, parallel)
