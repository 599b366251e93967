"""Quantizers: Gaussian k-quantile activation thresholds, CDF weight
quantization, the linear bit-shift and log2 baselines, and a literal model of
the comparator chain that realises a threshold table in hardware.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTableError, DegenerateWeightsError, DomainError
from .gaussmath import (
    GaussParams,
    RoundingPolicy,
    normal_cdf,
    normal_cdf_array,
    normal_quantile,
    round_array,
    round_scalar,
)
from .tensorcore import TensorI, weights as int_weights


@dataclass(frozen=True)
class QuantConfig:
    b_a: int = 4
    b_w: int = 4
    rounding: RoundingPolicy = RoundingPolicy.NEAREST

    def __post_init__(self):
        if not 1 <= self.b_a <= 8:
            raise DomainError(f"b_a must be in 1..8, got {self.b_a}")
        if not 2 <= self.b_w <= 8:
            raise DomainError(f"b_w must be in 2..8, got {self.b_w}")
        object.__setattr__(self, "rounding", RoundingPolicy(self.rounding))

    @property
    def max_level(self) -> int:
        return (1 << self.b_a) - 1

    @property
    def max_weight(self) -> int:
        return (1 << (self.b_w - 1)) - 1


@dataclass(frozen=True)
class ThresholdTable:
    """Integer cut points t_1 < ... < t_{k-1} for k = 2**b_a output levels.

    Level j covers (t_{j-1}, t_j] with t_0 = 0; everything above t_{k-2}
    saturates at the top level, so t_{k-1} is kept for the record only.
    """

    b_a: int
    thresholds: tuple[int, ...]
    z: float
    source: GaussParams

    def __post_init__(self):
        t = tuple(int(v) for v in self.thresholds)
        object.__setattr__(self, "thresholds", t)
        if len(t) != (1 << self.b_a) - 1:
            raise DegenerateTableError(
                f"expected {(1 << self.b_a) - 1} thresholds for b_a={self.b_a}, got {len(t)}")
        if t[0] <= 0 or any(a >= b for a, b in zip(t, t[1:])):
            raise DegenerateTableError(f"thresholds not strictly increasing above 0: {t}")

    @property
    def levels(self) -> int:
        return 1 << self.b_a

    @property
    def max_level(self) -> int:
        return self.levels - 1


def quantile_levels(p: GaussParams, b_a: int) -> list[float]:
    """Probabilities b_i = Z + i(1-Z)/2^b_a, i = 1..2^b_a-1."""
    z = normal_cdf(0.0, p)
    step = (1.0 - z) / (1 << b_a)
    return [z + i * step for i in range(1, 1 << b_a)]


def real_thresholds(p: GaussParams, b_a: int) -> list[float]:
    """Thresholds before rounding to integers."""
    try:
        return [normal_quantile(b, p) for b in quantile_levels(p, b_a)]
    except DomainError as exc:
        raise DegenerateTableError(
            f"no positive probability mass to split for {p}") from exc


def build_threshold_table(p: GaussParams, b_a: int,
                          rounding: RoundingPolicy = RoundingPolicy.NEAREST) -> ThresholdTable:
    if not 1 <= b_a <= 8:
        raise DomainError(f"b_a must be in 1..8, got {b_a}")
    taus = real_thresholds(p, b_a)
    ts = [round_scalar(t, rounding) for t in taus]
    if ts[0] <= 0 or any(a >= b for a, b in zip(ts, ts[1:])):
        raise DegenerateTableError(
            f"rounded thresholds {ts} collapse for mu={p.mu}, sigma={p.sigma}, b_a={b_a}; "
            "sigma is too small for this many levels")
    return ThresholdTable(b_a, tuple(ts), normal_cdf(0.0, p), p)


def quantize_activation(x, table: ThresholdTable):
    """Map MAC values to levels. Accepts a scalar or an array (int or float)."""
    t = np.asarray(table.thresholds, dtype=np.float64 if _is_float(x) else np.int64)
    xa = np.asarray(x)
    # number of thresholds strictly below x
    above = np.searchsorted(t, xa, side="left")
    lv = np.where(xa > 0, np.minimum(above + 1, table.max_level), 0)
    if np.ndim(x) == 0:
        return int(lv)
    return lv.astype(np.int64)


def _is_float(x) -> bool:
    return np.asarray(x).dtype.kind == "f"


def comparator_count(b_a: int) -> int:
    return (1 << b_a) - 1


def eval_comparator_chain(x, table: ThresholdTable):
    """Gate-level model of the threshold unit.

    One strict greater-than comparator per cut point (the first is the
    zero/sign comparator, the rest are t_1..t_{k-2}), each AND-ed with the
    inverted two's-complement sign bit; the level is the popcount of the
    resulting thermometer code.
    """
    xa = np.asarray(x, dtype=np.int64)
    not_sign = 1 - ((xa >> 63) & 1)
    cuts = (0,) + table.thresholds[:-1]
    level = np.zeros(xa.shape, dtype=np.int64)
    hit = np.empty(xa.shape, dtype=bool)
    for c in cuts:
        np.greater(xa, c, out=hit)
        level += hit
    # every comparator of one input shares the same sign gate
    level *= not_sign
    if np.ndim(x) == 0:
        return int(level)
    return level


@dataclass
class QuantizedWeights:
    values: TensorI
    params: GaussParams
    b_w: int

    def __post_init__(self):
        self.values.check_bound()


def weight_stats(w) -> GaussParams:
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    sigma = float(w.std())
    if not sigma > 0:
        raise DegenerateWeightsError("weight tensor is constant; sigma_w = 0")
    return GaussParams(float(w.mean()), sigma)


def weight_levels(w, params: GaussParams, b_w: int,
                  rounding: RoundingPolicy = RoundingPolicy.NEAREST) -> np.ndarray:
    """Signed integer weights in [-(2^(b_w-1)-1), 2^(b_w-1)-1] (int64 array)."""
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    lim = (1 << (b_w - 1)) - 1
    scaled = (normal_cdf_array(w, params.mu, params.sigma) - 0.5) * (1 << b_w)
    return np.clip(round_array(scaled, rounding), -lim, lim)


def quantize_weights(w, b_w: int, rounding: RoundingPolicy = RoundingPolicy.NEAREST) -> QuantizedWeights:
    if not 2 <= b_w <= 8:
        raise DomainError(f"b_w must be in 2..8, got {b_w}")
    params = weight_stats(w)
    q = weight_levels(w, params, b_w, rounding)
    return QuantizedWeights(int_weights(q, b_w), params, b_w)


@dataclass(frozen=True)
class ShiftSpec:
    n_f: int
    b_a: int
    b_w: int
    shift_s: int = field(init=False)

    def __post_init__(self):
        if self.n_f < 1:
            raise DomainError("filter size must be >= 1")
        # smallest s with max_mac >> s <= 2^b_a - 1
        object.__setattr__(self, "shift_s", max(0, self.max_mac.bit_length() - self.b_a))

    @property
    def max_mac(self) -> int:
        return ((1 << self.b_a) - 1) * ((1 << (self.b_w - 1)) - 1) * self.n_f


def linear_shift_quantize(mac: int, spec: ShiftSpec) -> int:
    if mac <= 0:
        return 0
    return min(int(mac) >> spec.shift_s, (1 << spec.b_a) - 1)


def log2_quantize(mac: int) -> int:
    """Priority encoder: index of the most significant set bit."""
    mac = int(mac)
    return mac.bit_length() - 1 if mac >= 1 else 0
