"""Tensor containers and exact reference kernels.

Two domains share the same geometry:

* real (float64) tensors for the training path, and
* integer tensors for inference, held in int64 with a declared magnitude
  bound so every kernel can prove its accumulator fits before running.

Integer addition is associative, so the vectorised kernels below are
bit-exact regardless of the reduction order numpy picks internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AccumulatorOverflow, DomainError, ShapeError

ACC_LIMIT = 2 ** 62

# integer tensor domains: activation levels vs. accumulator (MAC) values
LEVEL = "level"
ACC = "acc"


@dataclass(frozen=True)
class Shape4:
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.n, self.c, self.h, self.w) < 1:
            raise ShapeError(f"all extents must be >= 1: {self}")

    @classmethod
    def of(cls, shape) -> "Shape4":
        if len(shape) == 2:
            return cls(shape[0], shape[1], 1, 1)
        return cls(*shape)

    def numel(self) -> int:
        return self.n * self.c * self.h * self.w


@dataclass(frozen=True)
class ConvSpec:
    out_ch: int
    in_ch: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ShapeError(f"kernel must be odd, got {self.kernel}")
        if self.stride < 1:
            raise ShapeError("stride must be >= 1")
        if self.out_ch < 1 or self.in_ch < 1 or self.padding < 0:
            raise ShapeError(f"invalid conv geometry {self}")

    @property
    def fan_in(self) -> int:
        return self.in_ch * self.kernel * self.kernel

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return oh, ow


@dataclass
class TensorR:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise DomainError("TensorR holds non-finite values")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class TensorI:
    """Integer tensor with a declared bound on ``|value|``.

    ``domain`` records which scale the values live in (activation levels or
    accumulator values); the integer-only checker uses it to catch additions
    that mix scales.
    """

    data: np.ndarray
    bound: int
    domain: str = ACC

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype.kind not in "iu":
            if arr.size and not np.all(arr == np.round(arr)):
                raise DomainError("TensorI data must be integral")
        self.data = arr.astype(np.int64)
        self.bound = int(self.bound)

    @property
    def shape(self):
        return self.data.shape

    def check_bound(self) -> None:
        if self.data.size and int(np.max(np.abs(self.data))) > self.bound:
            raise AccumulatorOverflow(
                f"tensor exceeds its declared bound {self.bound}")


def levels(data, bits: int) -> TensorI:
    """Wrap unsigned activation levels of the given width."""
    t = TensorI(data, (1 << bits) - 1, LEVEL)
    if t.data.size and (t.data.min() < 0 or t.data.max() > t.bound):
        raise DomainError(f"levels do not fit {bits} unsigned bits")
    return t


def weights(data, bits: int) -> TensorI:
    """Wrap symmetric signed weights of the given width."""
    t = TensorI(data, (1 << (bits - 1)) - 1, ACC)
    t.check_bound()
    return t


def pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def im2col(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int, int]:
    """Rows are output positions (n, oh, ow); columns are (c, kh, kw) taps."""
    n, c, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    k, s = spec.kernel, spec.stride
    win = sliding_window_view(pad_hw(x, spec.padding), (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return cols, oh, ow


def col2im(dcols: np.ndarray, x_shape, spec: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`im2col` (scatter-add of column gradients)."""
    n, c, h, w = x_shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    oh, ow = spec.out_hw(h, w)
    d = dcols.reshape(n, oh, ow, c, k, k)
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s, :] += d[:, :, :, :, i, j]
    out = out.transpose(0, 3, 1, 2)
    if p:
        out = out[:, :, p:-p, p:-p]
    return np.ascontiguousarray(out)


def _check_conv_shapes(x_shape, w_shape, spec: ConvSpec):
    if len(x_shape) != 4:
        raise ShapeError(f"conv input must be NCHW, got {x_shape}")
    if x_shape[1] != spec.in_ch:
        raise ShapeError(f"input has {x_shape[1]} channels, spec wants {spec.in_ch}")
    want = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
    if tuple(w_shape) != want:
        raise ShapeError(f"weight shape {tuple(w_shape)} != {want}")


def mac_bound(x_bound: int, w_bound: int, fan_in: int) -> int:
    return int(x_bound) * int(w_bound) * int(fan_in)


def conv2d_int(x: TensorI, w: TensorI, spec: ConvSpec) -> TensorI:
    """Exact integer convolution, zero padding, no bias.

    Raises AccumulatorOverflow when the worst case |x|*|w|*I*K^2 reaches 2^62.
    """
    _check_conv_shapes(x.shape, w.shape, spec)
    bound = mac_bound(x.bound, w.bound, spec.fan_in)
    if bound >= ACC_LIMIT:
        raise AccumulatorOverflow(f"worst-case MAC {bound} does not fit the accumulator")
    x.check_bound()
    w.check_bound()
    cols, oh, ow = im2col(x.data, spec)
    out = cols @ w.data.reshape(spec.out_ch, -1).T
    out = out.reshape(x.shape[0], oh, ow, spec.out_ch).transpose(0, 3, 1, 2)
    return TensorI(np.ascontiguousarray(out), bound, ACC)


def linear_int(x: TensorI, w: TensorI) -> TensorI:
    """Exact matrix-vector product; ``w`` is (out, in), ``x`` is flattened per sample."""
    xs = x.data.reshape(x.shape[0], -1)
    if w.data.ndim != 2 or w.shape[1] != xs.shape[1]:
        raise ShapeError(f"linear weight {w.shape} incompatible with input {xs.shape}")
    bound = mac_bound(x.bound, w.bound, xs.shape[1])
    if bound >= ACC_LIMIT:
        raise AccumulatorOverflow(f"worst-case MAC {bound} does not fit the accumulator")
    x.check_bound()
    w.check_bound()
    return TensorI(xs @ w.data.T, bound, ACC)


def conv2d_real(x: TensorR | np.ndarray, w: TensorR | np.ndarray, spec: ConvSpec) -> np.ndarray:
    x = getattr(x, "data", x)
    w = getattr(w, "data", w)
    _check_conv_shapes(x.shape, w.shape, spec)
    cols, oh, ow = im2col(np.asarray(x, dtype=np.float64), spec)
    out = cols @ np.asarray(w, dtype=np.float64).reshape(spec.out_ch, -1).T
    return out.reshape(x.shape[0], oh, ow, spec.out_ch).transpose(0, 3, 1, 2)


def linear_real(x, w) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    xs = x.reshape(x.shape[0], -1)
    if w.ndim != 2 or w.shape[1] != xs.shape[1]:
        raise ShapeError(f"linear weight {w.shape} incompatible with input {xs.shape}")
    return xs @ w.T


def maxpool2d(x, window: int, stride: int | None = None):
    """Max over non-overlapping (or strided) windows, 'valid' padding.

    Works for TensorI, TensorR or a bare array; returns the same kind.
    """
    stride = stride or window
    arr = x.data if isinstance(x, (TensorI, TensorR)) else np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"maxpool input must be NCHW, got {arr.shape}")
    n, c, h, w = arr.shape
    if (h - window) % stride or (w - window) % stride or h < window or w < window:
        raise ShapeError(f"window {window}/stride {stride} does not tile {h}x{w}")
    win = sliding_window_view(arr, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.max(axis=(4, 5))
    if isinstance(x, TensorI):
        return TensorI(out, x.bound, x.domain)
    if isinstance(x, TensorR):
        return TensorR(out)
    return out


def maxpool2d_backward(dout: np.ndarray, x: np.ndarray, window: int) -> np.ndarray:
    """Route gradients to the first maximal element of each window."""
    n, c, h, w = x.shape
    oh, ow = h // window, w // window
    blocks = x[:, :, : oh * window, : ow * window].reshape(n, c, oh, window, ow, window)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, window * window)
    idx = blocks.argmax(axis=-1)
    mask = np.zeros_like(blocks)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    g = mask * dout[..., None]
    g = g.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros_like(x, dtype=np.float64)
    dx[:, :, : oh * window, : ow * window] = g.reshape(n, c, oh * window, ow * window)
    return dx
