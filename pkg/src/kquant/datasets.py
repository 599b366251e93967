"""Datasets: a seeded synthetic 10-class pattern set and a directory loader."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError
from .gaussmath import round_array


def make_toy_dataset(seed: int = 0, n_train: int = 5000, n_test: int = 1000, classes: int = 10,
                     size: int = 12, template: int = 8, noise: float = 0.35):
    """Translated, noised class templates on a size x size single-channel canvas.

    Returns (x_train, y_train, x_test, y_test); images are reals in [0, 1]
    with shape (n, 1, size, size).
    """
    if classes < 2:
        raise ConfigError("toy dataset needs at least 2 classes")
    rng = np.random.default_rng(seed)
    # smooth random blobs so neighbouring pixels correlate like strokes do
    raw = rng.random((classes, template + 2, template + 2))
    smooth = (raw[:, :-2, :-2] + raw[:, 1:-1, 1:-1] + raw[:, 2:, 2:]
              + raw[:, :-2, 2:] + raw[:, 2:, :-2]) / 5.0
    templates = (smooth > np.median(smooth, axis=(1, 2), keepdims=True)).astype(np.float64)
    span = size - template + 1

    def sample(n):
        y = rng.integers(0, classes, size=n)
        off = rng.integers(0, span, size=(n, 2))
        x = np.zeros((n, 1, size, size))
        for i in range(n):
            r, c = off[i]
            x[i, 0, r:r + template, c:c + template] = templates[y[i]]
        x += rng.normal(0.0, noise, size=x.shape)
        return np.clip(x, 0.0, 1.0), y

    x_tr, y_tr = sample(n_train)
    x_te, y_te = sample(n_test)
    return x_tr, y_tr, x_te, y_te


def encode_levels(x, bits: int) -> np.ndarray:
    """Input quantization node: reals in [0, 1] -> unsigned levels of ``bits`` width."""
    top = (1 << bits) - 1
    return np.clip(round_array(np.asarray(x) * top), 0, top)


def load_tensor_dir(path) -> tuple[np.ndarray, ...]:
    """Load ``train_x.npy``, ``train_y.npy`` and optionally ``test_x.npy``/``test_y.npy``."""
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"dataset.path: {path} is not a directory")
    try:
        out = [np.load(root / "train_x.npy"), np.load(root / "train_y.npy")]
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset.path: missing {Path(exc.filename).name}") from exc
    if (root / "test_x.npy").exists() and (root / "test_y.npy").exists():
        out += [np.load(root / "test_x.npy"), np.load(root / "test_y.npy")]
    return tuple(out)
