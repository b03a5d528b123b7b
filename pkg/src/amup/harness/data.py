"""Datasets: the synthetic10 clusters and a local loader for binary image batches."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from amup import rng

TASKS = ("synthetic10", "image-binary")

SYNTH_CLASSES = 10
SYNTH_FEATURES = 64
SYNTH_TRAIN = 12_800
SYNTH_VAL = 2_560
SYNTH_SEPARATION = 0.5  # std of each class-mean coordinate; within-class noise has std 1

RECORD_BYTES = 1 + 32 * 32 * 3
RECORDS_PER_BATCH = 10_000
TRAIN_BATCHES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
VAL_BATCH = "test_batch.bin"

_MEANS, _TRAIN, _VAL, _TARGETS = 21, 22, 23, 24


@dataclass(frozen=True)
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    n_classes: int
    loss: str  # "ce" for class labels, "mse" for real-valued targets

    @property
    def n_train(self) -> int:
        return len(self.x_train)


def make_dataset(
    task: str = "synthetic10",
    seed: int = 0,
    mode: str = "classification",
    sigma_y: float = 1.0,
    path: str | None = None,
) -> Dataset:
    """Build a dataset deterministically from ``seed``.

    ``synthetic10`` draws 10 Gaussian class means and unit-variance
    within-class noise in 64 dimensions. In ``regression`` mode the same
    inputs come with zero-mean Gaussian targets of variance ``sigma_y**2``
    (one column per class slot), independent of the inputs.
    """
    if task == "synthetic10":
        return _synthetic10(seed, mode, sigma_y)
    if task == "image-binary":
        if path is None:
            raise ValueError("image-binary needs a local directory path")
        return load_image_binary(path)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def _synthetic10(seed: int, mode: str, sigma_y: float) -> Dataset:
    if mode not in ("classification", "regression"):
        raise ValueError("mode must be 'classification' or 'regression'")
    means = rng.normal(rng.stream(seed, _MEANS), (SYNTH_CLASSES, SYNTH_FEATURES), SYNTH_SEPARATION)

    def split(key: int, n: int):
        g = rng.stream(seed, key)
        labels = g.integers(0, SYNTH_CLASSES, size=n)
        return means[labels] + rng.normal(g, (n, SYNTH_FEATURES)), labels

    x_tr, y_tr = split(_TRAIN, SYNTH_TRAIN)
    x_va, y_va = split(_VAL, SYNTH_VAL)
    if mode == "classification":
        return Dataset("synthetic10", x_tr, y_tr, x_va, y_va, SYNTH_CLASSES, "ce")
    if sigma_y <= 0:
        raise ValueError("sigma_y must be positive")
    g = rng.stream(seed, _TARGETS)
    t_tr = rng.normal(g, (SYNTH_TRAIN, SYNTH_CLASSES), sigma_y)
    t_va = rng.normal(g, (SYNTH_VAL, SYNTH_CLASSES), sigma_y)
    return Dataset("synthetic10-regression", x_tr, t_tr, x_va, t_va, SYNTH_CLASSES, "mse")


def _read_batch(path: str) -> tuple[np.ndarray, np.ndarray]:
    expected = RECORD_BYTES * RECORDS_PER_BATCH
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing batch file {path}")
    size = os.path.getsize(path)
    if size != expected:
        raise ValueError(f"{path}: {size} bytes, expected {expected}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(RECORDS_PER_BATCH, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    # stored channel-planar (3, 32, 32); convert to channel-last
    images = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images.astype(np.float64) / 255.0, labels


def load_image_binary(directory: str) -> Dataset:
    """Load the five training batches and the test batch from ``directory``.

    Pixels are scaled to [0, 1] and centred with the training mean per
    channel. Nothing is downloaded.
    """
    parts = [_read_batch(os.path.join(directory, name)) for name in TRAIN_BATCHES]
    x_tr = np.concatenate([p[0] for p in parts])
    y_tr = np.concatenate([p[1] for p in parts])
    x_va, y_va = _read_batch(os.path.join(directory, VAL_BATCH))
    if y_tr.max() >= 10 or y_va.max() >= 10:
        raise ValueError("labels outside 0..9; batch files look corrupt")
    mean = x_tr.mean(axis=(0, 1, 2))
    return Dataset("image-binary", x_tr - mean, y_tr, x_va - mean, y_va, 10, "ce")


def as_input(x: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    """Reshape flat or image samples to a model's input shape."""
    if x.shape[1:] == tuple(input_shape):
        return x
    if int(np.prod(x.shape[1:])) != int(np.prod(input_shape)):
        raise ValueError(f"samples of shape {x.shape[1:]} cannot feed input shape {input_shape}")
    return x.reshape(len(x), *input_shape)
