"""Deterministic bundled models and data, so everything runs offline.

The main fixture is a small MNIST-style ConvNet (two convolutions, two
dense layers, one pooling stage) around 57K MACs per inference, with
bell-shaped seeded weights.  Per-layer weight scales are chosen so the
selection rules see both the plain and the scaled-down regime.  Biases are
snapped to a 1/1024 grid, which keeps the exact integer inference path in
int64 territory.
"""

from __future__ import annotations

import numpy as np

from .datasets import synthetic
from .model import Layer, Model

__all__ = ["build_tiny_convnet", "build_batchnorm_convnet", "FIXTURE_INPUT_SHAPE"]

FIXTURE_INPUT_SHAPE = (1, 12, 12)

_BIAS_GRID = 1024  # power of two so float32 biases are exactly dyadic


def _weights(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    w = rng.normal(0.0, sigma, size=shape)
    return np.clip(w, -4 * sigma, 4 * sigma).astype(np.float32)


def _bias(rng: np.random.Generator, count: int, sigma: float = 0.05) -> np.ndarray:
    b = np.round(rng.normal(0.0, sigma, size=count) * _BIAS_GRID) / _BIAS_GRID
    return b.astype(np.float32)


def build_tiny_convnet(seed: int = 0) -> Model:
    """conv-relu-pool x2 into two dense layers, 10 classes, 12x12 input."""
    rng = np.random.default_rng(seed)
    layers = [
        Layer("conv1", "conv2d", weights=_weights(rng, (8, 1, 3, 3), 0.35),
              bias=_bias(rng, 8), stride=1, padding=1),
        Layer("act1", "relu"),
        Layer("pool1", "maxpool", kernel_size=2, stride=2),
        Layer("conv2", "conv2d", weights=_weights(rng, (16, 8, 3, 3), 0.10),
              bias=_bias(rng, 16), stride=1, padding=1),
        Layer("act2", "relu"),
        Layer("pool2", "maxpool", kernel_size=2, stride=2),
        Layer("flat", "flatten"),
        Layer("fc1", "dense", weights=_weights(rng, (32, 144), 0.12),
              bias=_bias(rng, 32)),
        Layer("act3", "relu"),
        Layer("fc2", "dense", weights=_weights(rng, (10, 32), 0.30),
              bias=_bias(rng, 10)),
    ]
    model = Model(
        name="tiny-convnet",
        input_shape=FIXTURE_INPUT_SHAPE,
        layers=layers,
        metadata={"seed": seed},
    )
    _record_reference_accuracy(model, seed)
    return model


def build_batchnorm_convnet(seed: int = 0) -> Model:
    """Fashion-style variant with a batchnorm after the first convolution."""
    rng = np.random.default_rng(seed + 101)
    channels = 6
    layers = [
        Layer("conv1", "conv2d", weights=_weights(rng, (channels, 1, 3, 3), 0.3),
              bias=_bias(rng, channels), stride=1, padding=1),
        Layer("bn1", "batchnorm",
              bn_gamma=(1.0 + 0.2 * rng.standard_normal(channels)).astype(np.float32),
              bn_beta=_bias(rng, channels, 0.1),
              bn_mean=_bias(rng, channels, 0.2),
              bn_var=(0.5 + rng.random(channels)).astype(np.float32)),
        Layer("act1", "relu"),
        Layer("pool1", "maxpool", kernel_size=2, stride=2),
        Layer("flat", "flatten"),
        Layer("fc1", "dense", weights=_weights(rng, (10, channels * 36), 0.15),
              bias=_bias(rng, 10)),
    ]
    model = Model(
        name="batchnorm-convnet",
        input_shape=FIXTURE_INPUT_SHAPE,
        layers=layers,
        metadata={"seed": seed},
    )
    _record_reference_accuracy(model, seed)
    return model


def _record_reference_accuracy(model: Model, seed: int, count: int = 256) -> None:
    # Recorded at build time; evaluate() must reproduce it bit for bit.
    from .engine import evaluate

    dataset = synthetic(seed, count, model.input_shape)
    report = evaluate(model, dataset)
    model.metadata["eval_seed"] = seed
    model.metadata["eval_count"] = count
    model.metadata["float_top1"] = report.top1_accuracy
