"""Layer graph, manifest I/O, shape checking, and batch-norm folding.

A model is an ordered layer list over NCHW feature maps; conv kernels are
OIHW.  The on-disk form is a JSON manifest naming raw little-endian float32
blobs, each with a sha256 checksum.  ``residual_add`` layers reference an
earlier layer's output by name, which is enough graph structure for
ResNet-style blocks.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import (
    ChecksumError,
    EmptyModel,
    FoldError,
    ShapeMismatch,
    UnknownLayerKind,
)

__all__ = [
    "LAYER_KINDS",
    "Layer",
    "Model",
    "output_shape",
    "load_model",
    "save_model",
    "fold_batchnorm",
    "count_macs",
]

LAYER_KINDS = (
    "conv2d",
    "dense",
    "relu",
    "maxpool",
    "avgpool",
    "batchnorm",
    "residual_add",
    "flatten",
)

# Layer kinds that write a fresh value tensor in the quantized pipeline
# (as opposed to reordering/clamping codes in place).
VALUE_PRODUCERS = ("conv2d", "dense", "avgpool", "residual_add")


@dataclass
class Layer:
    name: str
    kind: str
    weights: np.ndarray | None = None  # float32; OIHW (conv) or (out, in) (dense)
    bias: np.ndarray | None = None  # float32, per output channel
    stride: int = 1
    padding: int = 0
    kernel_size: int = 0  # pooling window edge
    source: str | None = None  # residual_add: name of the skip-path layer
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None
    bn_eps: float = 1e-5


@dataclass
class Model:
    name: str
    input_shape: tuple[int, int, int]  # (C, H, W) per sample
    layers: list[Layer]
    metadata: dict = field(default_factory=dict)

    def layer_named(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)


def _conv_out_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"window {k}x{k} stride {stride} does not fit {h}x{w}")
    return oh, ow


def output_shape(layer: Layer, in_shape: tuple[int, ...],
                 shapes_by_name: dict[str, tuple[int, ...]] | None = None) -> tuple[int, ...]:
    """Per-sample output shape of one layer; raises on bad composition."""
    kind = layer.kind
    if kind == "conv2d":
        if layer.weights is None or layer.weights.ndim != 4:
            raise ShapeMismatch(f"{layer.name}: conv2d needs OIHW weights")
        if len(in_shape) != 3:
            raise ShapeMismatch(f"{layer.name}: conv2d input must be CHW, got {in_shape}")
        out_c, in_c, kh, kw = layer.weights.shape
        if kh != kw:
            raise ShapeMismatch(f"{layer.name}: only square kernels supported")
        if in_c != in_shape[0]:
            raise ShapeMismatch(
                f"{layer.name}: kernel expects {in_c} channels, input has {in_shape[0]}"
            )
        oh, ow = _conv_out_hw(in_shape[1], in_shape[2], kh, layer.stride, layer.padding)
        return (out_c, oh, ow)
    if kind == "dense":
        if layer.weights is None or layer.weights.ndim != 2:
            raise ShapeMismatch(f"{layer.name}: dense needs (out, in) weights")
        if len(in_shape) != 1:
            raise ShapeMismatch(
                f"{layer.name}: dense input must be flat, got {in_shape}"
            )
        out_f, in_f = layer.weights.shape
        if in_f != in_shape[0]:
            raise ShapeMismatch(
                f"{layer.name}: weights expect {in_f} features, input has {in_shape[0]}"
            )
        return (out_f,)
    if kind in ("maxpool", "avgpool"):
        if len(in_shape) != 3:
            raise ShapeMismatch(f"{layer.name}: pooling input must be CHW")
        if layer.kernel_size < 1:
            raise ShapeMismatch(f"{layer.name}: pooling needs kernel_size >= 1")
        oh, ow = _conv_out_hw(
            in_shape[1], in_shape[2], layer.kernel_size, layer.stride, 0
        )
        return (in_shape[0], oh, ow)
    if kind == "relu":
        return in_shape
    if kind == "flatten":
        return (int(np.prod(in_shape)),)
    if kind == "batchnorm":
        if len(in_shape) < 1:
            raise ShapeMismatch(f"{layer.name}: batchnorm needs a channel axis")
        for arr in (layer.bn_gamma, layer.bn_beta, layer.bn_mean, layer.bn_var):
            if arr is None or arr.shape != (in_shape[0],):
                raise ShapeMismatch(
                    f"{layer.name}: batchnorm params must have shape ({in_shape[0]},)"
                )
        return in_shape
    if kind == "residual_add":
        if shapes_by_name is None or layer.source not in (shapes_by_name or {}):
            raise ShapeMismatch(
                f"{layer.name}: residual source {layer.source!r} not found upstream"
            )
        if shapes_by_name[layer.source] != in_shape:
            raise ShapeMismatch(
                f"{layer.name}: residual shapes differ "
                f"({shapes_by_name[layer.source]} vs {in_shape})"
            )
        return in_shape
    raise UnknownLayerKind(f"{layer.name}: unknown layer kind {layer.kind!r}")


def walk_shapes(model: Model) -> list[tuple[int, ...]]:
    """Validate composition and return the per-layer output shapes."""
    if not model.layers:
        raise EmptyModel("model has no layers")
    shapes_by_name: dict[str, tuple[int, ...]] = {}
    shape: tuple[int, ...] = tuple(model.input_shape)
    out = []
    for layer in model.layers:
        shape = output_shape(layer, shape, shapes_by_name)
        shapes_by_name[layer.name] = shape
        out.append(shape)
    return out


def count_macs(model: Model, batch: int = 1) -> int:
    """Multiply-accumulates of one forward pass (batch-size scaled)."""
    macs = 0
    shape = tuple(model.input_shape)
    shapes_by_name: dict[str, tuple[int, ...]] = {}
    for layer in model.layers:
        out = output_shape(layer, shape, shapes_by_name)
        if layer.kind == "conv2d":
            out_c, in_c, kh, kw = layer.weights.shape
            macs += out_c * in_c * kh * kw * out[1] * out[2] * batch
        elif layer.kind == "dense":
            out_f, in_f = layer.weights.shape
            macs += out_f * in_f * batch
        shapes_by_name[layer.name] = out
        shape = out
    return macs


# ── Manifest I/O ─────────────────────────────────────────────────


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_blob(arr: np.ndarray, path: Path) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f4")
    path.write_bytes(data.tobytes())
    return {
        "shape": list(arr.shape),
        "file": path.name,
        "sha256": _sha256(path),
    }


def _read_blob(entry: dict, base: Path) -> np.ndarray:
    path = base / entry["file"]
    if not path.exists():
        raise ChecksumError(f"missing tensor blob {path}")
    digest = _sha256(path)
    if digest != entry["sha256"]:
        raise ChecksumError(f"checksum mismatch for {path.name}")
    shape = tuple(entry["shape"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != math.prod(shape):
        raise ShapeMismatch(
            f"{path.name}: blob holds {raw.size} values, shape {shape} "
            f"needs {math.prod(shape)}"
        )
    return raw.reshape(shape).astype(np.float32)


_LAYER_SCALAR_DEFAULTS = {
    "stride": 1,
    "padding": 0,
    "kernel_size": 0,
    "source": None,
    "bn_eps": 1e-5,
}
_LAYER_TENSOR_FIELDS = ("weights", "bias", "bn_gamma", "bn_beta", "bn_mean", "bn_var")


def save_model(model: Model, out_dir: str | Path) -> Path:
    """Write manifest.json plus tensor blobs; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layers_doc = []
    for layer in model.layers:
        doc: dict = {"name": layer.name, "kind": layer.kind}
        for key, default in _LAYER_SCALAR_DEFAULTS.items():
            value = getattr(layer, key)
            if value != default:
                doc[key] = value
        for key in _LAYER_TENSOR_FIELDS:
            arr = getattr(layer, key)
            if arr is not None:
                doc[key] = _write_blob(arr, out / f"{layer.name}.{key}.bin")
        layers_doc.append(doc)
    manifest = {
        "format_version": 1,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "metadata": model.metadata,
        "layers": layers_doc,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_model(manifest_path: str | Path) -> Model:
    """Load and validate a model manifest (shapes, kinds, checksums)."""
    path = Path(manifest_path)
    doc = json.loads(path.read_text())
    base = path.parent
    layers = []
    for entry in doc.get("layers", []):
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            raise UnknownLayerKind(f"{entry.get('name')}: unknown layer kind {kind!r}")
        layer = Layer(name=entry["name"], kind=kind)
        for key in _LAYER_SCALAR_DEFAULTS:
            if key in entry:
                setattr(layer, key, entry[key])
        for key in _LAYER_TENSOR_FIELDS:
            if key in entry:
                setattr(layer, key, _read_blob(entry[key], base))
        layers.append(layer)
    model = Model(
        name=doc.get("name", path.stem),
        input_shape=tuple(doc["input_shape"]),
        layers=layers,
        metadata=doc.get("metadata", {}),
    )
    walk_shapes(model)  # raises EmptyModel / ShapeMismatch on bad composition
    return model


# ── Batch-norm folding ───────────────────────────────────────────


def fold_batchnorm(model: Model) -> Model:
    """Absorb each batchnorm into the conv/dense layer directly before it.

    Folding is computed in float64 and stored back as float32; the float
    forward pass stays within ~1e-5 relative error of the unfolded model.
    """
    layers: list[Layer] = []
    for layer in model.layers:
        if layer.kind != "batchnorm":
            layers.append(replace(layer))
            continue
        if not layers or layers[-1].kind not in ("conv2d", "dense"):
            raise FoldError(
                f"{layer.name}: batchnorm must directly follow conv2d or dense"
            )
        prev = layers[-1]
        sigma = np.sqrt(layer.bn_var.astype(np.float64) + layer.bn_eps)
        gain = layer.bn_gamma.astype(np.float64) / sigma
        w = prev.weights.astype(np.float64)
        w = w * gain.reshape((-1,) + (1,) * (w.ndim - 1))
        bias = prev.bias.astype(np.float64) if prev.bias is not None else 0.0
        bias = (bias - layer.bn_mean.astype(np.float64)) * gain + layer.bn_beta.astype(
            np.float64
        )
        layers[-1] = replace(
            prev,
            weights=w.astype(np.float32),
            bias=bias.astype(np.float32),
        )
    folded = Model(
        name=model.name,
        input_shape=model.input_shape,
        layers=layers,
        metadata=dict(model.metadata),
    )
    walk_shapes(folded)
    return folded
