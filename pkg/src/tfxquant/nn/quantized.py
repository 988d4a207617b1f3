"""Quantized model container, densely bit-packed code blobs, manifest I/O."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ChecksumError, ShapeMismatch
from ..formats import FormatConfig, parse_format, signed_code

__all__ = [
    "QLayer",
    "QuantizedModel",
    "pack_codes",
    "unpack_codes",
    "save_quantized",
    "load_quantized",
]


def pack_codes(scodes: np.ndarray, n: int) -> bytes:
    """Pack signed codes densely, n bits each, little-endian within bytes.

    Element j occupies stream bits [j*n, (j+1)*n), LSB first; stream bit k
    lands in byte k//8 at bit position k%8.
    """
    flat = np.asarray(scodes).reshape(-1)
    unsigned = (flat & ((1 << n) - 1)).astype(np.uint16)
    bits = ((unsigned[:, None] >> np.arange(n, dtype=np.uint16)) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(data: bytes, n: int, count: int) -> np.ndarray:
    """Inverse of pack_codes; returns signed codes (int32)."""
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits.size < count * n:
        raise ShapeMismatch(f"packed blob holds {bits.size} bits, need {count * n}")
    bits = bits[: count * n].reshape(count, n).astype(np.int64)
    unsigned = bits @ (1 << np.arange(n, dtype=np.int64))
    signed = np.where(unsigned >= 1 << (n - 1), unsigned - (1 << n), unsigned)
    return signed.astype(np.int32)


@dataclass
class QLayer:
    """One layer of a quantized model.

    Value-producing layers carry ``out_cfg`` (the format their outputs round
    into); conv/dense additionally carry coded weights and a float bias.
    """

    name: str
    kind: str
    weight_scodes: np.ndarray | None = None  # int32, weight tensor shape
    weight_cfg: FormatConfig | None = None
    out_cfg: FormatConfig | None = None
    bias: np.ndarray | None = None  # float32, added exactly in the quire
    stride: int = 1
    padding: int = 0
    kernel_size: int = 0
    source: str | None = None
    weight_mse: float = 0.0  # float-vs-decoded mean squared error


@dataclass
class QuantizedModel:
    name: str
    input_shape: tuple[int, int, int]
    bits: int
    format_kind: str  # "tfx" or "fxp"
    policy: str  # "auto" or an explicit descriptor
    input_cfg: FormatConfig
    layers: list[QLayer]
    metadata: dict = field(default_factory=dict)

    def layer_named(self, name: str) -> QLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)


# ── Manifest I/O ─────────────────────────────────────────────────


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_quantized(qm: QuantizedModel, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layers_doc = []
    for layer in qm.layers:
        doc: dict = {"name": layer.name, "kind": layer.kind}
        for key, default in (("stride", 1), ("padding", 0), ("kernel_size", 0),
                             ("source", None)):
            if getattr(layer, key) != default:
                doc[key] = getattr(layer, key)
        if layer.out_cfg is not None:
            doc["output_format"] = layer.out_cfg.descriptor
        if layer.weight_scodes is not None:
            packed = pack_codes(layer.weight_scodes, qm.bits)
            blob = out / f"{layer.name}.codes.bin"
            blob.write_bytes(packed)
            doc["weight_format"] = layer.weight_cfg.descriptor
            doc["weight_codes"] = {
                "shape": list(layer.weight_scodes.shape),
                "bits": qm.bits,
                "file": blob.name,
                "sha256": _sha256_bytes(packed),
            }
            doc["weight_mse"] = layer.weight_mse
        if layer.bias is not None:
            data = np.ascontiguousarray(layer.bias, dtype="<f4").tobytes()
            blob = out / f"{layer.name}.bias.bin"
            blob.write_bytes(data)
            doc["bias"] = {
                "shape": list(layer.bias.shape),
                "file": blob.name,
                "sha256": _sha256_bytes(data),
            }
        layers_doc.append(doc)
    manifest = {
        "format_version": 1,
        "quantized": True,
        "name": qm.name,
        "input_shape": list(qm.input_shape),
        "bits": qm.bits,
        "format_kind": qm.format_kind,
        "policy": qm.policy,
        "input_format": qm.input_cfg.descriptor,
        "metadata": qm.metadata,
        "layers": layers_doc,
    }
    path = out / "quantized.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read_checked(entry: dict, base: Path) -> bytes:
    path = base / entry["file"]
    if not path.exists():
        raise ChecksumError(f"missing blob {path}")
    data = path.read_bytes()
    if _sha256_bytes(data) != entry["sha256"]:
        raise ChecksumError(f"checksum mismatch for {path.name}")
    return data


def load_quantized(manifest_path: str | Path) -> QuantizedModel:
    path = Path(manifest_path)
    doc = json.loads(path.read_text())
    if not doc.get("quantized"):
        raise ValueError(f"{path} is not a quantized-model manifest")
    base = path.parent
    bits = doc["bits"]
    layers = []
    for entry in doc["layers"]:
        layer = QLayer(name=entry["name"], kind=entry["kind"])
        for key in ("stride", "padding", "kernel_size", "source"):
            if key in entry:
                setattr(layer, key, entry[key])
        if "output_format" in entry:
            layer.out_cfg = parse_format(entry["output_format"])
        if "weight_codes" in entry:
            meta = entry["weight_codes"]
            shape = tuple(meta["shape"])
            data = _read_checked(meta, base)
            codes = unpack_codes(data, meta["bits"], math.prod(shape))
            layer.weight_scodes = codes.reshape(shape)
            layer.weight_cfg = parse_format(entry["weight_format"])
            layer.weight_mse = entry.get("weight_mse", 0.0)
        if "bias" in entry:
            meta = entry["bias"]
            data = _read_checked(meta, base)
            layer.bias = np.frombuffer(data, dtype="<f4").reshape(tuple(meta["shape"]))
        layers.append(layer)
    return QuantizedModel(
        name=doc["name"],
        input_shape=tuple(doc["input_shape"]),
        bits=bits,
        format_kind=doc["format_kind"],
        policy=doc["policy"],
        input_cfg=parse_format(doc["input_format"]),
        layers=layers,
        metadata=doc.get("metadata", {}),
    )
