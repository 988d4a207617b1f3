"""Dataset loaders: IDX (MNIST family), CIFAR-10 binary, seeded synthetic."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import EmptyDataset, LabelMismatch

__all__ = [
    "Dataset",
    "read_idx",
    "write_idx",
    "load_idx_dir",
    "load_cifar10_dir",
    "synthetic",
    "open_dataset",
]

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4",
               0x0D: ">f4", 0x0E: ">f8"}

CIFAR10_RECORD = 3073  # label byte + 3*32*32 pixels


@dataclass
class Dataset:
    images: np.ndarray  # float32, (N, C, H, W), pixel range [0, 1]
    labels: np.ndarray  # int64, (N,)

    def __post_init__(self) -> None:
        if len(self.images) == 0:
            raise EmptyDataset("dataset has no samples")
        if len(self.images) != len(self.labels):
            raise LabelMismatch(
                f"{len(self.images)} samples but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.images)

    def take(self, count: int) -> "Dataset":
        count = min(count, len(self))
        return Dataset(self.images[:count], self.labels[:count])


def read_idx(path: str | Path) -> np.ndarray:
    """Read one IDX file (big-endian dims, dtype from the magic)."""
    raw = Path(path).read_bytes()
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES:
        raise ValueError(f"{path}: not an IDX file (magic {raw[:4]!r})")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=_IDX_DTYPES[dtype_code], offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    return data.reshape(dims)


def write_idx(arr: np.ndarray, path: str | Path) -> None:
    """Write a uint8 array as an IDX file (used by tests and tooling)."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, arr.ndim)
    header += struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def _find_one(directory: Path, needle: str) -> Path:
    hits = sorted(p for p in directory.iterdir() if needle in p.name)
    if not hits:
        raise FileNotFoundError(f"no '*{needle}*' file in {directory}")
    return hits[0]


def load_idx_dir(directory: str | Path) -> Dataset:
    """Load the images/labels IDX pair found in a directory."""
    directory = Path(directory)
    images = read_idx(_find_one(directory, "images-idx3"))
    labels = read_idx(_find_one(directory, "labels-idx1"))
    images = images.astype(np.float32) / 255.0
    return Dataset(images[:, None, :, :], labels.astype(np.int64))


def load_cifar10_dir(directory: str | Path) -> Dataset:
    """Load CIFAR-10 binary batches: 3073-byte records, label then 3x32x32."""
    directory = Path(directory)
    names = sorted(p for p in directory.iterdir() if p.suffix == ".bin")
    test = [p for p in names if "test" in p.name]
    batches = test if test else names
    if not batches:
        raise FileNotFoundError(f"no .bin batches in {directory}")
    records = []
    for path in batches:
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if raw.size % CIFAR10_RECORD:
            raise ValueError(f"{path}: size is not a multiple of {CIFAR10_RECORD}")
        records.append(raw.reshape(-1, CIFAR10_RECORD))
    data = np.concatenate(records)
    labels = data[:, 0].astype(np.int64)
    images = data[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels)


def synthetic(
    seed: int,
    count: int,
    input_shape: tuple[int, int, int] = (1, 12, 12),
    classes: int = 10,
) -> Dataset:
    """Deterministic class-structured images: per-class pattern plus noise."""
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(0.0, 1.0, size=(classes, *input_shape))
    labels = rng.integers(0, classes, size=count)
    noise = rng.normal(0.0, 0.35, size=(count, *input_shape))
    images = 0.5 + 0.25 * prototypes[labels] + 0.25 * noise
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64))


def open_dataset(
    spec: str,
    count: int | None = None,
    input_shape: tuple[int, int, int] = (1, 12, 12),
) -> Dataset:
    """Resolve ``idx:<dir>``, ``cifar10:<dir>``, or ``synth:<seed>``."""
    kind, sep, rest = spec.partition(":")
    if not sep:
        raise ValueError(f"dataset spec needs '<kind>:<arg>', got {spec!r}")
    if kind == "idx":
        ds = load_idx_dir(rest)
    elif kind == "cifar10":
        ds = load_cifar10_dir(rest)
    elif kind == "synth":
        ds = synthetic(int(rest), count or 1024, input_shape)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return ds.take(count) if count else ds
