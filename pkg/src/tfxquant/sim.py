"""Analytic output-stationary systolic-array cost model.

Each GEMM tiles onto the PE grid; a tile costs its fill and drain wavefronts
plus one accumulation step per contraction element, giving

    cycles = ceil(M/rows) * ceil(N/cols) * (K + rows + cols - 2).

DRAM transfers are double buffered: the first layer's operands load up
front, later transfers overlap the previous layer's compute.  Energy is
MAC count times a per-format MAC coefficient plus byte counts times memory
coefficients.  The default cost table is ILLUSTRATIVE: it encodes only the
relative tapered-vs-fixed MAC cost ratio, not measured joules.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import TileOverflow
from .nn.datasets import Dataset
from .nn.engine import calibrate, evaluate, quantize_model
from .nn.model import Layer, Model, fold_batchnorm, walk_shapes
from .nn.quantized import QLayer, QuantizedModel

__all__ = [
    "ArrayConfig",
    "MemoryConfig",
    "CostTable",
    "SimReport",
    "schedule_layer",
    "lower_to_gemm",
    "simulate_model",
    "SweepPoint",
    "edp_sweep",
]

DEFAULT_CLOCK_HZ = 200e6  # arbitrary but configuration-visible


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 16
    cols: int = 16
    bits: int = 8  # operand width moving through the datapath
    dataflow: str = "output_stationary"

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("PE grid must be at least 1x1")
        if self.dataflow != "output_stationary":
            raise ValueError("only the output-stationary dataflow is modeled")


@dataclass(frozen=True)
class MemoryConfig:
    sram_bytes: int = 3 * 108 * 1024  # three scratchpad banks
    dram_bytes_per_cycle: float = 16.0
    dram_latency_cycles: int = 100

    def __post_init__(self) -> None:
        if min(self.sram_bytes, self.dram_bytes_per_cycle,
               self.dram_latency_cycles) < 0 or self.dram_bytes_per_cycle <= 0:
            raise ValueError("memory parameters must be positive")


@dataclass(frozen=True)
class CostTable:
    """Energy coefficients in joules.  Defaults are ILLUSTRATIVE shapes only:
    the tapered/fixed MAC ratio is the modeled quantity, not absolute energy."""

    fxp_mac_j: float = 1.0e-12  # one 8-bit fixed-point MAC
    tfx_mac_ratio: float = 1.25  # tapered MAC energy relative to fixed point
    sram_j_per_byte: float = 0.5e-12
    dram_j_per_byte: float = 20.0e-12

    def mac_energy(self, format_kind: str, bits: int) -> float:
        base = self.fxp_mac_j * (bits / 8.0) ** 2  # multiplier-area-style scaling
        return base * self.tfx_mac_ratio if format_kind == "tfx" else base

    @classmethod
    def from_json(cls, path: str | Path) -> "CostTable":
        doc = json.loads(Path(path).read_text())
        return cls(**doc)


@dataclass
class SimReport:
    cycles: int
    compute_cycles: int
    utilization: float
    dram_traffic: int  # bytes
    energy: float  # joules
    edp: float  # joule-seconds
    macs: int

    def __post_init__(self) -> None:
        assert 0.0 <= self.utilization <= 1.0


def schedule_layer(
    m: int, k: int, n: int, array: ArrayConfig
) -> tuple[int, float]:
    """Cycles and PE utilization of one M x K x N GEMM on the grid."""
    if min(m, k, n) < 1:
        raise ValueError(f"GEMM dims must be >= 1, got {(m, k, n)}")
    tiles = math.ceil(m / array.rows) * math.ceil(n / array.cols)
    cycles = tiles * (k + array.rows + array.cols - 2)
    utilization = (m * n * k) / (cycles * array.rows * array.cols)
    return cycles, utilization


def lower_to_gemm(layer: Layer | QLayer, in_shape: tuple[int, ...],
                  batch: int = 1) -> tuple[int, int, int] | None:
    """GEMM dims of a compute layer; None for zero-MAC pass-through kinds."""
    if layer.kind == "dense":
        shape = _weight_shape(layer)
        return (shape[0], shape[1], batch)
    if layer.kind == "conv2d":
        out_c, in_c, kh, kw = _weight_shape(layer)
        oh = (in_shape[1] + 2 * layer.padding - kh) // layer.stride + 1
        ow = (in_shape[2] + 2 * layer.padding - kw) // layer.stride + 1
        return (out_c, in_c * kh * kw, oh * ow * batch)
    return None


def _weight_shape(layer: Layer | QLayer) -> tuple[int, ...]:
    arr = layer.weights if isinstance(layer, Layer) else layer.weight_scodes
    return arr.shape


def _layer_shapes(model: Model | QuantizedModel) -> list[tuple[int, ...]]:
    if isinstance(model, Model):
        return walk_shapes(model)
    # Mirror the shape walk using the quantized layers' hyperparameters.
    proxy_layers = []
    for q in model.layers:
        proxy = Layer(
            name=q.name, kind=q.kind, stride=q.stride, padding=q.padding,
            kernel_size=q.kernel_size, source=q.source,
        )
        if q.weight_scodes is not None:
            proxy.weights = np.zeros(q.weight_scodes.shape, dtype=np.float32)
        proxy_layers.append(proxy)
    return walk_shapes(Model(model.name, model.input_shape, proxy_layers))


def _bytes_for(elements: int, bits: int) -> int:
    return math.ceil(elements * bits / 8)


def simulate_model(
    model: Model | QuantizedModel,
    array: ArrayConfig | None = None,
    mem: MemoryConfig | None = None,
    costs: CostTable | None = None,
    clock_hz: float = DEFAULT_CLOCK_HZ,
    batch: int = 1,
    format_kind: str | None = None,
) -> SimReport:
    """Latency, utilization, traffic, energy, and EDP of one inference."""
    array = array or ArrayConfig()
    mem = mem or MemoryConfig()
    costs = costs or CostTable()
    if format_kind is None:
        format_kind = getattr(model, "format_kind", "fxp")
    bits = getattr(model, "bits", array.bits)
    if not model.layers:
        return SimReport(0, 0, 0.0, 0, 0.0, 0.0, 0)

    shapes = _layer_shapes(model)
    in_shapes = [tuple(model.input_shape)] + shapes[:-1]

    compute: list[int] = []  # per compute layer
    transfers: list[int] = []
    dram_bytes = 0
    macs = 0
    for layer, in_shape, out_shape in zip(model.layers, in_shapes, shapes):
        dims = lower_to_gemm(layer, in_shape, batch)
        if dims is None:
            continue
        m, k, n = dims
        cycles, _ = schedule_layer(m, k, n, array)
        tile_bits = (array.rows * k + k * array.cols) * bits
        if tile_bits > mem.sram_bytes * 8:
            raise TileOverflow(
                f"{layer.name}: one {array.rows}x{array.cols} tile needs "
                f"{tile_bits // 8} bytes, scratchpad holds {mem.sram_bytes}"
            )
        traffic = (
            _bytes_for(m * k, bits)  # weights
            + _bytes_for(math.prod(in_shape) * batch, bits)
            + _bytes_for(math.prod(out_shape) * batch, bits)
        )
        compute.append(cycles)
        transfers.append(
            math.ceil(traffic / mem.dram_bytes_per_cycle) + mem.dram_latency_cycles
        )
        dram_bytes += traffic
        macs += m * k * n

    if not compute:
        return SimReport(0, 0, 0.0, 0, 0.0, 0.0, 0)

    # Double buffering: the first load is exposed, each later load hides
    # under the previous layer's compute.
    total = transfers[0]
    for i, cycles in enumerate(compute):
        nxt = transfers[i + 1] if i + 1 < len(transfers) else 0
        total += max(cycles, nxt)

    compute_cycles = sum(compute)
    energy = (
        macs * costs.mac_energy(format_kind, bits)
        + dram_bytes * (costs.dram_j_per_byte + costs.sram_j_per_byte)
    )
    return SimReport(
        cycles=total,
        compute_cycles=compute_cycles,
        utilization=macs / (compute_cycles * array.rows * array.cols),
        dram_traffic=dram_bytes,
        energy=energy,
        edp=energy * (total / clock_hz),
        macs=macs,
    )


@dataclass
class SweepPoint:
    """One row of the format-by-width sweep table."""

    format_kind: str
    bits: int
    policy: str
    cycles: int
    utilization: float
    dram_bytes: int
    energy_j: float
    edp: float
    top1: float
    mean_mse: float


def edp_sweep(
    model: Model,
    dataset: Dataset,
    bits_list: list[int],
    kinds: tuple[str, ...] = ("tfx", "fxp"),
    calib_size: int = 256,
    array: ArrayConfig | None = None,
    mem: MemoryConfig | None = None,
    costs: CostTable | None = None,
    clock_hz: float = DEFAULT_CLOCK_HZ,
) -> list[SweepPoint]:
    """Quantize, evaluate, and cost every (format, width) combination."""
    if any(layer.kind == "batchnorm" for layer in model.layers):
        model = fold_batchnorm(model)
    stats = calibrate(model, dataset.images[:calib_size])
    rows = []
    for kind in kinds:
        for bits in bits_list:
            qm = quantize_model(model, bits, kind, stats)
            report = evaluate(qm, dataset)
            sim = simulate_model(qm, array, mem, costs, clock_hz)
            rows.append(
                SweepPoint(
                    format_kind=kind,
                    bits=bits,
                    policy=qm.policy,
                    cycles=sim.cycles,
                    utilization=sim.utilization,
                    dram_bytes=sim.dram_traffic,
                    energy_j=sim.energy,
                    edp=sim.edp,
                    top1=report.top1_accuracy,
                    mean_mse=report.mean_mse,
                )
            )
    return rows
