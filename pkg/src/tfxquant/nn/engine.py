"""Float and quantized inference over the layer graph.

The float path is plain float32 numpy.  The quantized path keeps every
conv/dense output exact until a single rounding into the consumer's format:
operand codes become integer numerators, products accumulate in int64
matmuls (an analytic bit budget guarantees no overflow; layers that would
exceed it fall back to a per-element exact-rational path), and the finished
sums plus the exact float bias are compared against the output lattice with
integer arithmetic only.  ReLU and max pooling act directly on signed codes,
which order by value.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from ..dot import frac_places, scale_magnitude
from ..errors import EmptyDataset, ShapeMismatch, UnknownLayerKind, UnsupportedWidth
from ..formats import (
    MAX_BITS,
    MIN_BITS,
    FormatConfig,
    decode_array,
    integer_lattice,
    quantize_array,
    quantize_real,
    unpack,
)
from ..select import LayerStats, select_fxp_params, select_params
from .datasets import Dataset
from .model import Model, fold_batchnorm, walk_shapes
from .quantized import QLayer, QuantizedModel

__all__ = [
    "CalibrationStats",
    "EvalReport",
    "calibrate",
    "quantize_model",
    "infer",
    "infer_float",
    "infer_quantized",
    "evaluate",
]

_INT64_BUDGET = 62  # sign bit plus one guard bit of headroom


@dataclass
class CalibrationStats:
    """Max-abs statistics from a float calibration pass.

    ``layers[i].a_amax`` is measured at layer i's *output*; the model input
    gets its own entry since no layer produces it.
    """

    input_amax: float
    layers: list[LayerStats]


@dataclass
class EvalReport:
    top1_accuracy: float
    per_layer_mse: list[float]  # weight-quantization MSE, one entry per conv/dense
    sample_count: int

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.per_layer_mse)) if self.per_layer_mse else 0.0


# ── Window lowering shared by both paths ─────────────────────────


def _conv_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, OH*OW) patch matrix, zero padded."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = _conv_hw(h, w, k, stride, padding)
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[
                :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
            ]
    return cols.reshape(n, c * k * k, oh * ow)


def _pool_windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C, k*k, OH*OW) per-channel windows."""
    n, c, h, w = x.shape
    cols = _im2col(x.reshape(n * c, 1, h, w), k, stride, 0)
    return cols.reshape(n, c, k * k, -1)


# ── Float path ───────────────────────────────────────────────────


def infer_float(
    model: Model, x: np.ndarray, record: list[np.ndarray] | None = None
) -> np.ndarray:
    """float32 forward pass; optionally records every layer output."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[1:] != tuple(model.input_shape):
        raise ShapeMismatch(
            f"input {x.shape[1:]} does not match model input {model.input_shape}"
        )
    saved: dict[str, np.ndarray] = {}
    need = {layer.source for layer in model.layers if layer.kind == "residual_add"}
    for layer in model.layers:
        kind = layer.kind
        if kind == "conv2d":
            out_c, _, k, _ = layer.weights.shape
            oh, ow = _conv_hw(x.shape[2], x.shape[3], k, layer.stride, layer.padding)
            flat = layer.weights.reshape(out_c, -1) @ _im2col(
                x, k, layer.stride, layer.padding
            )
            if layer.bias is not None:
                flat = flat + layer.bias[None, :, None]
            x = flat.reshape(x.shape[0], out_c, oh, ow)
        elif kind == "dense":
            x = x @ layer.weights.T
            if layer.bias is not None:
                x = x + layer.bias
        elif kind == "relu":
            x = np.maximum(x, 0)
        elif kind in ("maxpool", "avgpool"):
            oh, ow = _conv_hw(x.shape[2], x.shape[3], layer.kernel_size, layer.stride, 0)
            win = _pool_windows(x, layer.kernel_size, layer.stride)
            pooled = win.max(axis=2) if kind == "maxpool" else win.mean(axis=2)
            x = pooled.reshape(x.shape[0], x.shape[1], oh, ow)
        elif kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif kind == "batchnorm":
            shape = (1, -1) + (1,) * (x.ndim - 2)
            sigma = np.sqrt(layer.bn_var + layer.bn_eps)
            x = (x - layer.bn_mean.reshape(shape)) / sigma.reshape(shape)
            x = layer.bn_gamma.reshape(shape) * x + layer.bn_beta.reshape(shape)
        elif kind == "residual_add":
            x = x + saved[layer.source]
        else:
            raise UnknownLayerKind(f"{layer.name}: {kind!r}")
        x = x.astype(np.float32, copy=False)
        if layer.name in need:
            saved[layer.name] = x
        if record is not None:
            record.append(x)
    return x


def calibrate(model: Model, samples: np.ndarray) -> CalibrationStats:
    """Record max-abs weight and output-activation values per layer."""
    samples = np.asarray(samples, dtype=np.float32)
    if samples.size == 0:
        raise EmptyDataset("calibration batch is empty")
    outputs: list[np.ndarray] = []
    infer_float(model, samples, record=outputs)
    stats = []
    for layer, out in zip(model.layers, outputs):
        w_amax = float(np.abs(layer.weights).max()) if layer.weights is not None else 0.0
        stats.append(LayerStats(w_amax=w_amax, a_amax=float(np.abs(out).max())))
    return CalibrationStats(
        input_amax=float(np.abs(samples).max()), layers=stats
    )


# ── Quantization ─────────────────────────────────────────────────


def _act_config(amax: float, bits: int, kind: str) -> FormatConfig:
    if kind == "tfx":
        return select_params(LayerStats(0.0, amax), bits).activation_config
    return select_fxp_params(amax, bits)


def quantize_model(
    model: Model,
    bits: int,
    kind: str,
    stats: CalibrationStats,
    explicit: FormatConfig | None = None,
) -> QuantizedModel:
    """Assign per-layer formats and quantize weights.

    ``kind`` is "tfx" or "fxp" with automatic per-layer selection; an
    ``explicit`` config overrides every assignment (ablation mode).  Batch
    norms must be folded before quantization; ``stats`` must come from the
    same (folded) model.
    """
    if not MIN_BITS <= bits <= MAX_BITS:
        raise UnsupportedWidth(f"bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]")
    if kind not in ("tfx", "fxp"):
        raise ValueError(f"format kind must be 'tfx' or 'fxp', got {kind!r}")
    if any(layer.kind == "batchnorm" for layer in model.layers):
        model = fold_batchnorm(model)
    if len(stats.layers) != len(model.layers):
        raise ShapeMismatch(
            f"stats cover {len(stats.layers)} layers, model has {len(model.layers)}"
        )
    walk_shapes(model)

    def act_cfg(amax: float) -> FormatConfig:
        return explicit if explicit is not None else _act_config(amax, bits, kind)

    qlayers = []
    for layer, stat in zip(model.layers, stats.layers):
        qlayer = QLayer(
            name=layer.name,
            kind=layer.kind,
            stride=layer.stride,
            padding=layer.padding,
            kernel_size=layer.kernel_size,
            source=layer.source,
        )
        if layer.kind in ("conv2d", "dense"):
            if explicit is not None:
                w_cfg = explicit
            elif kind == "tfx":
                w_cfg = select_params(stat, bits).weight_config
            else:
                w_cfg = select_fxp_params(stat.w_amax, bits)
            scodes = quantize_array(layer.weights.astype(np.float64), w_cfg)
            err = decode_array(scodes, w_cfg) - layer.weights.astype(np.float64)
            qlayer.weight_cfg = w_cfg
            qlayer.weight_scodes = scodes
            qlayer.weight_mse = float(np.mean(err * err))
            qlayer.bias = None if layer.bias is None else layer.bias.copy()
        if layer.kind in ("conv2d", "dense", "avgpool", "residual_add"):
            qlayer.out_cfg = act_cfg(stat.a_amax)
        qlayers.append(qlayer)
    policy = explicit.descriptor if explicit is not None else "auto"
    return QuantizedModel(
        name=model.name,
        input_shape=tuple(model.input_shape),
        bits=bits if explicit is None else explicit.n,
        format_kind=kind,
        policy=policy,
        input_cfg=act_cfg(stats.input_amax),
        layers=qlayers,
        metadata=dict(model.metadata),
    )


# ── Quantized path ───────────────────────────────────────────────


@lru_cache(maxsize=None)
def _numerators_by_scode(cfg: FormatConfig) -> np.ndarray:
    """int64 unscaled numerators at frac_places(cfg), indexed by scode+half."""
    half = 1 << (cfg.n - 1)
    places = frac_places(cfg)
    out = np.zeros(1 << cfg.n, dtype=np.int64)
    for code in range(1 << cfg.n):
        if hasattr(cfg, "is_max"):
            u = unpack(code, cfg)
            num = u.int_value * (1 << places) + u.frac_numerator * (
                1 << (places - u.frac_bits)
            )
        else:
            num = code - (1 << cfg.n) if code >= half else code
        scode = code - (1 << cfg.n) if code >= half else code
        out[scode + half] = num
    return out


def _operand_numerators(scodes: np.ndarray, cfg: FormatConfig) -> np.ndarray:
    table = _numerators_by_scode(cfg)
    return table[scodes.astype(np.int64) + (1 << (cfg.n - 1))]


def _denom_exp(cfg: FormatConfig) -> int:
    return frac_places(cfg) + scale_magnitude(cfg)


def _check_acc_budget(wnum: np.ndarray, anum: np.ndarray, terms: int) -> None:
    """Ensure the int64 matmul cannot overflow (needs absurd sizes to fail)."""
    peak = int(np.abs(wnum).max(initial=0)) * int(np.abs(anum).max(initial=0))
    bits = peak.bit_length() + max(terms - 1, 0).bit_length()
    if bits + 1 > _INT64_BUDGET:
        raise OverflowError(
            f"accumulation of {terms} products needs {bits} bits; "
            "reduce the contraction size or bit width"
        )


def _encode_sums(
    acc: np.ndarray,
    denom_exp: int,
    denom_factor: int,
    bias: np.ndarray | None,
    channel_axis: int,
    out_cfg: FormatConfig,
) -> np.ndarray:
    """Quantize acc / (2^denom_exp * denom_factor) + bias[channel], exactly.

    All comparisons against the output lattice happen on a common integer
    scale.  If the required magnitudes cannot fit int64, the layer reruns
    through exact Fractions element by element (slow, same results).
    """
    lat = integer_lattice(out_cfg)
    grid = lat.grid_exp
    if bias is not None:
        bias_fracs = [Fraction(float(b)) for b in bias]
        bias_exp = max((f.denominator.bit_length() - 1 for f in bias_fracs), default=0)
    else:
        bias_fracs = None
        bias_exp = 0
    scale = max(denom_exp, grid + 1, bias_exp)

    acc_bits = int(np.abs(acc).max(initial=0)).bit_length() + (scale - denom_exp)
    factor_bits = denom_factor.bit_length()
    bias_bits = 0
    if bias_fracs:
        bias_bits = max(
            abs(f.numerator).bit_length() + (scale - (f.denominator.bit_length() - 1))
            for f in bias_fracs
        ) + factor_bits
    bound_bits = (2 * lat.max_abs_numerator).bit_length() + (scale - grid - 1) + factor_bits
    if max(acc_bits, bias_bits, bound_bits) + 1 > _INT64_BUDGET:
        return _encode_sums_exact(acc, denom_exp, denom_factor, bias_fracs,
                                  channel_axis, out_cfg)

    scaled = acc.astype(np.int64) << (scale - denom_exp)
    if bias_fracs is not None:
        addend = np.array(
            [
                (f.numerator * denom_factor) << (scale - (f.denominator.bit_length() - 1))
                for f in bias_fracs
            ],
            dtype=np.int64,
        )
        shape = [1] * acc.ndim
        shape[channel_axis] = len(bias_fracs)
        scaled = scaled + addend.reshape(shape)
    bounds = (lat.boundaries2 * denom_factor) << (scale - grid - 1)

    flat = scaled.reshape(-1)
    idx = np.searchsorted(bounds, flat, side="left")
    n_mids = len(bounds)
    at_mid = (idx < n_mids) & (flat == bounds[np.minimum(idx, n_mids - 1)])
    if at_mid.any():
        idx = idx.copy()
        idx[at_mid] += lat.lsb[idx[at_mid]].astype(idx.dtype)
    return lat.scodes[idx].reshape(acc.shape)


def _encode_sums_exact(acc, denom_exp, denom_factor, bias_fracs, channel_axis, out_cfg):
    denom = (1 << denom_exp) * denom_factor
    out = np.empty(acc.shape, dtype=np.int32)
    half = 1 << (out_cfg.n - 1)
    for pos in np.ndindex(acc.shape):
        value = Fraction(int(acc[pos]), denom)
        if bias_fracs is not None:
            value += bias_fracs[pos[channel_axis]]
        code = quantize_real(value, out_cfg)
        out[pos] = code - (1 << out_cfg.n) if code >= half else code
    return out


def infer_quantized(qm: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Quantized forward pass; returns decoded float64 logits."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != tuple(qm.input_shape):
        raise ShapeMismatch(
            f"input {x.shape[1:]} does not match model input {qm.input_shape}"
        )
    scodes = quantize_array(x, qm.input_cfg)
    cfg = qm.input_cfg
    saved: dict[str, tuple[np.ndarray, FormatConfig]] = {}
    need = {layer.source for layer in qm.layers if layer.kind == "residual_add"}
    for layer in qm.layers:
        kind = layer.kind
        if kind == "conv2d":
            out_c, _, k, _ = layer.weight_scodes.shape
            oh, ow = _conv_hw(scodes.shape[2], scodes.shape[3], k, layer.stride,
                              layer.padding)
            wnum = _operand_numerators(layer.weight_scodes, layer.weight_cfg)
            anum = _operand_numerators(scodes, cfg)
            cols = _im2col(anum, k, layer.stride, layer.padding)
            _check_acc_budget(wnum, anum, cols.shape[1])
            acc = np.matmul(wnum.reshape(out_c, -1), cols)
            denom = _denom_exp(layer.weight_cfg) + _denom_exp(cfg)
            out = _encode_sums(acc, denom, 1, layer.bias, 1, layer.out_cfg)
            scodes = out.reshape(scodes.shape[0], out_c, oh, ow)
            cfg = layer.out_cfg
        elif kind == "dense":
            wnum = _operand_numerators(layer.weight_scodes, layer.weight_cfg)
            anum = _operand_numerators(scodes, cfg)
            _check_acc_budget(wnum, anum, anum.shape[1])
            acc = anum @ wnum.T
            denom = _denom_exp(layer.weight_cfg) + _denom_exp(cfg)
            scodes = _encode_sums(acc, denom, 1, layer.bias, 1, layer.out_cfg)
            cfg = layer.out_cfg
        elif kind == "relu":
            # Negative values have negative signed codes; zero's code is 0.
            scodes = np.maximum(scodes, 0)
        elif kind == "maxpool":
            oh, ow = _conv_hw(scodes.shape[2], scodes.shape[3], layer.kernel_size,
                              layer.stride, 0)
            win = _pool_windows(scodes, layer.kernel_size, layer.stride)
            scodes = win.max(axis=2).reshape(scodes.shape[0], scodes.shape[1], oh, ow)
        elif kind == "avgpool":
            oh, ow = _conv_hw(scodes.shape[2], scodes.shape[3], layer.kernel_size,
                              layer.stride, 0)
            win = _pool_windows(
                _operand_numerators(scodes, cfg), layer.kernel_size, layer.stride
            )
            acc = win.sum(axis=2)
            out = _encode_sums(
                acc, _denom_exp(cfg), layer.kernel_size**2, None, 1, layer.out_cfg
            )
            scodes = out.reshape(scodes.shape[0], scodes.shape[1], oh, ow)
            cfg = layer.out_cfg
        elif kind == "flatten":
            scodes = scodes.reshape(scodes.shape[0], -1)
        elif kind == "residual_add":
            skip_codes, skip_cfg = saved[layer.source]
            d_main, d_skip = _denom_exp(cfg), _denom_exp(skip_cfg)
            d = max(d_main, d_skip)
            acc = (_operand_numerators(scodes, cfg) << (d - d_main)) + (
                _operand_numerators(skip_codes, skip_cfg) << (d - d_skip)
            )
            scodes = _encode_sums(acc, d, 1, None, 1, layer.out_cfg)
            cfg = layer.out_cfg
        elif kind == "batchnorm":
            raise UnknownLayerKind(
                f"{layer.name}: batchnorm must be folded before quantized inference"
            )
        else:
            raise UnknownLayerKind(f"{layer.name}: {kind!r}")
        if layer.name in need:
            saved[layer.name] = (scodes, cfg)
    return decode_array(scodes, cfg)


def infer(m: Model | QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Logits of a float or quantized model for a batch."""
    if isinstance(m, QuantizedModel):
        return infer_quantized(m, x)
    return infer_float(m, x)


def evaluate(m: Model | QuantizedModel, dataset: Dataset) -> EvalReport:
    """Top-1 accuracy plus per-layer weight-quantization MSE."""
    logits = infer(m, dataset.images)
    top1 = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    if isinstance(m, QuantizedModel):
        mse = [l.weight_mse for l in m.layers if l.weight_scodes is not None]
    else:
        mse = [0.0 for l in m.layers if l.weights is not None]
    return EvalReport(
        top1_accuracy=top1, per_layer_mse=mse, sample_count=len(dataset)
    )
