"""Tapered fixed-point arithmetic, post-training quantization, exact
quire dot products, a small inference engine, and an analytic
systolic-array cost model."""

from .formats import (
    FormatParseError,
    FxpConfig,
    TfxConfig,
    UnpackedTfx,
    decode,
    dynamic_range,
    enumerate_values,
    extremes,
    pack,
    parse_format,
    quantize_array,
    quantize_real,
    to_real,
    unpack,
)
from .dot import Quire, decode_operand, dot, quire_width
from .select import FormatAssignment, LayerStats, select_fxp_params, select_params, tensor_stats

__version__ = "0.1.0"

__all__ = [
    "FormatParseError",
    "FxpConfig",
    "TfxConfig",
    "UnpackedTfx",
    "decode",
    "dynamic_range",
    "enumerate_values",
    "extremes",
    "pack",
    "parse_format",
    "quantize_array",
    "quantize_real",
    "to_real",
    "unpack",
    "Quire",
    "decode_operand",
    "dot",
    "quire_width",
    "FormatAssignment",
    "LayerStats",
    "select_fxp_params",
    "select_params",
    "tensor_stats",
    "__version__",
]
