"""Minimal inference engine: layer graph, datasets, calibration, and the
float/quantized forward paths."""

from .datasets import Dataset, open_dataset, synthetic
from .engine import (
    CalibrationStats,
    EvalReport,
    calibrate,
    evaluate,
    infer,
    infer_float,
    infer_quantized,
    quantize_model,
)
from .fixture import build_batchnorm_convnet, build_tiny_convnet
from .model import (
    Layer,
    Model,
    count_macs,
    fold_batchnorm,
    load_model,
    save_model,
    walk_shapes,
)
from .quantized import (
    QLayer,
    QuantizedModel,
    load_quantized,
    pack_codes,
    save_quantized,
    unpack_codes,
)

__all__ = [
    "Dataset",
    "open_dataset",
    "synthetic",
    "CalibrationStats",
    "EvalReport",
    "calibrate",
    "evaluate",
    "infer",
    "infer_float",
    "infer_quantized",
    "quantize_model",
    "build_tiny_convnet",
    "build_batchnorm_convnet",
    "Layer",
    "Model",
    "count_macs",
    "fold_batchnorm",
    "load_model",
    "save_model",
    "walk_shapes",
    "QLayer",
    "QuantizedModel",
    "load_quantized",
    "pack_codes",
    "save_quantized",
    "unpack_codes",
]
