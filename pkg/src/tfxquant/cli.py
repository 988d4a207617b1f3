"""Command-line entry point: quantize, evaluate, sweep, simulate, inspect.

Every command is deterministic under a fixed --seed; CSV outputs are
byte-stable across runs.  Failures print a machine-readable JSON object on
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import nn, sim
from .errors import TfxQuantError
from .formats import FormatParseError, TfxConfig, enumerate_values, parse_format
from .nn.engine import calibrate
from .report import (
    format_dump_lines,
    render_edp_figure,
    render_format_figure,
    render_sweep_figures,
    write_csv,
)

EVAL_HEADER = ("format", "bits", "policy", "top1", "mean_mse", "samples")
SIM_HEADER = ("format", "n", "is_policy", "cycles", "utilization", "dram_bytes",
              "energy_j", "edp", "top1", "mean_mse")


def _parse_bits(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if lo > hi:
            raise ValueError(f"empty bit range {text!r}")
        return list(range(lo, hi + 1))
    return [int(text)]


def _parse_array(text: str) -> sim.ArrayConfig:
    rows, sep, cols = text.lower().partition("x")
    if not sep:
        raise ValueError(f"array spec needs RxC, got {text!r}")
    return sim.ArrayConfig(int(rows), int(cols))


def _parse_format_arg(text: str) -> tuple[str, object | None]:
    """Returns (kind, explicit-config-or-None) for --format."""
    if text in ("tfx:auto", "fxp:auto"):
        return text.split(":")[0], None
    cfg = parse_format(text)
    return ("tfx" if isinstance(cfg, TfxConfig) else "fxp"), cfg


def _load_any_model(path: str):
    doc = json.loads(Path(path).read_text())
    if doc.get("quantized"):
        return nn.load_quantized(path)
    return nn.load_model(path)


def _prepare_float_model(model):
    if any(layer.kind == "batchnorm" for layer in model.layers):
        model = nn.fold_batchnorm(model)
    return model


def _dataset_for(args, model) -> nn.Dataset:
    spec = args.dataset or f"synth:{args.seed}"
    return nn.open_dataset(spec, count=args.samples,
                           input_shape=tuple(model.input_shape))


def _selection_rows(qm: nn.QuantizedModel):
    rows = []
    cfg = qm.input_cfg
    for layer in qm.layers:
        out_cfg = layer.out_cfg or cfg
        is_w = sc_w = w_desc = None
        if layer.weight_cfg is not None:
            w_desc = layer.weight_cfg.descriptor
            if isinstance(layer.weight_cfg, TfxConfig):
                is_w, sc_w = layer.weight_cfg.is_max, layer.weight_cfg.sc
        is_a = out_cfg.is_max if isinstance(out_cfg, TfxConfig) else None
        rows.append((layer.name, layer.kind, is_w, is_a, sc_w, w_desc,
                     layer.out_cfg.descriptor if layer.out_cfg else None))
        cfg = out_cfg
    return rows


# ── Commands ─────────────────────────────────────────────────────


def cmd_quantize(args) -> int:
    model = _prepare_float_model(nn.load_model(args.model))
    kind, explicit = _parse_format_arg(args.format)
    bits_list = _parse_bits(args.bits)
    if len(bits_list) != 1:
        raise ValueError("quantize takes a single --bits value; use sweep for ranges")
    dataset = _dataset_for(args, model)
    stats = calibrate(model, dataset.images[: args.calib_size])
    qm = nn.quantize_model(model, bits_list[0], kind, stats, explicit=explicit)
    out = Path(args.out)
    manifest = nn.save_quantized(qm, out)
    write_csv(out / "selection.csv",
              ("layer", "kind", "is_w", "is_a", "sc_w", "weight_format",
               "output_format"),
              _selection_rows(qm))
    print(manifest)
    return 0


def cmd_evaluate(args) -> int:
    model = _load_any_model(args.model)
    if isinstance(model, nn.QuantizedModel):
        row_fmt = (model.format_kind, model.bits, model.policy)
    else:
        model = _prepare_float_model(model)
        row_fmt = ("float32", 32, "none")
    dataset = _dataset_for(args, model)
    report = nn.evaluate(model, dataset)
    rows = [row_fmt + (report.top1_accuracy, report.mean_mse, report.sample_count)]
    out = Path(args.out)
    path = write_csv(out / "evaluate.csv", EVAL_HEADER, rows)
    print(path)
    return 0


def cmd_sweep(args) -> int:
    model = _prepare_float_model(nn.load_model(args.model))
    dataset = _dataset_for(args, model)
    stats = calibrate(model, dataset.images[: args.calib_size])
    rows = []
    points = []
    for kind in ("tfx", "fxp"):
        for bits in _parse_bits(args.bits):
            qm = nn.quantize_model(model, bits, kind, stats)
            report = nn.evaluate(qm, dataset)
            rows.append((kind, bits, qm.policy, report.top1_accuracy,
                         report.mean_mse, report.sample_count))
            points.append(sim.SweepPoint(kind, bits, qm.policy, 0, 0.0, 0, 0.0,
                                         0.0, report.top1_accuracy,
                                         report.mean_mse))
    out = Path(args.out)
    path = write_csv(out / "sweep.csv", EVAL_HEADER, rows)
    if args.figures:
        render_sweep_figures(points, out)
    print(path)
    return 0


def cmd_simulate(args) -> int:
    model = _prepare_float_model(nn.load_model(args.model))
    dataset = _dataset_for(args, model)
    array = _parse_array(args.array)
    mem = sim.MemoryConfig() if args.mem is None else sim.MemoryConfig(
        **json.loads(Path(args.mem).read_text())
    )
    if args.costs is None:
        print("WARN: no --costs table given; using illustrative defaults",
              file=sys.stderr)
        costs = sim.CostTable()
    else:
        costs = sim.CostTable.from_json(args.costs)
    points = sim.edp_sweep(model, dataset, _parse_bits(args.bits),
                           calib_size=args.calib_size, array=array, mem=mem,
                           costs=costs, clock_hz=args.clock)
    out = Path(args.out)
    rows = [(p.format_kind, p.bits, p.policy, p.cycles, p.utilization,
             p.dram_bytes, p.energy_j, p.edp, p.top1, p.mean_mse)
            for p in points]
    path = write_csv(out / "simulate.csv", SIM_HEADER, rows)
    write_csv(out / "edp_vs_error.csv", ("format", "n", "error", "edp"),
              [(p.format_kind, p.bits, 1.0 - p.top1, p.edp) for p in points])
    if args.figures:
        render_edp_figure(points, out)
        render_sweep_figures(points, out)
    print(path)
    return 0


def cmd_format_inspect(args) -> int:
    cfg = parse_format(args.descriptor)
    for line in format_dump_lines(cfg):
        print(line)
    if args.out:
        out = Path(args.out)
        name = cfg.descriptor.replace(":", "_").replace("/", "_")
        write_csv(out / f"values_{name}.csv",
                  ("code_bin", "code_unsigned", "value"),
                  [(f"{code:0{cfg.n}b}", code, float(v))
                   for code, v in enumerate_values(cfg)])
        if args.figures:
            render_format_figure(cfg, out)
    return 0


def cmd_fixture(args) -> int:
    builder = (nn.build_batchnorm_convnet if args.kind == "batchnorm"
               else nn.build_tiny_convnet)
    model = builder(seed=args.seed)
    path = nn.save_model(model, args.out)
    print(path)
    return 0


# ── Parser ───────────────────────────────────────────────────────


def _add_common(p: argparse.ArgumentParser, dataset=True) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", default="out", help="output directory")
    if dataset:
        p.add_argument("--dataset", default=None,
                       help="idx:<dir> | cifar10:<dir> | synth:<seed> "
                            "(default synth:<seed>)")
        p.add_argument("--samples", type=int, default=1024,
                       help="sample budget for the dataset")
        p.add_argument("--calib-size", type=int, default=256, dest="calib_size",
                       help="calibration batch size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tfxquant",
        description="Tapered fixed-point quantization, inference, and cost model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="quantize a float model")
    p.add_argument("--model", required=True)
    p.add_argument("--bits", default="8")
    p.add_argument("--format", default="tfx:auto",
                   help="tfx:auto | fxp:auto | explicit descriptor")
    _add_common(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("evaluate", help="evaluate a float or quantized model")
    p.add_argument("--model", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="accuracy/MSE sweep over formats and widths")
    p.add_argument("--model", required=True)
    p.add_argument("--bits", default="5..8")
    p.add_argument("--no-figures", dest="figures", action="store_false")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="cost-model sweep with accuracy")
    p.add_argument("--model", required=True)
    p.add_argument("--bits", default="5..8")
    p.add_argument("--array", default="16x16", help="PE grid, RxC")
    p.add_argument("--mem", default=None, help="memory config JSON")
    p.add_argument("--costs", default=None, help="cost table JSON")
    p.add_argument("--clock", type=float, default=sim.DEFAULT_CLOCK_HZ)
    p.add_argument("--no-figures", dest="figures", action="store_false")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("format-inspect", help="dump a format's value set")
    p.add_argument("descriptor")
    p.add_argument("--out", default=None)
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_format_inspect)

    p = sub.add_parser("fixture", help="write a bundled model to disk")
    p.add_argument("--kind", choices=("tiny", "batchnorm"), default="tiny")
    _add_common(p, dataset=False)
    p.set_defaults(func=cmd_fixture)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TfxQuantError, FormatParseError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
