"""CSV and figure emission for the command-line reports.

CSV files are UTF-8 with LF endings and shortest-roundtrip float formatting,
so identical inputs produce byte-identical files.  Figures are rendered to
PNG next to the delimited output; they are a convenience view of the same
rows, never an extra data source.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .formats import FormatConfig, dynamic_range, enumerate_values, extremes

__all__ = [
    "format_cell",
    "write_csv",
    "render_sweep_figures",
    "render_edp_figure",
    "render_format_figure",
    "format_dump_lines",
]


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines.extend(",".join(format_cell(cell) for cell in row) for row in rows)
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    return path


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def render_sweep_figures(rows, out_dir: str | Path) -> list[Path]:
    """Accuracy-vs-bits and MSE-vs-bits curves, one line per format."""
    out = Path(out_dir)
    kinds = sorted({r.format_kind for r in rows})
    written = []

    fig, ax = plt.subplots(figsize=(5, 3.4))
    for kind in kinds:
        pts = sorted((r.bits, r.top1) for r in rows if r.format_kind == kind)
        ax.plot([b for b, _ in pts], [t * 100 for _, t in pts], "o-", label=kind)
    ax.set_xlabel("bit width")
    ax.set_ylabel("top-1 accuracy [%]")
    ax.legend()
    ax.grid(True, alpha=0.3)
    written.append(_save(fig, out / "accuracy_vs_bits.png"))

    fig, ax = plt.subplots(figsize=(5, 3.4))
    for kind in kinds:
        pts = sorted((r.bits, r.mean_mse) for r in rows if r.format_kind == kind)
        ax.semilogy([b for b, _ in pts], [max(m, 1e-18) for _, m in pts], "o-",
                    label=kind)
    ax.set_xlabel("bit width")
    ax.set_ylabel("mean weight-quantization MSE")
    ax.legend()
    ax.grid(True, alpha=0.3, which="both")
    written.append(_save(fig, out / "mse_vs_bits.png"))
    return written


def render_edp_figure(rows, out_dir: str | Path) -> Path:
    """Energy-delay product against classification error, per format."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for kind in sorted({r.format_kind for r in rows}):
        pts = [(1.0 - r.top1, r.edp, r.bits) for r in rows if r.format_kind == kind]
        ax.plot([e for e, _, _ in pts], [d for _, d, _ in pts], "o-", label=kind)
        for err, edp, bits in pts:
            ax.annotate(str(bits), (err, edp), fontsize=7,
                        textcoords="offset points", xytext=(3, 3))
    ax.set_xlabel("top-1 error")
    ax.set_ylabel("energy-delay product [J s]")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3, which="both")
    return _save(fig, Path(out_dir) / "edp_vs_error.png")


def render_format_figure(cfg: FormatConfig, out_dir: str | Path) -> Path:
    """Tent-style view of a format: local resolution across the value set."""
    values = np.array([float(v) for _, v in enumerate_values(cfg)])
    mids = (values[:-1] + values[1:]) / 2
    density = 1.0 / np.diff(values)
    fig, (ax0, ax1) = plt.subplots(
        2, 1, figsize=(5.5, 4), sharex=True, height_ratios=[3, 1]
    )
    ax0.semilogy(mids, density, "-", lw=1.2)
    ax0.set_ylabel("1 / spacing")
    ax0.set_title(cfg.descriptor)
    ax0.grid(True, alpha=0.3, which="both")
    ax1.eventplot(values, lineoffsets=0, linelengths=0.8, lw=0.4)
    ax1.set_yticks([])
    ax1.set_xlabel("representable values")
    name = cfg.descriptor.replace(":", "_").replace("/", "_")
    return _save(fig, Path(out_dir) / f"values_{name}.png")


def format_dump_lines(cfg: FormatConfig) -> list[str]:
    """Human-readable (code, value) listing plus the range summary."""
    lines = [f"# {cfg.descriptor}", "code_bin,code_unsigned,value"]
    for code, value in enumerate_values(cfg):
        lines.append(f"{code:0{cfg.n}b},{code},{format_cell(float(value))}")
    ext = extremes(cfg)
    big, small = dynamic_range(cfg)
    lines.append(f"# max_pos={float(ext.max_pos)!r} min_neg={float(ext.min_neg)!r} "
                 f"min_pos={float(ext.min_pos)!r}")
    lines.append(f"# dynamic_range={float(big)!r}/{float(small)!r}"
                 f" (ratio {float(big / small)!r})")
    return lines
