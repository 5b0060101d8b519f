"""Learning-curve figures from trainer CSV files.

The input contract is the trainer's curve CSV: a header line
`epoch,evals,seconds,dev_ll_per_stream,train_obj` followed by one row per
evaluation point. Only the documented columns are read; unknown extra
columns are ignored so newer producers stay compatible. Each CSV becomes
one line in the figure; CSVs that share a label are treated as independent
seeds of the same configuration and additionally get a shaded min-max band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")  # file output only; keep rendering deterministic
import matplotlib.pyplot as plt
import numpy as np

__all__ = ["Curve", "read_curve_csv", "band_envelope", "plot_curves", "X_AXES"]

X_AXES = ("evals", "seconds")

REQUIRED_COLUMNS = ("epoch", "evals", "seconds", "dev_ll_per_stream", "train_obj")


@dataclass(frozen=True)
class Curve:
    """One learning curve: label, source path, and the documented columns."""

    label: str
    path: str
    epoch: np.ndarray
    evals: np.ndarray
    seconds: np.ndarray
    dev_ll_per_stream: np.ndarray

    def x(self, x_axis: str) -> np.ndarray:
        if x_axis not in X_AXES:
            raise ValueError(f"x_axis must be one of {X_AXES}, got {x_axis!r}")
        return self.evals if x_axis == "evals" else self.seconds


def _parse_cell(path: str, line_no: int, name: str, text: str, kind):
    try:
        return kind(text)
    except ValueError:
        raise ValueError(
            f"{path}:{line_no}: column {name!r} has non-numeric value {text!r}"
        ) from None


def read_curve_csv(path: str, label: Optional[str] = None) -> Curve:
    """Parse one curve CSV; errors name the file and 1-based line number."""
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise ValueError(f"{path}:1: empty file, expected a curve header")
        header = [cell.strip() for cell in header_line.strip().split(",")]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"{path}:1: header is missing columns {missing}")
        idx = {c: header.index(c) for c in REQUIRED_COLUMNS}
        rows = {c: [] for c in REQUIRED_COLUMNS}
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != len(header):
                raise ValueError(
                    f"{path}:{line_no}: expected {len(header)} columns, got {len(cells)}"
                )
            rows["epoch"].append(_parse_cell(path, line_no, "epoch", cells[idx["epoch"]], int))
            rows["evals"].append(_parse_cell(path, line_no, "evals", cells[idx["evals"]], int))
            for name in ("seconds", "dev_ll_per_stream", "train_obj"):
                value = _parse_cell(path, line_no, name, cells[idx[name]], float)
                if name != "train_obj":
                    rows[name].append(value)
    if not rows["epoch"]:
        raise ValueError(f"{path}:2: no curve points")
    return Curve(
        label if label is not None else path,
        path,
        np.asarray(rows["epoch"], dtype=np.int64),
        np.asarray(rows["evals"], dtype=np.int64),
        np.asarray(rows["seconds"], dtype=np.float64),
        np.asarray(rows["dev_ll_per_stream"], dtype=np.float64),
    )


def band_envelope(curves: Sequence[Curve], x_axis: str):
    """Pointwise min-max envelope of several curves of one label.

    The grid is the union of the members' x values restricted to the range
    every member covers; members are linearly interpolated onto it. Returns
    (grid, lower, upper).
    """
    if not curves:
        raise ValueError("band_envelope needs at least one curve")
    xs = [np.asarray(c.x(x_axis), dtype=np.float64) for c in curves]
    lo_x = max(float(x.min()) for x in xs)
    hi_x = min(float(x.max()) for x in xs)
    grid = np.unique(np.concatenate(xs))
    grid = grid[(grid >= lo_x) & (grid <= hi_x)]
    if grid.size == 0:
        grid = np.array([lo_x])
    ys = np.stack([np.interp(grid, x, c.dev_ll_per_stream) for x, c in zip(xs, curves)])
    return grid, ys.min(axis=0), ys.max(axis=0)


_X_LABELS = {"evals": "intensity evaluations", "seconds": "training wall-clock seconds"}


def plot_curves(
    curves: Sequence[Curve],
    x_axis: str,
    out_path: str,
    ref_ll: Optional[float] = None,
    title: Optional[str] = None,
) -> str:
    """Render curves to one figure file and return the output path.

    One line per curve; labels appearing on several curves get one legend
    entry and a shaded min-max band. Optional horizontal reference line at
    ref_ll. Fixed figure size and DPI keep the output deterministic.
    """
    if x_axis not in X_AXES:
        raise ValueError(f"x_axis must be one of {X_AXES}, got {x_axis!r}")
    if not curves:
        raise ValueError("plot_curves needs at least one curve")

    labels: list[str] = []
    for c in curves:
        if c.label not in labels:
            labels.append(c.label)
    cmap = plt.get_cmap("tab10")
    colors = {label: cmap(i % 10) for i, label in enumerate(labels)}

    fig, ax = plt.subplots(figsize=(7.0, 4.5), dpi=150)
    for label in labels:
        group = [c for c in curves if c.label == label]
        color = colors[label]
        for i, c in enumerate(group):
            ax.plot(
                c.x(x_axis),
                c.dev_ll_per_stream,
                color=color,
                linewidth=1.6,
                label=label if i == 0 else None,
            )
        if len(group) > 1:
            grid, lower, upper = band_envelope(group, x_axis)
            ax.fill_between(grid, lower, upper, color=color, alpha=0.2, linewidth=0)
    if ref_ll is not None:
        if not math.isfinite(ref_ll):
            raise ValueError(f"ref_ll must be finite, got {ref_ll}")
        ax.axhline(ref_ll, color="red", linewidth=1.2, linestyle="--", label="reference")
    ax.set_xlabel(_X_LABELS[x_axis])
    ax.set_ylabel("dev log-likelihood per stream")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize=9)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
