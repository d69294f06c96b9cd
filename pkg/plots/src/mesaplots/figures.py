"""Figure kinds: ab_dynamics, ratio, mse, flow_overlay (CSV) and heatmap (JSON).

Each CSV-based kind declares the columns it needs; a missing column or an
empty series raises RenderError before any file is written, so a failed
render never leaves a blank image behind.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# deterministic output: fixed metadata, no timestamps
_SAVE_KW = {"dpi": 130, "metadata": {"Software": "mesaplots"}}


class RenderError(RuntimeError):
    """Bad or incomplete input for a figure."""


@dataclass(frozen=True)
class FigureSpec:
    kind: str  # ab_dynamics | ratio | mse | heatmap | flow_overlay
    inputs: tuple[str, ...]
    output: str
    reference: float | None = None  # horizontal theory line, where meaningful
    labels: tuple[str, ...] = field(default=())
    title: str = ""


_REQUIRED_COLUMNS = {
    "ab_dynamics": ("epoch", "ab"),
    "ratio": ("epoch", "ratio"),
    "mse": ("epoch", "mse"),
    "flow_overlay": ("tau", "ab"),
}


def read_csv_columns(path: str | Path, columns: tuple[str, ...]) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise RenderError(f"input file not found: {path}")
    with path.open() as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise RenderError(
                f"{path}: missing column(s) {missing}; header has {header}"
            )
        rows = list(reader)
    if not rows:
        raise RenderError(f"{path}: empty series (no data rows)")
    return {c: np.array([float(row[c]) for row in rows]) for c in columns}


def _series_figure(spec: FigureSpec, x_col: str, y_col: str, *, logy=False, x_label=None, y_label=None):
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    labels = spec.labels or tuple(Path(p).parent.name or Path(p).stem for p in spec.inputs)
    if len(labels) != len(spec.inputs):
        raise RenderError(f"{len(spec.inputs)} inputs but {len(labels)} labels")
    for path, label in zip(spec.inputs, labels):
        data = read_csv_columns(path, (x_col, y_col))
        ax.plot(data[x_col], data[y_col], label=label, linewidth=1.6)
    if spec.reference is not None:
        ax.axhline(spec.reference, color="black", linestyle="--", linewidth=1.1,
                   label=f"theory {spec.reference:.4g}")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(x_label or x_col)
    ax.set_ylabel(y_label or y_col)
    if spec.title:
        ax.set_title(spec.title)
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    return fig


def _heatmap_figure(spec: FigureSpec):
    if len(spec.inputs) != 1:
        raise RenderError("heatmap takes exactly one heatmap.json input")
    path = Path(spec.inputs[0])
    if not path.exists():
        raise RenderError(f"input file not found: {path}")
    rec = json.loads(path.read_text())
    for key in ("wkq_full", "wpv_full"):
        if key not in rec:
            raise RenderError(f"{path}: missing field {key!r}")
    wkq = np.array(rec["wkq_full"], dtype=float)
    wpv = np.array(rec["wpv_full"], dtype=float)
    if wkq.size == 0 or wpv.size == 0:
        raise RenderError(f"{path}: empty matrices")
    fig, axes = plt.subplots(1, 2, figsize=(9.2, 4.2))
    for ax, mat, name in ((axes[0], wkq, "key-query"), (axes[1], wpv, "projection-value")):
        bound = max(float(np.max(np.abs(mat))), 1e-12)
        im = ax.imshow(mat, cmap="RdBu_r", vmin=-bound, vmax=bound)
        ax.set_title(name, fontsize=10)
        ax.set_xticks([])
        ax.set_yticks([])
        d = mat.shape[0] // 3
        for k in (d, 2 * d):  # block boundaries of the 3d x 3d layout
            ax.axhline(k - 0.5, color="gray", linewidth=0.6)
            ax.axvline(k - 0.5, color="gray", linewidth=0.6)
        fig.colorbar(im, ax=ax, fraction=0.046)
    if spec.title:
        fig.suptitle(spec.title)
    return fig


def render(spec: FigureSpec) -> Path:
    """Render one figure to spec.output; returns the written path."""
    if not spec.inputs:
        raise RenderError("figure spec has no inputs")
    if spec.kind == "heatmap":
        fig = _heatmap_figure(spec)
    elif spec.kind in ("ab_dynamics",):
        fig = _series_figure(spec, "epoch", "ab", y_label="product of diagonal means")
    elif spec.kind == "ratio":
        fig = _series_figure(spec, "epoch", "ratio", y_label="mean prediction/truth ratio")
    elif spec.kind == "mse":
        fig = _series_figure(spec, "epoch", "mse", logy=True, y_label="test MSE")
    elif spec.kind == "flow_overlay":
        fig = _series_figure(spec, "tau", "ab", x_label="flow time", y_label="a*b")
    else:
        raise RenderError(f"unknown figure kind {spec.kind!r}")
    out = Path(spec.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, **_SAVE_KW)
    plt.close(fig)
    return out
