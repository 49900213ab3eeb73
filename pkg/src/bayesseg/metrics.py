"""Evaluation metrics: per-volume Dice, average symmetric surface distance,
manual annotation cost, and tabular/heatmap report emission."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy import ndimage

from .core import LabelMap, _atomic_write_bytes, _atomic_write_text


class SurfaceUndefinedError(Exception):
    """Raised when ASD is requested for a class absent from either map."""


def _class_mask(label_map, class_id: int) -> np.ndarray:
    lab = label_map.labels if isinstance(label_map, LabelMap) else np.asarray(label_map)
    return lab == class_id


def dice(pred, truth, class_id: int) -> float:
    """Dice coefficient 2|A∩B| / (|A|+|B|) over the full (3-D) map.

    When the class is absent from both maps, returns 1.0 (perfect
    agreement on absence).
    """
    a = _class_mask(pred, class_id)
    b = _class_mask(truth, class_id)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def _boundary(mask: np.ndarray) -> np.ndarray:
    # A class voxel with >= 1 six-neighbor (4 in 2-D) outside the class;
    # out-of-array counts as outside.
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def asd(pred, truth, class_id: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance in mm between class boundaries.

    spacing is (dx, dy, dz) in mm for (x, y, z); maps are indexed (z, y, x).
    """
    a = _class_mask(pred, class_id)
    b = _class_mask(truth, class_id)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise SurfaceUndefinedError(f"class {class_id} absent from one of the maps")
    ba = _boundary(a)
    bb = _boundary(b)
    if a.ndim == 3:
        sampling = (spacing[2], spacing[1], spacing[0])
    else:
        sampling = (spacing[1], spacing[0])
    # Exact Euclidean distance to the nearest boundary voxel of the other set.
    dist_to_b = ndimage.distance_transform_edt(~bb, sampling=sampling)
    dist_to_a = ndimage.distance_transform_edt(~ba, sampling=sampling)
    d_ab = dist_to_b[ba]
    d_ba = dist_to_a[bb]
    return float(np.concatenate([d_ab, d_ba]).mean())


def mac(query_mask: np.ndarray, slice_shape=None) -> float:
    """Manual annotation cost: queried pixel count / total pixel count."""
    query_mask = np.asarray(query_mask)
    total = int(np.prod(slice_shape)) if slice_shape is not None else query_mask.size
    if total == 0:
        raise ValueError("zero-size denominator")
    return float(np.count_nonzero(query_mask)) / total


@dataclass
class EvalReport:
    """Per-(case, class) Dice/ASD cells with row and column means."""

    case_ids: list[str]
    class_ids: list[int]
    dice_cells: dict = field(default_factory=dict)   # (case_id, class_id) -> float
    asd_cells: dict = field(default_factory=dict)    # (case_id, class_id) -> float | None

    def row_means(self, cells) -> dict:
        out = {}
        for cid in self.case_ids:
            vals = [cells[(cid, c)] for c in self.class_ids
                    if cells.get((cid, c)) is not None]
            out[cid] = float(np.mean(vals)) if vals else None
        return out

    def col_means(self, cells) -> dict:
        out = {}
        for c in self.class_ids:
            vals = [cells[(cid, c)] for cid in self.case_ids
                    if cells.get((cid, c)) is not None]
            out[c] = float(np.mean(vals)) if vals else None
        return out


def emit_report(report: EvalReport, out_path: str, heatmap: bool = False) -> None:
    """Write the metric table as delimited text + YAML; optional PNG heatmap.

    ``out_path`` is a basename; ``.csv`` and ``.yaml`` (and ``.png``) are
    appended. Row/column means are included.
    """
    if not report.case_ids or not report.class_ids:
        raise ValueError("empty report")
    for metric_name, cells in (("dice", report.dice_cells), ("asd", report.asd_cells)):
        if not cells:
            continue
        rmeans = report.row_means(cells)
        cmeans = report.col_means(cells)
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["case_id"] + [f"class_{c}" for c in report.class_ids] + ["mean"])
        for cid in report.case_ids:
            row = [cells.get((cid, c)) for c in report.class_ids]
            w.writerow([cid] + _fmt(row) + _fmt([rmeans[cid]]))
        w.writerow(["mean"] + _fmt([cmeans[c] for c in report.class_ids]) + [""])
        _atomic_write_text(f"{out_path}_{metric_name}.csv", buf.getvalue())

        doc = {
            "metric": metric_name,
            "cells": [
                {"case_id": cid, "class_id": int(c), "value": cells.get((cid, c))}
                for cid in report.case_ids
                for c in report.class_ids
            ],
            "row_means": {cid: rmeans[cid] for cid in report.case_ids},
            "col_means": {int(c): cmeans[c] for c in report.class_ids},
        }
        _atomic_write_text(
            f"{out_path}_{metric_name}.yaml", yaml.safe_dump(doc, sort_keys=False)
        )
        if heatmap:
            _emit_heatmap(report, cells, f"{out_path}_{metric_name}.png", metric_name)


def _fmt(values):
    return ["" if v is None else f"{v:.6f}" for v in values]


def _emit_heatmap(report, cells, path, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = np.full((len(report.case_ids), len(report.class_ids)), np.nan)
    for i, cid in enumerate(report.case_ids):
        for j, c in enumerate(report.class_ids):
            v = cells.get((cid, c))
            if v is not None:
                grid[i, j] = v
    fig, ax = plt.subplots(figsize=(1 + 0.5 * len(report.class_ids),
                                    1 + 0.4 * len(report.case_ids)))
    im = ax.imshow(grid, cmap="coolwarm" if title == "asd" else "coolwarm_r")
    ax.set_xticks(range(len(report.class_ids)),
                  [f"c{c}" for c in report.class_ids])
    ax.set_yticks(range(len(report.case_ids)), report.case_ids)
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, bbox_inches="tight",
                metadata={"Date": None})  # keep output byte-reproducible
    plt.close(fig)
    _atomic_write_bytes(path, buf.getvalue())


def evaluate_maps(
    pred: LabelMap, truth: LabelMap, spacing=(1.0, 1.0, 1.0)
) -> tuple[dict, dict]:
    """Per-class Dice and ASD for one (pred, truth) pair.

    ASD is None for classes absent from either map.
    """
    dice_by_class, asd_by_class = {}, {}
    for c in range(1, truth.n_classes):
        dice_by_class[c] = dice(pred, truth, c)
        try:
            asd_by_class[c] = asd(pred, truth, c, spacing)
        except SurfaceUndefinedError:
            asd_by_class[c] = None
    return dice_by_class, asd_by_class
