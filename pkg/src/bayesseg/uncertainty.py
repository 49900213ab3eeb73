"""Structure-wise uncertainty metrics.

PSV is the mean class-summed predictive variance over the pixels
classified as a structure; PDC estimates a structure's Dice from its PSV
through an ordinary least-squares line fitted on pooled cross-validation
observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .core import _atomic_write_text


class StructureAbsentError(Exception):
    """Raised when PSV is requested for an empty structure mask."""


def check_prob_map(mean_prob: np.ndarray, atol: float = 1e-5) -> np.ndarray:
    """Validate a C x ... probability map (non-negative, sums to 1)."""
    p = np.asarray(mean_prob, dtype=np.float64)
    if p.ndim < 2:
        raise ValueError("probability map must have a leading class axis")
    if p.min() < -atol:
        raise ValueError("probabilities must be non-negative")
    sums = p.sum(axis=0)
    if np.abs(sums - 1.0).max() > atol:
        raise ValueError("per-pixel class probabilities must sum to 1")
    return p


def summed_variance(variance: np.ndarray) -> np.ndarray:
    """Class-summed scalar variance field from a C x ... variance map."""
    v = np.asarray(variance, dtype=np.float64)
    if v.min() < -1e-12:
        raise ValueError("variance must be non-negative")
    return v.sum(axis=0)


def structure_mask(mean_prob: np.ndarray, class_id: int) -> np.ndarray:
    """Boolean mask of pixels whose argmax class equals ``class_id``.

    Ties resolve to the lowest class index, matching prediction.
    """
    p = np.asarray(mean_prob)
    if class_id >= p.shape[0]:
        raise ValueError(f"class_id {class_id} >= n_classes {p.shape[0]}")
    return p.argmax(axis=0) == class_id


def psv(variance: np.ndarray, mask: np.ndarray) -> float:
    """Predictive structure-wise variance: mean class-summed variance over
    the pixels in the structure mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise StructureAbsentError("empty structure mask")
    sv = summed_variance(variance) if np.asarray(variance).ndim > mask.ndim \
        else np.asarray(variance, dtype=np.float64)
    if sv.shape != mask.shape:
        raise ValueError(f"shape mismatch: {sv.shape} vs {mask.shape}")
    return float(sv[mask].mean())


@dataclass
class PdcModel:
    """Linear map from PSV to predicted Dice: dice ~ alpha * psv + beta."""

    alpha: float
    beta: float
    k_folds: int = 1
    residual_std: float = 0.0
    residual_mean_abs: float = 0.0
    n_observations: int = 0


def fit_pdc(observations, k_folds: int = 1) -> PdcModel:
    """Ordinary least-squares fit of Dice against PSV over pooled
    cross-validation observations (pairs of (psv, dice))."""
    obs = [(float(p), float(d)) for p, d in observations]
    if len(obs) < 2:
        raise ValueError("need at least 2 observations")
    x = np.array([p for p, _ in obs])
    y = np.array([d for _, d in obs])
    if np.ptp(x) == 0:
        raise ValueError("degenerate design: all PSV values are equal")
    alpha, beta = np.polyfit(x, y, 1)
    resid = y - (alpha * x + beta)
    return PdcModel(
        alpha=float(alpha),
        beta=float(beta),
        k_folds=int(k_folds),
        residual_std=float(resid.std()),
        residual_mean_abs=float(np.abs(resid).mean()),
        n_observations=len(obs),
    )


def predict_dice(model: PdcModel, psv_value: float) -> float:
    """Predicted Dice, clamped to [0, 1]."""
    return float(np.clip(model.alpha * psv_value + model.beta, 0.0, 1.0))


def structure_report(
    mean_prob: np.ndarray,
    variance: np.ndarray,
    n_classes: int,
    pdc_model: PdcModel | None = None,
    dice_by_class: dict | None = None,
) -> list[dict]:
    """Per-structure records {class, size, psv, pdc, dice} for one case.

    Absent structures yield records with null psv/pdc ("no observation").
    """
    records = []
    for c in range(1, n_classes):
        mask = structure_mask(mean_prob, c)
        rec = {"class_id": int(c), "size": int(mask.sum()),
               "psv": None, "pdc": None, "dice": None}
        if mask.any():
            value = psv(variance, mask)
            rec["psv"] = float(value)
            if pdc_model is not None:
                rec["pdc"] = predict_dice(pdc_model, value)
        if dice_by_class and c in dice_by_class:
            rec["dice"] = dice_by_class[c]
        records.append(rec)
    return records


def write_structure_report(records_by_case: dict, path: str) -> None:
    """Emit the per-case, per-structure uncertainty report as YAML."""
    doc = {"cases": [{"case_id": cid, "structures": recs}
                     for cid, recs in records_by_case.items()]}
    _atomic_write_text(path, yaml.safe_dump(doc, sort_keys=False))
