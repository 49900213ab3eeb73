"""Pre-processing, training-time augmentation, and post-processing.

Intensity windowing maps [-150, 350] HU onto [0, 255] with half-up
rounding; z-resampling uses linear interpolation for images and
nearest-neighbor for label maps; post-processing keeps the largest
connected component of each non-background class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import LabelMap, Volume3D

HU_WINDOW = (-150.0, 350.0)


@dataclass(frozen=True)
class AugmentParams:
    """Uniform sampling ranges for the random training augmentation."""

    translate_frac: float = 0.25
    rotate_deg: float = 10.0
    scale_frac: float = 0.35
    shear_rad: float = np.pi / 8
    hflip: bool = True


def normalize_intensity(volume: Volume3D) -> Volume3D:
    """Map the [-150, 350] HU window affinely onto [0, 255] (uint8).

    Values below/above the window clamp to 0/255; rounding is half-up.
    """
    if volume.voxels.dtype != np.int16:
        raise ValueError(f"expected int16 HU input, got {volume.voxels.dtype}")
    lo, hi = HU_WINDOW
    v = volume.voxels.astype(np.float64)
    scaled = (v - lo) * (255.0 / (hi - lo))
    out = np.floor(scaled + 0.5)  # half-up
    out = np.clip(out, 0, 255).astype(np.uint8)
    return Volume3D(voxels=out, spacing=volume.spacing, origin=volume.origin)


def _resample_positions(nz: int, dz_in: float, dz_out: float) -> np.ndarray:
    extent = (nz - 1) * dz_in
    n_out = int(np.floor(extent / dz_out + 1e-9)) + 1
    return np.arange(n_out) * dz_out


def resample_z(volume, target_dz_mm: float):
    """Resample along z to the target slice interval.

    In-plane grids are untouched; output z-positions start at the input
    origin and stay within the input extent. Volume3D inputs are linearly
    interpolated; LabelMap inputs use nearest-neighbor and are returned
    as LabelMap.
    """
    if target_dz_mm <= 0:
        raise ValueError("target_dz_mm must be positive")
    if isinstance(volume, LabelMap):
        raise TypeError(
            "pass label maps through resample_z_labels with explicit spacing"
        )
    nz = volume.n_slices
    dz_in = float(volume.spacing[2])
    if nz < 2 and abs(target_dz_mm - dz_in) > 1e-12:
        raise ValueError("cannot resample a single-slice volume to a new interval")
    pos = _resample_positions(nz, dz_in, target_dz_mm)
    src = pos / dz_in
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, nz - 1)
    w = (src - i0)[:, None, None]
    v = volume.voxels.astype(np.float64)
    out = (1.0 - w) * v[i0] + w * v[i1]
    if np.issubdtype(volume.voxels.dtype, np.integer):
        out = np.rint(out)
    out = out.astype(volume.voxels.dtype)
    return Volume3D(
        voxels=out,
        spacing=(volume.spacing[0], volume.spacing[1], float(target_dz_mm)),
        origin=volume.origin,
    )


def resample_z_labels(
    label_map: LabelMap, dz_in: float, target_dz_mm: float
) -> LabelMap:
    """Nearest-neighbor z-resampling of a 3-D label map."""
    if target_dz_mm <= 0:
        raise ValueError("target_dz_mm must be positive")
    lab = label_map.labels
    if lab.ndim != 3:
        raise ValueError("label resampling requires a 3-D label map")
    nz = lab.shape[0]
    if nz < 2 and abs(target_dz_mm - dz_in) > 1e-12:
        raise ValueError("cannot resample a single-slice label map to a new interval")
    pos = _resample_positions(nz, dz_in, target_dz_mm)
    idx = np.floor(pos / dz_in + 0.5).astype(int)
    idx = np.clip(idx, 0, nz - 1)
    return LabelMap(
        labels=lab[idx],
        n_classes=label_map.n_classes,
        class_names=label_map.class_names,
    )


def apply_skin_mask(volume: Volume3D, body_mask: LabelMap) -> Volume3D:
    """Zero all voxels outside the binary body mask."""
    mask = body_mask.labels
    if mask.shape != volume.voxels.shape:
        raise ValueError(
            f"mask shape {mask.shape} != volume shape {volume.voxels.shape}"
        )
    out = np.where(mask > 0, volume.voxels, 0).astype(volume.voxels.dtype)
    return Volume3D(voxels=out, spacing=volume.spacing, origin=volume.origin)


def _sample_affine(shape, params: AugmentParams, rng: np.random.Generator):
    ny, nx = shape
    tx = rng.uniform(-params.translate_frac, params.translate_frac) * nx
    ty = rng.uniform(-params.translate_frac, params.translate_frac) * ny
    theta = np.deg2rad(rng.uniform(-params.rotate_deg, params.rotate_deg))
    s = 1.0 + rng.uniform(-params.scale_frac, params.scale_frac)
    phi = rng.uniform(-params.shear_rad, params.shear_rad)
    flip = bool(rng.integers(0, 2)) if params.hflip else False

    # Forward map in (x, y): scale -> shear -> rotate about center,
    # then translate, then optional left-right flip.
    scale = np.array([[s, 0.0], [0.0, s]])
    shear = np.array([[1.0, np.tan(phi)], [0.0, 1.0]])
    rot = np.array(
        [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    )
    lin = rot @ shear @ scale
    c = np.array([(nx - 1) / 2.0, (ny - 1) / 2.0])
    t = np.array([tx, ty])

    fwd = np.eye(3)
    fwd[:2, :2] = lin
    fwd[:2, 2] = c + t - lin @ c
    if flip:
        f = np.array([[-1.0, 0.0, nx - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        fwd = f @ fwd
    return np.linalg.inv(fwd)


def _warp(pixels: np.ndarray, inv_xy: np.ndarray, order: int, cval=0):
    # scipy affine_transform maps output index o (y, x) to input M @ o + off.
    m_xy = inv_xy[:2, :2]
    off_xy = inv_xy[:2, 2]
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    m_yx = swap @ m_xy @ swap
    off_yx = off_xy[::-1]
    return ndimage.affine_transform(
        pixels, m_yx, offset=off_yx, order=order, mode="constant", cval=cval,
        output=pixels.dtype, prefilter=False,
    )


def augment(
    image: np.ndarray,
    label: np.ndarray,
    params: AugmentParams,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random affine + optional horizontal flip to an image/label pair.

    The same geometric transform is applied to both; the image is linearly
    interpolated while the label uses nearest-neighbor. Out-of-field areas
    fill with 0 / background.
    """
    image = np.asarray(image)
    label = np.asarray(label)
    if image.shape != label.shape:
        raise ValueError("image and label must share a 2-D shape")
    inv = _sample_affine(image.shape, params, rng)
    return _warp(image, inv, order=1), _warp(label, inv, order=0)


def largest_component_filter(label_map: LabelMap) -> LabelMap:
    """Keep only the largest connected component of each non-background class.

    Connectivity is 8-neighborhood in 2-D and 26-neighborhood in 3-D; ties
    keep the component with the smallest id under scan order. Removed
    pixels become background.
    """
    lab = label_map.labels
    structure = np.ones((3,) * lab.ndim, dtype=bool)
    out = np.zeros_like(lab)
    for c in range(1, label_map.n_classes):
        mask = lab == c
        if not mask.any():
            continue
        comp, n = ndimage.label(mask, structure=structure)
        if n == 1:
            out[mask] = c
            continue
        sizes = np.bincount(comp.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1  # argmax keeps the first (smallest id)
        out[comp == keep] = c
    return LabelMap(
        labels=out, n_classes=label_map.n_classes, class_names=label_map.class_names
    )
