"""Deterministic multi-class phantom generator.

Produces CT-like volumes containing a body ellipse, a central bone column,
and several smooth muscle-like blobs with heavily overlapping intensity
ranges, so that segmentation must rely on shape and context rather than
intensity alone. Class layout: 0 = background, 1 = body soft tissue,
2 = bone, 3..C-1 = muscle-like structures.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .core import CaseRecord, DatasetManifest, LabelMap, Volume3D, write_volume

AIR_HU = -1000
BODY_HU = -30
BONE_HU = 400
DISTRACTOR_HU = 800
MUSCLE_BASE_HU = 40
MUSCLE_STEP_HU = 7  # adjacent means closer than 2x the within-class std
BIAS_AMPLITUDE_HU = 15.0


class PhantomGenerationError(Exception):
    """Raised when structures cannot be packed to the minimum volume."""


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    size: tuple[int, int, int] = (128, 128, 32)  # (x, y, z)
    n_structures: int = 6
    noise_sigma: float = 5.0
    distractor: bool = False

    def __post_init__(self):
        if any(s < 32 for s in self.size):
            raise ValueError(f"size components must be >= 32, got {self.size}")
        if self.n_structures + 3 > 255:
            raise ValueError("too many structures for uint8 labels")
        if self.n_structures < 1:
            raise ValueError("n_structures must be >= 1")

    @property
    def n_classes(self) -> int:
        return self.n_structures + 3

    @property
    def class_names(self) -> tuple[str, ...]:
        return ("background", "body", "bone") + tuple(
            f"muscle_{i}" for i in range(self.n_structures)
        )


def _coordinate_grid(size):
    nx, ny, nz = size
    z, y, x = np.meshgrid(
        np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij"
    )
    return x.astype(np.float64), y.astype(np.float64), z.astype(np.float64)


def _phantom_attempt(config: PhantomConfig, rng: np.random.Generator):
    nx, ny, nz = config.size
    x, y, z = _coordinate_grid(config.size)
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0

    # Body ellipse, mildly tapered along z, with a small per-case jitter so
    # cases are not identical but the layout stays learnable.
    jx, jy = rng.uniform(-2.0, 2.0, size=2)
    taper = 1.0 - 0.1 * np.abs(2.0 * z / max(nz - 1, 1) - 1.0)
    ax_body = 0.42 * nx * taper
    ay_body = 0.40 * ny * taper
    body = ((x - cx - jx) / ax_body) ** 2 + ((y - cy - jy) / ay_body) ** 2 <= 1.0

    # Central bone column.
    rb = 0.07 * min(nx, ny) * rng.uniform(0.9, 1.1)
    bone = ((x - cx - jx) ** 2 + (y - cy - jy) ** 2) <= rb**2
    bone &= body

    # Muscle blobs at fixed angular stations around the bone; a subset is
    # elongated to span most of the z extent, the rest are shorter blobs.
    n = config.n_structures
    ring_r = 0.24 * min(nx, ny)
    fields = np.full((n, nz, ny, nx), -np.inf, dtype=np.float64)
    for k in range(n):
        ang = 2.0 * np.pi * k / n + rng.uniform(-0.1, 0.1)
        mx = cx + jx + ring_r * np.cos(ang) + rng.uniform(-1.5, 1.5)
        my = cy + jy + ring_r * np.sin(ang) + rng.uniform(-1.5, 1.5)
        sax = 0.16 * nx * rng.uniform(0.85, 1.15)
        say = 0.16 * ny * rng.uniform(0.85, 1.15)
        if k % 2 == 0:
            mz, saz = (nz - 1) / 2.0, 0.55 * nz
        else:
            mz = (nz - 1) * rng.uniform(0.35, 0.65)
            saz = 0.30 * nz * rng.uniform(0.9, 1.1)
        # Smooth boundary deformation in angle and z.
        ph1, ph2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
        theta = np.arctan2(y - my, x - mx)
        wobble = 1.0 + 0.12 * np.sin(2.0 * theta + ph1) + 0.08 * np.sin(
            2.0 * np.pi * z / max(nz - 1, 1) + ph2
        )
        fields[k] = 1.0 - (
            ((x - mx) / (sax * wobble)) ** 2
            + ((y - my) / (say * wobble)) ** 2
            + ((z - mz) / saz) ** 2
        )

    labels = np.zeros((nz, ny, nx), dtype=np.uint8)
    labels[body] = 1
    inside_any = fields.max(axis=0) > 0.0
    winner = fields.argmax(axis=0).astype(np.uint8)
    muscle_region = inside_any & body & ~bone
    labels[muscle_region] = winner[muscle_region] + 3
    labels[bone] = 2

    distractor_mask = np.zeros_like(body)
    if config.distractor:
        dx0, dy0 = 0.06 * nx, 0.06 * ny
        rd = 0.035 * min(nx, ny)
        distractor_mask = ((x - dx0) ** 2 + (y - dy0) ** 2) <= rd**2
        distractor_mask &= ~body

    # Intensity model: per-class mean + smooth shared bias field + noise.
    # Muscle means are closely spaced so contrast stays low at boundaries.
    class_mean = np.zeros(config.n_classes)
    class_mean[0] = AIR_HU
    class_mean[1] = BODY_HU
    class_mean[2] = BONE_HU
    for k in range(n):
        class_mean[3 + k] = MUSCLE_BASE_HU + MUSCLE_STEP_HU * k
    intensity = class_mean[labels]
    pb1, pb2, pb3 = rng.uniform(0.0, 2.0 * np.pi, size=3)
    bias = BIAS_AMPLITUDE_HU * (
        np.sin(8.0 * np.pi * x / nx + pb1)
        + np.sin(8.0 * np.pi * y / ny + pb2)
        + 0.5 * np.sin(2.0 * np.pi * z / nz + pb3)
    ) / 1.5
    intensity = intensity + np.where(labels > 0, bias, 0.0)
    intensity[distractor_mask] = DISTRACTOR_HU
    if config.noise_sigma > 0:
        intensity = intensity + rng.normal(0.0, config.noise_sigma, intensity.shape)
    voxels = np.clip(np.rint(intensity), -32768, 32767).astype(np.int16)
    return voxels, labels


def generate_phantom(config: PhantomConfig) -> tuple[Volume3D, LabelMap]:
    """Generate one phantom volume with its ground-truth label map.

    Deterministic for a fixed config. Retries with derived seeds when a
    structure fails the 0.5% in-body coverage floor, and raises
    :class:`PhantomGenerationError` when retries are exhausted.
    """
    max_retries = 10
    for attempt in range(max_retries):
        rng = np.random.default_rng((config.seed, attempt))
        voxels, labels = _phantom_attempt(config, rng)
        in_body = int((labels > 0).sum())
        floor = 0.005 * in_body
        counts = np.bincount(labels.ravel(), minlength=config.n_classes)
        if all(counts[c] >= floor for c in range(1, config.n_classes)):
            volume = Volume3D(voxels=voxels, spacing=(1.0, 1.0, 1.0))
            label_map = LabelMap(
                labels=labels,
                n_classes=config.n_classes,
                class_names=config.class_names,
            )
            return volume, label_map
    raise PhantomGenerationError(
        f"could not satisfy class coverage floor after {max_retries} attempts"
    )


def generate_dataset(
    n_cases: int, base_config: PhantomConfig, out_dir: str
) -> DatasetManifest:
    """Write ``n_cases`` phantom pairs and a manifest to ``out_dir``.

    Per-case seed is ``base_config.seed + case index``; every slice is
    marked labeled.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    cases = []
    for i in range(n_cases):
        cfg = PhantomConfig(
            seed=base_config.seed + i,
            size=base_config.size,
            n_structures=base_config.n_structures,
            noise_sigma=base_config.noise_sigma,
            distractor=base_config.distractor,
        )
        volume, label_map = generate_phantom(cfg)
        case_id = f"case_{i:03d}"
        vol_path = os.path.join(out_dir, f"{case_id}_image")
        lab_path = os.path.join(out_dir, f"{case_id}_label")
        write_volume(volume, vol_path)
        write_volume(
            Volume3D(label_map.labels.astype(np.uint8), volume.spacing), lab_path
        )
        cases.append(
            CaseRecord(
                case_id=case_id,
                volume_path=vol_path,
                label_path=lab_path,
                labeled_slice_indices=list(range(volume.n_slices)),
            )
        )
    manifest = DatasetManifest(
        cases=cases,
        n_classes=base_config.n_classes,
        class_names=list(base_config.class_names),
    )
    manifest.save(os.path.join(out_dir, "manifest.yaml"))
    return manifest
