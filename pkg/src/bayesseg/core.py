"""Domain types and volume container I/O shared by all other modules.

Volumes are stored as a pair of files: ``<name>.volh`` (YAML header with
dims, spacing, origin, scalar type, byte order) and ``<name>.volr`` (raw
little-endian payload, z-major then y then x). Arrays are held in numpy
with shape (z, y, x); spacing and origin are given in (x, y, z) order
in millimetres.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import yaml
from PIL import Image

SCALAR_TYPES = {
    "int16": np.int16,
    "uint8": np.uint8,
    "float32": np.float32,
}


class VolumeIOError(Exception):
    """Raised when a volume container cannot be read or written."""


@dataclass(frozen=True)
class Volume3D:
    """A scalar voxel grid with physical spacing.

    voxels: array of shape (z, y, x)
    spacing: (dx, dy, dz) in mm
    origin: (x0, y0, z0) in mm
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise ValueError(f"voxels must be 3-D, got shape {v.shape}")
        if min(v.shape) < 1:
            raise ValueError("all dims must be >= 1")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "voxels", v)

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class Slice2D:
    """One axial plane of a volume."""

    pixels: np.ndarray
    parent_id: str = ""
    z_index: int = 0

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 2:
            raise ValueError(f"pixels must be 2-D, got shape {p.shape}")
        object.__setattr__(self, "pixels", p)


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel integer class map over n_classes classes (background = 0)."""

    labels: np.ndarray
    n_classes: int
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim not in (2, 3):
            raise ValueError(f"labels must be 2-D or 3-D, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            raise ValueError(f"labels must be integer-typed, got {lab.dtype}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if lab.size and (lab.min() < 0 or lab.max() >= self.n_classes):
            raise ValueError(
                f"label values must lie in [0, {self.n_classes - 1}], "
                f"got range [{lab.min()}, {lab.max()}]"
            )
        names = tuple(self.class_names) or tuple(
            f"class_{i}" for i in range(self.n_classes)
        )
        if len(names) != self.n_classes:
            raise ValueError("class_names length must equal n_classes")
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "class_names", names)


@dataclass
class CaseRecord:
    case_id: str
    volume_path: str
    label_path: str | None = None
    labeled_slice_indices: list[int] = field(default_factory=list)
    split_tag: str = "train"


@dataclass
class DatasetManifest:
    """Index of cases, their volume/label files and labeled slice sets."""

    cases: list[CaseRecord] = field(default_factory=list)
    n_classes: int = 2
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(ids) != len(set(ids)):
            raise ValueError("case_ids must be unique")
        for c in self.cases:
            if c.labeled_slice_indices and c.label_path is None:
                raise ValueError(
                    f"case {c.case_id}: labeled slices given without label_path"
                )

    def case(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def save(self, path: str) -> None:
        doc = {
            "n_classes": int(self.n_classes),
            "class_names": list(self.class_names),
            "cases": [
                {
                    "case_id": c.case_id,
                    "volume_path": c.volume_path,
                    "label_path": c.label_path,
                    "labeled_slice_indices": [int(z) for z in c.labeled_slice_indices],
                    "split_tag": c.split_tag,
                }
                for c in self.cases
            ],
        }
        _atomic_write_text(path, yaml.safe_dump(doc, sort_keys=False))

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        with open(path) as f:
            doc = yaml.safe_load(f)
        cases = [
            CaseRecord(
                case_id=c["case_id"],
                volume_path=c["volume_path"],
                label_path=c.get("label_path"),
                labeled_slice_indices=list(c.get("labeled_slice_indices") or []),
                split_tag=c.get("split_tag", "train"),
            )
            for c in doc.get("cases", [])
        ]
        return cls(
            cases=cases,
            n_classes=int(doc.get("n_classes", 2)),
            class_names=list(doc.get("class_names") or []),
        )


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def _container_paths(path: str) -> tuple[str, str]:
    base, ext = os.path.splitext(path)
    if ext in (".volh", ".volr"):
        path = base
    return path + ".volh", path + ".volr"


def write_volume(volume: Volume3D, path: str) -> None:
    """Write a volume as header + raw payload; overwrites atomically."""
    dtype_name = None
    for name, dt in SCALAR_TYPES.items():
        if volume.voxels.dtype == dt:
            dtype_name = name
            break
    if dtype_name is None:
        raise VolumeIOError(f"unsupported scalar type {volume.voxels.dtype}")
    header_path, payload_path = _container_paths(path)
    nz, ny, nx = volume.voxels.shape
    header = {
        "dims": [int(nx), int(ny), int(nz)],
        "spacing": [float(s) for s in volume.spacing],
        "origin": [float(o) for o in volume.origin],
        "scalar_type": dtype_name,
        "byte_order": "little",
    }
    payload = np.ascontiguousarray(volume.voxels).astype(
        volume.voxels.dtype.newbyteorder("<"), copy=False
    )
    _atomic_write_bytes(payload_path, payload.tobytes())
    _atomic_write_text(header_path, yaml.safe_dump(header, sort_keys=False))


def read_volume(path: str) -> Volume3D:
    """Read a volume container written by :func:`write_volume`."""
    header_path, payload_path = _container_paths(path)
    if not os.path.exists(header_path):
        raise VolumeIOError(f"missing header file {header_path}")
    if not os.path.exists(payload_path):
        raise VolumeIOError(f"missing payload file {payload_path}")
    with open(header_path) as f:
        header = yaml.safe_load(f)
    try:
        nx, ny, nz = (int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        origin = tuple(float(o) for o in header["origin"])
        scalar_type = header["scalar_type"]
    except (KeyError, TypeError, ValueError) as e:
        raise VolumeIOError(f"malformed header {header_path}: {e}") from e
    if scalar_type not in SCALAR_TYPES:
        raise VolumeIOError(f"unsupported scalar type {scalar_type!r}")
    dtype = np.dtype(SCALAR_TYPES[scalar_type]).newbyteorder("<")
    with open(payload_path, "rb") as f:
        raw = f.read()
    expected = nx * ny * nz * dtype.itemsize
    if len(raw) != expected:
        raise VolumeIOError(
            f"payload size mismatch: expected {expected} bytes, got {len(raw)}"
        )
    voxels = np.frombuffer(raw, dtype=dtype).reshape(nz, ny, nx)
    return Volume3D(
        voxels=voxels.astype(SCALAR_TYPES[scalar_type]),
        spacing=spacing,
        origin=origin,
    )


def extract_slice(volume: Volume3D, z: int, parent_id: str = "") -> Slice2D:
    """Extract the z-th axial plane of a volume."""
    if not 0 <= z < volume.n_slices:
        raise IndexError(f"z={z} out of range [0, {volume.n_slices})")
    return Slice2D(pixels=volume.voxels[z].copy(), parent_id=parent_id, z_index=z)


def stack_slices(slices: list[Slice2D], spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Volume3D:
    """Reassemble axial slices (ordered by z) into a volume."""
    if not slices:
        raise ValueError("no slices to stack")
    vox = np.stack([s.pixels for s in slices], axis=0)
    return Volume3D(voxels=vox, spacing=tuple(spacing), origin=tuple(origin))


# Fixed palette for label PNG export: background black, then
# visually-distinct colors cycling for the structure classes.
_LABEL_COLORS = [
    (0, 0, 0),
    (230, 75, 60), (60, 130, 230), (70, 190, 90), (240, 190, 50),
    (160, 90, 200), (240, 130, 40), (90, 200, 200), (220, 100, 170),
    (140, 140, 70), (100, 100, 230), (200, 200, 200), (130, 70, 40),
]


def slice_to_png(pixels: np.ndarray, path: str, is_label: bool = False) -> None:
    """Export one 2-D array as PNG (grayscale image or indexed-color labels)."""
    pixels = np.asarray(pixels)
    if is_label:
        img = Image.fromarray(pixels.astype(np.uint8), mode="P")
        palette = []
        for i in range(256):
            palette.extend(_LABEL_COLORS[i % len(_LABEL_COLORS)] if i else (0, 0, 0))
        img.putpalette(palette)
    else:
        if pixels.dtype != np.uint8:
            lo, hi = float(pixels.min()), float(pixels.max())
            scale = 255.0 / (hi - lo) if hi > lo else 0.0
            pixels = ((pixels - lo) * scale).astype(np.uint8)
        img = Image.fromarray(pixels, mode="L")
    img.save(path)
