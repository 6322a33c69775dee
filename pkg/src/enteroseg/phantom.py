"""Synthetic abdominal phantoms for desk-scale pipeline runs.

Each phantom is an intensity volume plus an aligned label volume: a couple
of ellipsoid/tube-shaped "organs" at distinct intensity levels over a noisy
background, with an optional rare class that is tiny (well under one percent
of the voxels) and present only in a fraction of the phantoms. Volumes are
written as single-file NIfTI-1 pairs that the ingestion path can read back.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["PhantomSpec", "generate_phantom", "write_phantom_dataset", "write_nifti"]


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, contrast, prevalence and noise knobs for the generator."""
    dims: tuple[int, int, int] = (64, 64, 12)
    n_classes: int = 3                     # organ classes 1..n_classes
    rare_class: int | None = 3
    rare_fraction: float = 0.7             # share of phantoms with the rare class
    noise: float = 0.04
    pixdim: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_classes <= 10:
            raise ValueError("organ class count must be within 1..10")
        if self.rare_class is not None and not 1 <= self.rare_class <= self.n_classes:
            raise ValueError("rare class must be one of the organ classes")


def _ellipsoid(dims, center, radii):
    grids = np.ogrid[tuple(slice(0, d) for d in dims)]
    acc = np.zeros(dims, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def _tube(dims, center, radii, axis, half_len):
    """Cylinder along one axis with elliptical cross-section."""
    grids = np.ogrid[tuple(slice(0, d) for d in dims)]
    acc = np.zeros(dims, dtype=np.float64)
    for ax, (g, c, r) in enumerate(zip(grids, center, radii)):
        if ax == axis:
            continue
        acc = acc + ((g - c) / r) ** 2
    within = acc <= 1.0
    span = np.abs(grids[axis] - center[axis]) <= half_len
    return within & span


def generate_phantom(spec: PhantomSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic per-index phantom: (intensity f32, labels u8), [x,y,z]."""
    rng = np.random.default_rng([spec.seed, index])
    nx, ny, nz = spec.dims
    labels = np.zeros(spec.dims, dtype=np.uint8)

    # class intensity levels, brightest for the rare class
    levels = np.linspace(0.45, 0.95, spec.n_classes)

    for cls in range(1, spec.n_classes + 1):
        if cls == spec.rare_class:
            continue
        kind = "tube" if cls % 2 == 0 else "ellipsoid"
        center = (rng.uniform(0.3, 0.7) * nx,
                  rng.uniform(0.35, 0.65) * ny,
                  rng.uniform(0.3, 0.7) * nz)
        if kind == "ellipsoid":
            radii = (rng.uniform(0.12, 0.2) * nx,
                     rng.uniform(0.2, 0.35) * ny,
                     rng.uniform(0.12, 0.2) * nz)
            shape = _ellipsoid(spec.dims, center, radii)
        else:
            radii = (rng.uniform(0.08, 0.13) * nx,
                     rng.uniform(0.2, 0.3) * ny,
                     rng.uniform(0.08, 0.13) * nz)
            shape = _tube(spec.dims, center, radii, axis=0,
                          half_len=rng.uniform(0.25, 0.4) * nx)
        labels[shape] = cls

    if spec.rare_class is not None and rng.random() < spec.rare_fraction:
        # tiny blob, placed away from the borders; painted last so it wins
        center = (rng.uniform(0.25, 0.75) * nx,
                  rng.uniform(0.3, 0.7) * ny,
                  rng.uniform(0.25, 0.75) * nz)
        radii = (rng.uniform(0.055, 0.075) * nx,
                 rng.uniform(0.12, 0.2) * ny,
                 rng.uniform(0.055, 0.075) * nz)
        labels[_ellipsoid(spec.dims, center, radii)] = spec.rare_class

    intensity = np.full(spec.dims, 0.12, dtype=np.float64)
    for cls in range(1, spec.n_classes + 1):
        jitter = rng.uniform(-0.03, 0.03)
        intensity[labels == cls] = levels[cls - 1] + jitter
    intensity += rng.normal(0.0, spec.noise, size=spec.dims)
    return intensity.astype(np.float32), labels


def generate_rare_prevalence(spec: PhantomSpec, n: int) -> float:
    total = 0
    rare = 0
    for i in range(n):
        _, labels = generate_phantom(spec, i)
        total += labels.size
        rare += int((labels == spec.rare_class).sum())
    return rare / total


def write_phantom_dataset(spec: PhantomSpec, n_patients: int, root) -> dict:
    """Emit NIfTI pairs pNNN_image / pNNN_mask plus a stats file."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counts = np.zeros(spec.n_classes + 1, dtype=np.int64)
    patients = []
    for i in range(n_patients):
        intensity, labels = generate_phantom(spec, i)
        pid = f"p{i:03d}"
        patients.append(pid)
        write_nifti(root / f"{pid}_image.nii.gz", intensity, spec.pixdim)
        write_nifti(root / f"{pid}_mask.nii.gz", labels, spec.pixdim)
        counts += np.bincount(labels.ravel(), minlength=spec.n_classes + 1)
    stats = {
        "patients": patients,
        "dims": list(spec.dims),
        "n_classes": spec.n_classes,
        "rare_class": spec.rare_class,
        "voxel_counts": {str(c): int(counts[c]) for c in range(spec.n_classes + 1)},
        "seed": spec.seed,
    }
    (root / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    return stats


_DT_CODES = {np.dtype(np.uint8): (2, 8), np.dtype(np.int16): (4, 16),
             np.dtype(np.float32): (16, 32)}


def write_nifti(path, volume: np.ndarray, pixdim=(1.0, 1.0, 1.0),
                scl_slope: float = 1.0, scl_inter: float = 0.0) -> None:
    """Minimal single-file little-endian NIfTI-1 writer.

    ``volume`` is [x, y, z]; the buffer is written x-fastest at offset 352.
    Gzip is applied when the path ends in .gz.
    """
    volume = np.asarray(volume)
    dtype = np.dtype(volume.dtype)
    if dtype not in _DT_CODES:
        raise ValueError(f"unsupported dtype {dtype}, use uint8/int16/float32")
    code, bitpix = _DT_CODES[dtype]
    nx, ny, nz = volume.shape

    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, code, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, scl_slope, scl_inter)
    header[344:348] = b"n+1\x00"

    buf = np.ascontiguousarray(volume.transpose(2, 1, 0)).astype(
        dtype.newbyteorder("<"))
    payload = bytes(header) + b"\x00" * 4 + buf.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        path.write_bytes(gzip.compress(payload, mtime=0))
    else:
        path.write_bytes(payload)
