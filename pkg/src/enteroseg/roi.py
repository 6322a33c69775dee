"""Volumetric region-of-interest extraction around per-class predictions.

Stage-1 slice predictions are restacked into a label volume, a tight 3-d
bounding box is taken per class, padded by a fixed margin (default 40
voxels) on all axes and clamped to the volume, and the padded box is cut
out of the original intensity volume together with a binarized ground-truth
crop. Crops are resliced along the coronal axis, normalized, and resized to
the stage-2 input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .medio import (GrayscaleSlice, LabelMask, N_CLASSES, normalize_slice,
                    resize)

__all__ = ["LabelVolume", "BBox3D", "RoiPatchSet",
           "stack_predictions", "class_bbox", "pad_bbox", "extract_roi",
           "DEFAULT_PAD", "DEFAULT_TARGET"]

DEFAULT_PAD = 40
DEFAULT_TARGET = (96, 96)


@dataclass
class LabelVolume:
    """Integer class volume indexed [x, y, z]."""
    labels: np.ndarray
    provenance: tuple = ()

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"label volume must be 3-d, got {self.labels.ndim}-d")


@dataclass(frozen=True)
class BBox3D:
    """Inclusive voxel bounds, axis order (x, y, z)."""
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        for a, b in zip(self.lo, self.hi):
            if a > b:
                raise ValueError(f"degenerate bbox {self.lo}..{self.hi}")

    def extents(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))


def stack_predictions(slices: list[LabelMask],
                      provenance: tuple = ()) -> LabelVolume:
    """Inverse of coronal slicing: slice s pixel (row z, col x) -> voxel (x, s, z)."""
    if not slices:
        raise ValueError("no slices to stack")
    shape = slices[0].labels.shape
    for s in slices:
        if s.labels.shape != shape:
            raise ValueError("slices disagree in shape")
    planes = [s.labels.T for s in slices]          # each [x, z]
    vol = np.stack(planes, axis=1)                 # [x, y, z]
    return LabelVolume(labels=np.ascontiguousarray(vol), provenance=provenance)


def class_bbox(vol: LabelVolume, class_id: int) -> BBox3D | None:
    """Tight inclusive bounds of one class, or None when absent."""
    if not 0 <= class_id < N_CLASSES:
        raise ValueError(f"class id {class_id} outside 0..{N_CLASSES - 1}")
    where = np.argwhere(vol.labels == class_id)
    if where.size == 0:
        return None
    lo = where.min(axis=0)
    hi = where.max(axis=0)
    return BBox3D(lo=tuple(int(v) for v in lo), hi=tuple(int(v) for v in hi))


def pad_bbox(box: BBox3D, pad: int = DEFAULT_PAD,
             bounds: tuple[int, int, int] = None) -> BBox3D:
    """Expand by ``pad`` voxels on every axis, clamped to [0, dim-1]."""
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    if bounds is None:
        raise ValueError("bounds (volume dims) are required for clamping")
    lo = tuple(max(0, l - pad) for l in box.lo)
    hi = tuple(min(d - 1, h + pad) for h, d in zip(box.hi, bounds))
    return BBox3D(lo=lo, hi=hi)


@dataclass
class RoiPatchSet:
    """Normalized intensity patches and binary masks cut from one box."""
    class_id: int
    bbox: BBox3D
    patches: list[GrayscaleSlice]
    masks: list[LabelMask]
    target: tuple[int, int]


def extract_roi(intensity: np.ndarray, gt: LabelVolume, box: BBox3D,
                class_id: int, target: tuple[int, int] = DEFAULT_TARGET) -> RoiPatchSet:
    """Cut, binarize, reslice, normalize, and resize one padded box.

    ``intensity`` is the original float volume [x, y, z]; ``gt`` the aligned
    label volume. The crop is resliced along the coronal axis (one patch per
    y index inside the box), the ground truth binarized to ``class_id``,
    intensities normalized per patch, and both resized to ``target``
    (bilinear / nearest). Patch count equals the box extent along y.
    """
    intensity = np.asarray(intensity)
    if intensity.shape != gt.labels.shape:
        raise ValueError(f"intensity {intensity.shape} and labels "
                         f"{gt.labels.shape} disagree")
    for l, h, d in zip(box.lo, box.hi, intensity.shape):
        if l < 0 or h >= d:
            raise ValueError(f"bbox {box.lo}..{box.hi} exceeds volume "
                             f"{intensity.shape}")
    (x0, y0, z0), (x1, y1, z1) = box.lo, box.hi
    crop_int = intensity[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1]
    crop_bin = (gt.labels[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1] == class_id)

    patches, masks = [], []
    for yi in range(crop_int.shape[1]):
        img = GrayscaleSlice(pixels=np.ascontiguousarray(
            crop_int[:, yi, :].T.astype(np.float32)))
        msk = LabelMask(labels=np.ascontiguousarray(
            crop_bin[:, yi, :].T.astype(np.uint8)))
        img = resize(normalize_slice(img), target, "bilinear")
        msk = resize(msk, target, "nearest")
        patches.append(img)
        masks.append(msk)
    return RoiPatchSet(class_id=class_id, bbox=box, patches=patches,
                       masks=masks, target=(int(target[0]), int(target[1])))
