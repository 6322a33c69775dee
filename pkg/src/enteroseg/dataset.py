"""Patient-level fold planning, class weighting, and on-the-fly augmentation.

Folds are stratified by patient: every patient lands in exactly one test set
across the k folds, and within each fold the train/val/test counts stay
within one patient of a 70/10/20 split. Weighting is inverse pixel
frequency with an optional per-class boost, rescaled to mean 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .medio import GrayscaleSlice, LabelMask, N_CLASSES

__all__ = [
    "FoldAssignment", "FoldPlan", "stratified_kfold",
    "ClassWeights", "compute_class_weights",
    "AugmentationSpec", "augment",
]


@dataclass(frozen=True)
class FoldAssignment:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple[FoldAssignment, ...]

    def to_json(self) -> str:
        return json.dumps({
            "k": self.k,
            "seed": self.seed,
            "folds": [{"train": list(f.train), "val": list(f.val),
                       "test": list(f.test)} for f in self.folds],
        }, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "FoldPlan":
        raw = json.loads(text)
        folds = tuple(FoldAssignment(train=tuple(f["train"]), val=tuple(f["val"]),
                                     test=tuple(f["test"]))
                      for f in raw["folds"])
        return FoldPlan(k=int(raw["k"]), seed=int(raw["seed"]), folds=folds)


def stratified_kfold(patients: list[str], k: int, seed: int) -> FoldPlan:
    """Deterministic patient-level k-fold plan.

    Patients are shuffled once by seed and chunked into k test sets whose
    sizes differ by at most one. Within each fold the validation count is
    chosen so that train/val/test each sit within one patient of 70/10/20.
    """
    uniq = list(patients)
    if len(set(uniq)) != len(uniq):
        raise ValueError("duplicate patient ids")
    n = len(uniq)
    if k < 2 or n < k:
        raise ValueError(f"need at least k={k} patients, got {n}")
    rng = np.random.default_rng(seed)
    order = [uniq[i] for i in rng.permutation(n)]

    base, extra = divmod(n, k)
    chunks = []
    pos = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        chunks.append(order[pos:pos + size])
        pos += size

    folds = []
    for f in range(k):
        test = chunks[f]
        rest = [p for c, chunk in enumerate(chunks) if c != f for p in chunk]
        n_val = _val_count(n, len(test), len(rest))
        folds.append(FoldAssignment(train=tuple(rest[n_val:]),
                                    val=tuple(rest[:n_val]),
                                    test=tuple(test)))
    return FoldPlan(k=k, seed=seed, folds=tuple(folds))


def _val_count(n: int, n_test: int, n_rest: int) -> int:
    # val must sit within 1 of 0.1n AND leave train within 1 of 0.7n;
    # both windows overlap because the test chunk is within 1 of 0.2n.
    lo = max(math.ceil(0.1 * n - 1.0), math.ceil(0.3 * n - n_test - 1.0), 0)
    hi = min(math.floor(0.1 * n + 1.0), math.floor(0.3 * n - n_test + 1.0),
             n_rest - 1)
    if lo > hi:
        raise ValueError(f"no admissible validation count for n={n}, "
                         f"test={n_test}")
    target = 0.1 * n
    best = min(range(lo, hi + 1), key=lambda v: (abs(v - target), -v))
    return best


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights, mean-1 rescaled, with provenance."""
    weights: tuple[float, ...]
    n_classes: int
    boost: tuple[int, float] | None
    seed: int | None = None

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float32)

    def to_json(self) -> str:
        return json.dumps({
            "weights": list(self.weights),
            "n_classes": self.n_classes,
            "boost": list(self.boost) if self.boost else None,
            "seed": self.seed,
        }, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ClassWeights":
        raw = json.loads(text)
        boost = tuple(raw["boost"]) if raw.get("boost") else None
        return ClassWeights(weights=tuple(float(w) for w in raw["weights"]),
                            n_classes=int(raw["n_classes"]), boost=boost,
                            seed=raw.get("seed"))


def compute_class_weights(masks, n_classes: int = N_CLASSES,
                          boost: tuple[int, float] | None = None,
                          allow_absent: frozenset[int] = frozenset({4}),
                          seed: int | None = None) -> ClassWeights:
    """Inverse-frequency weights over a training mask collection.

    base[c] = total_pixels / (n_classes * pixels_of_c); the boost factor then
    multiplies its class, and everything is rescaled to mean 1. A class with
    zero pixels is an error unless listed in ``allow_absent``; an allowed
    absent class inherits the largest base weight seen among present classes.
    """
    counts = np.zeros(n_classes, dtype=np.int64)
    total = 0
    for m in masks:
        arr = m.labels if isinstance(m, LabelMask) else np.asarray(m)
        if arr.min(initial=0) < 0 or arr.max(initial=0) >= n_classes:
            raise ValueError(f"mask labels outside 0..{n_classes - 1}")
        counts += np.bincount(arr.ravel(), minlength=n_classes)[:n_classes]
        total += arr.size
    if total == 0:
        raise ValueError("no mask pixels to weight")

    missing = [c for c in range(n_classes) if counts[c] == 0]
    for c in missing:
        if c not in allow_absent:
            raise ValueError(f"class {c} has no pixels and is not in the "
                             f"absence allowance")

    base = np.zeros(n_classes, dtype=np.float64)
    present = counts > 0
    base[present] = total / (n_classes * counts[present].astype(np.float64))
    if missing:
        stand_in = base[present].max()
        for c in missing:
            base[c] = stand_in

    if boost is not None:
        cls, factor = int(boost[0]), float(boost[1])
        if not 0 <= cls < n_classes:
            raise ValueError(f"boost class {cls} outside 0..{n_classes - 1}")
        base[cls] *= factor

    base *= n_classes / base.sum()  # mean weight 1
    return ClassWeights(weights=tuple(float(w) for w in base),
                        n_classes=n_classes,
                        boost=(int(boost[0]), float(boost[1])) if boost else None,
                        seed=seed)


@dataclass(frozen=True)
class AugmentationSpec:
    """Sampling ranges and application probability for the training augments.

    Geometric transforms (rotation, shear) hit image and mask jointly,
    bilinear vs nearest, constant fill 0. Horizontal flip is a pure index
    reversal. Brightness/contrast touch the image only:
    p' = p*(1+c) + b*range, no clamping. Elastic deformation is deliberately
    not offered.
    """
    rotation_deg: float = 20.0
    shear_deg: float = 2.0
    brightness: float = 0.2
    contrast: float = 0.2
    hflip: bool = True
    prob: float = 0.5


def augment(image: GrayscaleSlice, mask: LabelMask, spec: AugmentationSpec,
            rng: np.random.Generator) -> tuple[GrayscaleSlice, LabelMask]:
    """One jointly sampled augmentation of an (image, mask) pair.

    Each transform fires independently with ``spec.prob``. Draw order is
    fixed (rotation, shear, flip, brightness, contrast) so a seeded rng
    reproduces the exact same output.
    """
    if image.pixels.shape != mask.labels.shape:
        raise ValueError(f"image {image.pixels.shape} and mask "
                         f"{mask.labels.shape} disagree")
    theta = 0.0
    if spec.rotation_deg and rng.random() < spec.prob:
        theta = math.radians(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    shear = 0.0
    if spec.shear_deg and rng.random() < spec.prob:
        shear = math.radians(rng.uniform(-spec.shear_deg, spec.shear_deg))
    flip = spec.hflip and rng.random() < spec.prob
    bright = 0.0
    if spec.brightness and rng.random() < spec.prob:
        bright = rng.uniform(-spec.brightness, spec.brightness)
    contrast = 0.0
    if spec.contrast and rng.random() < spec.prob:
        contrast = rng.uniform(-spec.contrast, spec.contrast)

    img = image.pixels.astype(np.float32)
    lbl = mask.labels.copy()

    if theta != 0.0 or shear != 0.0:
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        shr = np.array([[1.0, 0.0], [math.tan(shear), 1.0]])
        fwd = rot @ shr
        inv = np.linalg.inv(fwd)
        center = (np.array(img.shape, dtype=np.float64) - 1.0) / 2.0
        offset = center - inv @ center
        img = ndimage.affine_transform(img, inv, offset=offset, order=1,
                                       mode="constant", cval=0.0,
                                       output=np.float32)
        lbl = ndimage.affine_transform(lbl, inv, offset=offset, order=0,
                                       mode="constant", cval=0)
    if flip:
        img = img[:, ::-1].copy()
        lbl = lbl[:, ::-1].copy()

    touched_intensity = bright != 0.0 or contrast != 0.0
    if touched_intensity:
        span = float(img.max() - img.min())
        img = img * (1.0 + contrast) + bright * span

    changed = theta != 0.0 or shear != 0.0 or touched_intensity
    out_img = replace(image, pixels=img.astype(np.float32),
                      normalized=image.normalized and not changed)
    out_mask = replace(mask, labels=lbl)
    return out_img, out_mask
