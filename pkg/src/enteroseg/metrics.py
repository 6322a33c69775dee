"""Overlap and surface-distance metrics on binary masks.

DSC and IoU follow the usual set definitions with the both-empty pair scored
as perfect agreement. HD95 is the max of the two directed 95th-percentile
surface distances under the nearest-rank convention (ceil(0.95*n)-th of the
sorted list); surfaces are foreground pixels with at least one background
4-neighbor (6-neighbor in 3-d), out-of-bounds counting as background.
Distances are Euclidean over spacing-scaled coordinates. A pair with an
empty mask has no HD95; it is reported as undefined, never as a sentinel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BinaryMaskView", "ClassResult", "MetricsReport",
    "dsc", "iou", "surface_points", "hd95", "aggregate",
    "render_report", "render_comparison",
]


@dataclass
class BinaryMaskView:
    """Boolean mask (2-d, or 3-d behind the volumetric flag) plus spacing."""
    mask: np.ndarray
    spacing: tuple[float, ...] | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.ndim not in (2, 3):
            raise ValueError(f"mask must be 2-d or 3-d, got {self.mask.ndim}-d")
        if self.spacing is not None:
            if len(self.spacing) != self.mask.ndim:
                raise ValueError("spacing rank must match mask rank")
            if any(s <= 0 for s in self.spacing):
                raise ValueError("spacing entries must be positive")


def _pair(p, g) -> tuple[np.ndarray, np.ndarray, tuple[float, ...]]:
    pm = p.mask if isinstance(p, BinaryMaskView) else np.asarray(p).astype(bool)
    gm = g.mask if isinstance(g, BinaryMaskView) else np.asarray(g).astype(bool)
    if pm.shape != gm.shape:
        raise ValueError(f"mask shapes differ: {pm.shape} vs {gm.shape}")
    sp = None
    if isinstance(p, BinaryMaskView) and p.spacing is not None:
        sp = p.spacing
    if isinstance(g, BinaryMaskView) and g.spacing is not None:
        if sp is not None and tuple(sp) != tuple(g.spacing):
            raise ValueError("prediction and reference spacing disagree")
        sp = g.spacing
    if sp is None:
        sp = (1.0,) * pm.ndim
    return pm, gm, tuple(float(s) for s in sp)


def dsc(p, g) -> float:
    """2|P & G| / (|P| + |G|); both empty scores 1.0."""
    pm, gm, _ = _pair(p, g)
    np_, ng = int(pm.sum()), int(gm.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    inter = int(np.logical_and(pm, gm).sum())
    return 2.0 * inter / (np_ + ng)


def iou(p, g) -> float:
    """|P & G| / |P | G|; both empty scores 1.0."""
    pm, gm, _ = _pair(p, g)
    inter = int(np.logical_and(pm, gm).sum())
    union = int(np.logical_or(pm, gm).sum())
    if union == 0:
        return 1.0
    return inter / union


def surface_points(mask) -> np.ndarray:
    """Integer coordinates of foreground pixels touching background.

    Face-connected neighborhood (4 in 2-d, 6 in 3-d); positions outside the
    array count as background, so the array border is always surface.
    """
    m = mask.mask if isinstance(mask, BinaryMaskView) else np.asarray(mask).astype(bool)
    if m.ndim not in (2, 3):
        raise ValueError(f"mask must be 2-d or 3-d, got {m.ndim}-d")
    if not m.any():
        return np.zeros((0, m.ndim), dtype=np.int64)
    interior = np.ones_like(m)
    for ax in range(m.ndim):
        lo = np.ones_like(m)
        hi = np.ones_like(m)
        sl_lo = [slice(None)] * m.ndim
        sl_hi = [slice(None)] * m.ndim
        sl_lo[ax] = slice(1, None)
        sl_hi[ax] = slice(None, -1)
        lo[tuple(sl_lo)] = m[tuple(sl_hi)]   # neighbor at index-1, border bg
        lo[tuple(sl_hi)] &= True
        lo_edge = [slice(None)] * m.ndim
        lo_edge[ax] = slice(0, 1)
        lo[tuple(lo_edge)] = False
        hi[tuple(sl_hi)] = m[tuple(sl_lo)]   # neighbor at index+1
        hi_edge = [slice(None)] * m.ndim
        hi_edge[ax] = slice(-1, None)
        hi[tuple(hi_edge)] = False
        interior &= lo & hi
    surf = m & ~interior
    return np.argwhere(surf).astype(np.int64)


def _directed_95(src: np.ndarray, dst: np.ndarray,
                 spacing: tuple[float, ...]) -> float:
    """Nearest-rank 95th percentile of nearest-neighbor distances src->dst.

    Blocked vectorized all-pairs scan over spacing-scaled float64
    coordinates; evaluates the same expression as a plain per-point loop so
    the two agree bit for bit.
    """
    sp = np.asarray(spacing, dtype=np.float64)
    a = src.astype(np.float64) * sp
    b = dst.astype(np.float64) * sp
    mins = np.empty(a.shape[0], dtype=np.float64)
    block = max(1, int(2_000_000 / max(b.shape[0], 1)))
    for i in range(0, a.shape[0], block):
        chunk = a[i:i + block]
        d2 = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        mins[i:i + block] = d2.min(axis=1)
    dists = np.sort(np.sqrt(mins))
    rank = math.ceil(0.95 * dists.size)  # 1-indexed nearest rank
    return float(dists[rank - 1])


def hd95(p, g) -> float | None:
    """Symmetric 95th-percentile surface distance; None if a mask is empty."""
    pm, gm, spacing = _pair(p, g)
    if not pm.any() or not gm.any():
        return None
    ps = surface_points(pm)
    gs = surface_points(gm)
    return max(_directed_95(ps, gs, spacing), _directed_95(gs, ps, spacing))


@dataclass
class ClassResult:
    """Aggregated metric values for one class."""
    dsc: float
    iou: float
    hd95: float | None
    n_undefined_hd95: int = 0
    detection_misses: int = 0


@dataclass
class MetricsReport:
    """Per-class results plus means over the defined entries."""
    per_class: dict[str, ClassResult]
    mean_dsc: float
    mean_iou: float
    mean_hd95: float | None
    n_undefined_hd95: int
    stage: str = ""
    fold: int | None = None

    def to_json(self) -> str:
        payload = {
            "stage": self.stage,
            "fold": self.fold,
            "mean_dsc": self.mean_dsc,
            "mean_iou": self.mean_iou,
            "mean_hd95": self.mean_hd95,
            "n_undefined_hd95": self.n_undefined_hd95,
            "per_class": {
                name: {"dsc": r.dsc, "iou": r.iou, "hd95": r.hd95,
                       "n_undefined_hd95": r.n_undefined_hd95,
                       "detection_misses": r.detection_misses}
                for name, r in self.per_class.items()
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        raw = json.loads(text)
        per_class = {
            name: ClassResult(dsc=v["dsc"], iou=v["iou"], hd95=v["hd95"],
                              n_undefined_hd95=v.get("n_undefined_hd95", 0),
                              detection_misses=v.get("detection_misses", 0))
            for name, v in raw["per_class"].items()
        }
        return MetricsReport(per_class=per_class, mean_dsc=raw["mean_dsc"],
                             mean_iou=raw["mean_iou"], mean_hd95=raw["mean_hd95"],
                             n_undefined_hd95=raw["n_undefined_hd95"],
                             stage=raw.get("stage", ""), fold=raw.get("fold"))


def aggregate(per_class: dict[str, ClassResult], stage: str = "",
              fold: int | None = None) -> MetricsReport:
    """Arithmetic means over classes; HD95 means skip undefined entries."""
    if not per_class:
        raise ValueError("nothing to aggregate")
    dscs = [r.dsc for r in per_class.values()]
    ious = [r.iou for r in per_class.values()]
    hds = [r.hd95 for r in per_class.values() if r.hd95 is not None]
    undef = sum(r.n_undefined_hd95 for r in per_class.values())
    undef += sum(1 for r in per_class.values() if r.hd95 is None)
    return MetricsReport(
        per_class=dict(per_class),
        mean_dsc=float(np.mean(dscs)),
        mean_iou=float(np.mean(ious)),
        mean_hd95=float(np.mean(hds)) if hds else None,
        n_undefined_hd95=undef,
        stage=stage,
        fold=fold,
    )


def _fmt(v, nd=4) -> str:
    if v is None:
        return "undefined"
    return f"{v:.{nd}f}"


def render_report(report: MetricsReport) -> str:
    """Aligned per-class table for one stage."""
    rows = [("class", "DSC", "IoU", "HD95", "misses")]
    for name, r in report.per_class.items():
        rows.append((name, _fmt(r.dsc), _fmt(r.iou), _fmt(r.hd95),
                     str(r.detection_misses)))
    rows.append(("mean", _fmt(report.mean_dsc), _fmt(report.mean_iou),
                 _fmt(report.mean_hd95), ""))
    widths = [max(len(row[i]) for row in rows) for i in range(5)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
             for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_comparison(stage1: MetricsReport, stage2: MetricsReport) -> str:
    """Stage-1 vs stage-2 table with per-class deltas."""
    names = list(stage1.per_class)
    for n in stage2.per_class:
        if n not in names:
            names.append(n)
    head = ("class", "DSC-1", "DSC-2", "dDSC", "IoU-1", "IoU-2", "dIoU",
            "HD95-1", "HD95-2", "dHD95")
    rows = [head]

    def delta(a, b):
        if a is None or b is None:
            return None
        return b - a

    for name in names:
        r1 = stage1.per_class.get(name)
        r2 = stage2.per_class.get(name)
        cells = [name]
        for attr in ("dsc", "iou", "hd95"):
            v1 = getattr(r1, attr) if r1 else None
            v2 = getattr(r2, attr) if r2 else None
            cells.extend([_fmt(v1), _fmt(v2), _fmt(delta(v1, v2))])
        rows.append(tuple(cells))
    mean_cells = ["mean"]
    for a, b in ((stage1.mean_dsc, stage2.mean_dsc),
                 (stage1.mean_iou, stage2.mean_iou),
                 (stage1.mean_hd95, stage2.mean_hd95)):
        mean_cells.extend([_fmt(a), _fmt(b), _fmt(delta(a, b))])
    rows.append(tuple(mean_cells))
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
             for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
