"""Segmentation quality metrics: Dice, Hausdorff distance in mm, precision
and recall.

Boundaries use 6-neighborhood face adjacency with the volume edge counting
as outside.  Hausdorff distances scale integer voxel offsets by the per-axis
spacing, so anisotropic grids give distances in physical mm.  Conventions
for degenerate masks: dice of two empty masks is 1, precision with an empty
prediction is reported as 0 with a cleared defined-flag, and Hausdorff on an
empty mask is an error.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volumes import LabelVolume

BRAIN_CLASSES = (1, 2)
CONTRA_CLASS = 2


@dataclass
class BinaryMask:
    mask: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        if self.mask.ndim != 3:
            raise ValueError(f"mask must be (D, H, W), got shape {self.mask.shape}")

    @classmethod
    def brain(cls, volume: LabelVolume) -> "BinaryMask":
        return cls(mask=volume.labels >= 1, spacing=volume.spacing)

    @classmethod
    def contralateral(cls, volume: LabelVolume) -> "BinaryMask":
        return cls(mask=volume.labels == CONTRA_CLASS, spacing=volume.spacing)


def _as_mask(m) -> np.ndarray:
    if isinstance(m, BinaryMask):
        return m.mask
    return np.asarray(m, dtype=bool)


def _check_extents(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask extents differ: {a.shape} vs {b.shape}")


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks count as a perfect match."""
    am, bm = _as_mask(a), _as_mask(b)
    _check_extents(am, bm)
    total = int(am.sum()) + int(bm.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((am & bm).sum()) / total


def boundary_voxels(mask) -> np.ndarray:
    """(M, 3) coordinates of mask voxels with an outside face neighbor."""
    m = _as_mask(mask)
    p = np.pad(m, 1, constant_values=False)
    surrounded = (p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1]
                  & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
                  & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:])
    return np.argwhere(m & ~surrounded)


def _directed_sq_minima(a: np.ndarray, b: np.ndarray, spacing: np.ndarray):
    """Min squared distance from each a-row to b and from each b-row to a.

    Offsets are integer voxel differences scaled per axis by spacing; squares
    are summed in axis order so results are bitwise-stable.
    """
    min_ab = np.full(len(a), np.inf)
    min_ba = np.full(len(b), np.inf)
    chunk = max(1, 1_000_000 // len(b))
    for i in range(0, len(a), chunk):
        diff = (a[i:i + chunk, None, :] - b[None, :, :]) * spacing
        d2 = (diff * diff).sum(axis=2)
        min_ab[i:i + chunk] = d2.min(axis=1)
        np.minimum(min_ba, d2.min(axis=0), out=min_ba)
    return min_ab, min_ba


def hausdorff_mm(a, b, spacing=None, method: str = "brute") -> float:
    """Symmetric Hausdorff distance between mask boundaries, in mm.

    method "brute" is the exact pairwise reference; "edt" uses a distance
    transform and agrees exactly on unit-spacing lattices.
    """
    am, bm = _as_mask(a), _as_mask(b)
    _check_extents(am, bm)
    if spacing is None:
        if isinstance(a, BinaryMask):
            spacing = a.spacing
        else:
            raise ValueError("spacing is required for plain-array masks")
    if isinstance(a, BinaryMask) and isinstance(b, BinaryMask) and a.spacing != b.spacing:
        raise ValueError(f"mask spacings differ: {a.spacing} vs {b.spacing}")
    if not am.any() or not bm.any():
        raise ValueError("Hausdorff distance is undefined for empty masks")
    ba = boundary_voxels(am)
    bb = boundary_voxels(bm)
    sp = np.asarray(spacing, dtype=np.float64)
    if method == "brute":
        min_ab, min_ba = _directed_sq_minima(ba, bb, sp)
        return float(np.sqrt(max(min_ab.max(), min_ba.max())))
    if method == "edt":
        return max(_directed_edt(ba, bb, am.shape, sp),
                   _directed_edt(bb, ba, am.shape, sp))
    raise ValueError(f"unknown method {method!r}, expected 'brute' or 'edt'")


def _directed_edt(src: np.ndarray, dst: np.ndarray, shape, spacing) -> float:
    target = np.ones(shape, dtype=bool)
    target[tuple(dst.T)] = False
    dt = ndimage.distance_transform_edt(target, sampling=spacing)
    return float(dt[tuple(src.T)].max())


def precision_recall(pred, gt) -> tuple[float, float]:
    """(TP/(TP+FP), TP/(TP+FN)); zero denominators yield 0.0."""
    pm, gm = _as_mask(pred), _as_mask(gt)
    _check_extents(pm, gm)
    tp = int((pm & gm).sum())
    p_total = int(pm.sum())
    g_total = int(gm.sum())
    precision = tp / p_total if p_total else 0.0
    recall = tp / g_total if g_total else 0.0
    return precision, recall


@dataclass
class MetricRow:
    region: str
    dice: float
    hd_mm: float
    precision: float
    recall: float
    precision_defined: bool = True


def _apply_slice_filter(mask: np.ndarray, slice_filter) -> np.ndarray:
    if slice_filter is None:
        return mask
    depth = mask.shape[0]
    keep = sorted(int(s) for s in slice_filter)
    bad = [s for s in keep if s < 0 or s >= depth]
    if bad:
        raise ValueError(f"slice_filter indices {bad} outside 0..{depth - 1}")
    out = np.zeros_like(mask)
    out[keep] = mask[keep]
    return out


def evaluate_volume(pred: LabelVolume, gt: LabelVolume,
                    slice_filter=None) -> list[MetricRow]:
    """Brain and contralateral-hemisphere metric rows for one prediction.

    slice_filter, when given, keeps only the listed through-plane slices;
    voxel coordinates are preserved so distances stay in world units.
    """
    if pred.extents != gt.extents:
        raise ValueError(f"extents differ: pred {pred.extents} vs gt {gt.extents}")
    if pred.spacing != gt.spacing:
        raise ValueError(f"spacings differ: pred {pred.spacing} vs gt {gt.spacing}")
    regions = [
        ("brain", pred.labels >= 1, gt.labels >= 1),
        ("contralateral_hemisphere", pred.labels == CONTRA_CLASS,
         gt.labels == CONTRA_CLASS),
    ]
    rows = []
    for name, pm, gm in regions:
        pm = _apply_slice_filter(pm, slice_filter)
        gm = _apply_slice_filter(gm, slice_filter)
        prec, rec = precision_recall(pm, gm)
        rows.append(MetricRow(
            region=name,
            dice=dice(pm, gm),
            hd_mm=hausdorff_mm(pm, gm, spacing=pred.spacing),
            precision=prec,
            recall=rec,
            precision_defined=bool(pm.any()),
        ))
    return rows


def write_metric_report(rows: list[tuple[str, MetricRow]], path: str) -> None:
    """CSV of per-volume rows plus per-region mean and std summary rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["volume_id", "region", "dice", "hd_mm",
                         "precision", "recall", "precision_defined"])
        for volume_id, row in rows:
            writer.writerow([volume_id, row.region, f"{row.dice:.6f}",
                             f"{row.hd_mm:.6f}", f"{row.precision:.6f}",
                             f"{row.recall:.6f}", int(row.precision_defined)])
        def sample_sd(vals):
            return float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")

        by_region: dict[str, list[MetricRow]] = {}
        for _, row in rows:
            by_region.setdefault(row.region, []).append(row)
        for region, group in by_region.items():
            for stat, fn in (("mean", np.mean), ("std", sample_sd)):
                writer.writerow([
                    stat, region,
                    f"{fn([r.dice for r in group]):.6f}",
                    f"{fn([r.hd_mm for r in group]):.6f}",
                    f"{fn([r.precision for r in group]):.6f}",
                    f"{fn([r.recall for r in group]):.6f}",
                    "",
                ])
