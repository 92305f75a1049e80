"""Higher-level evaluations on top of the segmentation masks.

Three analyses: Dice restricted to a band around the brain midline (grown by
in-plane dilation), a hemispheric volume-ratio biomarker compared via
Cohen's d with BCa bootstrap confidence intervals, and a percentile-threshold
grid search for a morphological baseline segmenter.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import norm

from .metrics import BinaryMask, dice
from .volumes import LabelVolume, VolumeGrid

# one in-plane cross, confined to a single through-plane slice
_INPLANE_CROSS = np.zeros((1, 3, 3), dtype=bool)
_INPLANE_CROSS[0] = [[False, True, False], [True, True, True], [False, True, False]]

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)

PERCENTILE_GRID = tuple(range(1, 100))
ALPHA_GRID = tuple(range(0, 11))


def extract_midline(labels: LabelVolume) -> BinaryMask:
    """Hemisphere voxels with an in-plane 4-neighbor of the other hemisphere."""
    lab = labels.labels
    ipsi = lab == 1
    contra = lab == 2
    if not ipsi.any() or not contra.any():
        raise ValueError("midline extraction needs both hemisphere classes present")

    def touches(src: np.ndarray) -> np.ndarray:
        hit = np.zeros_like(src)
        hit[:, 1:, :] |= src[:, :-1, :]
        hit[:, :-1, :] |= src[:, 1:, :]
        hit[:, :, 1:] |= src[:, :, :-1]
        hit[:, :, :-1] |= src[:, :, 1:]
        return hit

    mid = (ipsi & touches(contra)) | (contra & touches(ipsi))
    return BinaryMask(mask=mid, spacing=labels.spacing)


def dilate_inplane(mask, n: int) -> BinaryMask:
    """n binary dilations with a 2D cross, applied within each slice."""
    if n < 0:
        raise ValueError(f"dilation count must be >= 0, got {n}")
    if isinstance(mask, BinaryMask):
        m, spacing = mask.mask, mask.spacing
    else:
        m, spacing = np.asarray(mask, dtype=bool), (1.0, 1.0, 1.0)
    if n == 0:
        return BinaryMask(mask=m.copy(), spacing=spacing)
    grown = ndimage.binary_dilation(m, structure=_INPLANE_CROSS, iterations=n)
    return BinaryMask(mask=grown, spacing=spacing)


def midline_dice(pred: LabelVolume, gt: LabelVolume, n: int,
                 slice_filter=None) -> tuple[float, float]:
    """Per-hemisphere Dice inside the width-n band around the true midline."""
    if pred.extents != gt.extents:
        raise ValueError(f"extents differ: pred {pred.extents} vs gt {gt.extents}")
    band = dilate_inplane(extract_midline(gt), n).mask
    if slice_filter is not None:
        keep = np.zeros(band.shape[0], dtype=bool)
        keep[sorted(int(s) for s in slice_filter)] = True
        band &= keep[:, None, None]
    if not band.any():
        raise ValueError("midline band is empty after slice filtering")
    d_ipsi = dice((pred.labels == 1) & band, (gt.labels == 1) & band)
    d_contra = dice((pred.labels == 2) & band, (gt.labels == 2) & band)
    return d_ipsi, d_contra


def hemispheric_ratio(labels: LabelVolume) -> float:
    """Contralateral over ipsilateral volume; the voxel volume cancels."""
    ipsi = int((labels.labels == 1).sum())
    contra = int((labels.labels == 2).sum())
    if ipsi == 0:
        raise ValueError("hemispheric ratio is undefined with an empty "
                         "ipsilateral hemisphere")
    return contra / ipsi


def cohens_d(sample_a, sample_b, paired: bool = False) -> float:
    """Pooled-SD effect size; paired=True uses the SD of the differences."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError(f"need >= 2 values per sample, got {a.size} and {b.size}")
    if paired:
        if a.size != b.size:
            raise ValueError("paired effect size needs equal-length samples")
        diff = a - b
        sd = diff.std(ddof=1)
        if sd == 0:
            raise ValueError("zero variance of paired differences")
        return float(diff.mean() / sd)
    na, nb = a.size, b.size
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    if pooled == 0:
        raise ValueError("zero pooled variance, effect size undefined")
    return float((a.mean() - b.mean()) / np.sqrt(pooled))


def _bootstrap_stats(a, b, statistic, resamples, rng):
    """Paired-index resamples; draws where the statistic degenerates are dropped."""
    n = len(a)
    idx = rng.integers(0, n, size=(resamples, n))
    boot = np.full(resamples, np.nan)
    for k in range(resamples):
        ik = idx[k]
        try:
            boot[k] = statistic(a[ik], b[ik])
        except (ValueError, ZeroDivisionError):
            pass
    return boot[np.isfinite(boot)]


def _jackknife_acceleration(a, b, statistic) -> float:
    n = len(a)
    loo = []
    for i in range(n):
        keep = np.arange(n) != i
        try:
            loo.append(statistic(a[keep], b[keep]))
        except (ValueError, ZeroDivisionError):
            return 0.0
    loo = np.asarray(loo)
    d = loo.mean() - loo
    den = 6.0 * (d ** 2).sum() ** 1.5
    if den == 0:
        return 0.0
    return float((d ** 3).sum() / den)


def _bca(sample_a, sample_b, statistic, resamples, alpha, seed,
         bias_correction, acceleration):
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size != b.size:
        raise ValueError("paired resampling needs equal-length samples")
    if a.size < 2:
        raise ValueError(f"need >= 2 paired values, got {a.size}")
    if resamples < 1000:
        raise ValueError(f"resamples must be >= 1000, got {resamples}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    point = float(statistic(a, b))
    rng = np.random.default_rng(seed)
    boot = _bootstrap_stats(a, b, statistic, resamples, rng)
    if boot.size == 0 or np.ptp(boot) == 0.0:
        return point, point, True

    if not bias_correction and not acceleration:
        # plain percentile interval on the identical resample stream
        p_lo, p_hi = alpha / 2.0, 1.0 - alpha / 2.0
    else:
        if bias_correction:
            frac = float((boot < point).mean())
            frac = min(max(frac, 0.5 / boot.size), 1.0 - 0.5 / boot.size)
            z0 = float(norm.ppf(frac))
        else:
            z0 = 0.0
        accel = _jackknife_acceleration(a, b, statistic) if acceleration else 0.0
        z_lo = float(norm.ppf(alpha / 2.0))
        z_hi = float(norm.ppf(1.0 - alpha / 2.0))
        p_lo = float(norm.cdf(z0 + (z0 + z_lo) / (1.0 - accel * (z0 + z_lo))))
        p_hi = float(norm.cdf(z0 + (z0 + z_hi) / (1.0 - accel * (z0 + z_hi))))
        p_lo = min(max(p_lo, 0.0), 1.0)
        p_hi = min(max(p_hi, 0.0), 1.0)
    low, high = np.quantile(boot, sorted((p_lo, p_hi)))
    return float(low), float(high), False


def bca_ci(sample_a, sample_b, statistic=cohens_d, resamples: int = 10000,
           alpha: float = 0.05, seed: int = 0, bias_correction: bool = True,
           acceleration: bool = True) -> tuple[float, float]:
    """BCa bootstrap interval for a paired two-sample statistic.

    Resampling draws volume indices jointly from both samples.  A degenerate
    bootstrap distribution collapses the interval to the point estimate with
    a warning.  Disabling both corrections gives the plain percentile
    interval on the same resample stream.
    """
    low, high, degenerate = _bca(sample_a, sample_b, statistic, resamples,
                                 alpha, seed, bias_correction, acceleration)
    if degenerate:
        warnings.warn("degenerate bootstrap distribution, interval collapsed "
                      "to the point estimate", RuntimeWarning, stacklevel=2)
    return low, high


@dataclass
class BiomarkerResult:
    gt_ratios: list[float]
    pred_ratios: list[float]
    cohens_d: float
    ci_low: float
    ci_high: float
    resamples: int
    alpha: float
    degenerate: bool = False

    @property
    def n_volumes(self) -> int:
        return len(self.gt_ratios)


def biomarker_analysis(preds: list[LabelVolume], gts: list[LabelVolume],
                       resamples: int = 10000, alpha: float = 0.05,
                       seed: int = 0, paired: bool = False) -> BiomarkerResult:
    """Effect size of predicted vs reference hemispheric ratios, with CI."""
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} references")
    pred_ratios = [hemispheric_ratio(p) for p in preds]
    gt_ratios = [hemispheric_ratio(g) for g in gts]
    stat = (lambda x, y: cohens_d(x, y, paired=True)) if paired else cohens_d
    d = stat(np.asarray(pred_ratios), np.asarray(gt_ratios))
    low, high, degenerate = _bca(pred_ratios, gt_ratios, stat, resamples,
                                 alpha, seed, True, True)
    return BiomarkerResult(gt_ratios=gt_ratios, pred_ratios=pred_ratios,
                           cohens_d=d, ci_low=low, ci_high=high,
                           resamples=resamples, alpha=alpha, degenerate=degenerate)


def write_biomarker_report(result: BiomarkerResult, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["d", "ci_low", "ci_high", "n_volumes", "resamples", "alpha"])
        writer.writerow([f"{result.cohens_d:.6f}", f"{result.ci_low:.6f}",
                         f"{result.ci_high:.6f}", result.n_volumes,
                         result.resamples, f"{result.alpha:g}"])


def write_midline_report(rows: list[tuple[int, float, float]], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "dice_ipsi", "dice_contra"])
        for n, d_ipsi, d_contra in rows:
            writer.writerow([n, f"{d_ipsi:.6f}", f"{d_contra:.6f}"])


def baseline_threshold_segment(volume: VolumeGrid, percentile_index: int,
                               alpha: int) -> BinaryMask:
    """Percentile threshold, in-plane closing, largest 6-connected component."""
    i = int(percentile_index)
    if not 1 <= i <= 99:
        raise ValueError(f"percentile index must lie in 1..99, got {percentile_index}")
    a = int(alpha)
    if not 0 <= a <= 10:
        raise ValueError(f"alpha must lie in 0..10, got {alpha}")
    t = np.quantile(volume.values, i / 100.0)
    mask = volume.values >= t
    if a > 0 and mask.any():
        mask = ndimage.binary_closing(mask, structure=_INPLANE_CROSS, iterations=a)
    if mask.any():
        labeled, count = ndimage.label(mask, structure=_SIX_CONNECTED)
        if count > 1:
            sizes = np.bincount(labeled.ravel())
            sizes[0] = 0
            mask = labeled == sizes.argmax()
    return BinaryMask(mask=mask, spacing=volume.spacing)


@dataclass
class GridSearchResult:
    best_percentile_index: int
    best_alpha: int
    best_mean_dice: float
    percentile_grid: tuple[int, ...] = PERCENTILE_GRID
    alpha_grid: tuple[int, ...] = ALPHA_GRID
    scores: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def gridsearch(pairs: list[tuple[VolumeGrid, LabelVolume]],
               percentile_grid=PERCENTILE_GRID,
               alpha_grid=ALPHA_GRID) -> GridSearchResult:
    """Mean brain-mask Dice over the full (percentile, alpha) grid.

    The winning cell attains the table maximum; ties resolve to the lowest
    percentile index, then the lowest alpha.
    """
    if not pairs:
        raise ValueError("grid search needs at least one (volume, labels) pair")
    percentile_grid = tuple(int(i) for i in percentile_grid)
    alpha_grid = tuple(int(a) for a in alpha_grid)
    gt_masks = [gt.labels >= 1 for _, gt in pairs]
    scores = np.zeros((len(percentile_grid), len(alpha_grid)))
    best = (-1.0, 0, 0)
    for pi, i in enumerate(percentile_grid):
        for ai, a in enumerate(alpha_grid):
            cell = np.empty(len(pairs))
            for v, (grid, _) in enumerate(pairs):
                pred = baseline_threshold_segment(grid, i, a)
                cell[v] = dice(pred.mask, gt_masks[v])
            # sort before averaging so the score is dataset-order invariant
            mean_dice = float(np.sort(cell).sum() / len(cell))
            scores[pi, ai] = mean_dice
            if mean_dice > best[0]:
                best = (mean_dice, i, a)
    return GridSearchResult(best_percentile_index=best[1], best_alpha=best[2],
                            best_mean_dice=best[0],
                            percentile_grid=percentile_grid,
                            alpha_grid=alpha_grid, scores=scores)


def write_gridsearch_table(result: GridSearchResult, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "alpha", "mean_dice"])
        for pi, i in enumerate(result.percentile_grid):
            for ai, a in enumerate(result.alpha_grid):
                writer.writerow([i, a, f"{result.scores[pi, ai]:.6f}"])
