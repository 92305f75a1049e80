"""Metric checks against exhaustive set-based oracles.

The oracles below work on python sets with explicit loops, intentionally
sharing no code path with the library.  The Hausdorff oracle sums squared
axis terms left to right (slice, row, column) and takes a single sqrt at the
end, which mirrors the library's accumulation order, so agreement can be
asserted bitwise rather than within a tolerance.
"""
from __future__ import annotations

import math

import numpy as np
import pytest

from hemiseg.metrics import (
    BinaryMask,
    MetricRow,
    boundary_voxels,
    dice,
    evaluate_volume,
    hausdorff_mm,
    precision_recall,
    write_metric_report,
)
from hemiseg.volumes import LabelVolume

_FACES = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def boundary_oracle(mask) -> set:
    """Mask voxels with a face neighbor outside the mask or the volume."""
    mask = np.asarray(mask, dtype=bool)
    d, h, w = mask.shape
    out = set()
    for z, y, x in np.argwhere(mask):
        for dz, dy, dx in _FACES:
            nz, ny, nx = z + dz, y + dy, x + dx
            if not (0 <= nz < d and 0 <= ny < h and 0 <= nx < w) or not mask[nz, ny, nx]:
                out.add((int(z), int(y), int(x)))
                break
    return out


def hausdorff_oracle(a, b, spacing) -> float:
    """Exhaustive all-pairs boundary distance, worst case over both directions."""
    pa, pb = boundary_oracle(a), boundary_oracle(b)
    sd, sh, sw = spacing

    def directed_sq(src, dst):
        worst = 0.0
        for z1, y1, x1 in src:
            best = math.inf
            for z2, y2, x2 in dst:
                d2 = ((z1 - z2) * sd) ** 2 + ((y1 - y2) * sh) ** 2 + ((x1 - x2) * sw) ** 2
                if d2 < best:
                    best = d2
            if best > worst:
                worst = best
        return worst

    return math.sqrt(max(directed_sq(pa, pb), directed_sq(pb, pa)))


def _random_mask(rng, shape=(8, 8, 8), p=0.3):
    while True:
        m = rng.random(shape) < p
        if m.any():
            return m


def _single(shape, coord):
    m = np.zeros(shape, dtype=bool)
    m[coord] = True
    return m


# ----------------------------------------------------------------------
# dice
# ----------------------------------------------------------------------

def test_dice_identities():
    rng = np.random.default_rng(0)
    m = _random_mask(rng)
    assert dice(m, m) == 1.0
    assert dice(m, ~m) == 0.0
    assert dice(np.zeros((3, 3, 3), bool), np.zeros((3, 3, 3), bool)) == 1.0
    assert dice(m, np.zeros_like(m)) == 0.0


def test_dice_half_overlap_hand_case():
    a = np.zeros((1, 1, 4), bool)
    b = np.zeros((1, 1, 4), bool)
    a[0, 0, :2] = True
    b[0, 0, 1:3] = True
    assert dice(a, b) == 0.5


def test_dice_symmetry_and_mismatch():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = _random_mask(rng), _random_mask(rng)
        assert dice(a, b) == dice(b, a)
    with pytest.raises(ValueError, match="extents"):
        dice(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))


def test_dice_accepts_binary_mask_wrappers():
    lab = LabelVolume(labels=np.array([[[0, 1, 2, 2]]], dtype=np.uint8),
                      spacing=(1.0, 0.117, 0.117))
    brain = BinaryMask.brain(lab)
    contra = BinaryMask.contralateral(lab)
    np.testing.assert_array_equal(brain.mask[0, 0], [False, True, True, True])
    np.testing.assert_array_equal(contra.mask[0, 0], [False, False, True, True])
    assert brain.spacing == lab.spacing
    assert dice(brain, brain) == 1.0


# ----------------------------------------------------------------------
# boundaries
# ----------------------------------------------------------------------

def test_boundary_single_voxel_and_empty():
    m = _single((5, 5, 5), (2, 3, 1))
    np.testing.assert_array_equal(boundary_voxels(m), [[2, 3, 1]])
    assert boundary_voxels(np.zeros((4, 4, 4), bool)).shape == (0, 3)


def test_boundary_solid_cube_surface():
    m = np.zeros((5, 5, 5), bool)
    m[1:4, 1:4, 1:4] = True
    got = boundary_voxels(m)
    assert len(got) == 26
    assert (2, 2, 2) not in {tuple(c) for c in got}


def test_boundary_volume_edge_counts_as_outside():
    # a full volume is all boundary except its interior
    m = np.ones((4, 4, 4), bool)
    assert len(boundary_voxels(m)) == 64 - 8


def test_boundary_matches_set_oracle():
    rng = np.random.default_rng(2)
    for _ in range(25):
        m = _random_mask(rng, shape=(6, 7, 6), p=float(rng.uniform(0.1, 0.8)))
        got = {tuple(c) for c in boundary_voxels(m)}
        assert got == boundary_oracle(m)


# ----------------------------------------------------------------------
# hausdorff
# ----------------------------------------------------------------------

def test_hausdorff_identical_masks_zero():
    rng = np.random.default_rng(3)
    m = _random_mask(rng)
    assert hausdorff_mm(m, m, spacing=(1.0, 0.117, 0.117)) == 0.0


def test_hausdorff_single_step_distances():
    """One in-plane voxel step is one in-plane spacing unit; one slice step
    is one slice thickness."""
    sp = (1.0, 0.117, 0.117)
    a = _single((4, 4, 4), (1, 1, 1))
    inplane = _single((4, 4, 4), (1, 1, 2))
    through = _single((4, 4, 4), (2, 1, 1))
    got = hausdorff_mm(a, inplane, spacing=sp)
    assert got == hausdorff_oracle(a, inplane, sp)
    assert got == pytest.approx(0.117, abs=1e-12)
    got = hausdorff_mm(a, through, spacing=sp)
    assert got == hausdorff_oracle(a, through, sp)
    assert got == pytest.approx(1.0, abs=1e-15)


def test_hausdorff_anisotropic_hand_case():
    a = _single((6, 6, 6), (1, 2, 3))
    b = _single((6, 6, 6), (2, 4, 1))
    sp = (2.0, 3.0, 5.0)
    want = math.sqrt((1 * 2.0) ** 2 + (2 * 3.0) ** 2 + (2 * 5.0) ** 2)
    assert hausdorff_mm(a, b, spacing=sp) == pytest.approx(want, rel=1e-15)


def test_hausdorff_brute_equals_oracle_exactly():
    rng = np.random.default_rng(4)
    for trial in range(100):
        a = _random_mask(rng, p=float(rng.uniform(0.1, 0.6)))
        b = _random_mask(rng, p=float(rng.uniform(0.1, 0.6)))
        sp = tuple(float(s) for s in rng.uniform(0.1, 3.0, 3))
        assert hausdorff_mm(a, b, spacing=sp) == hausdorff_oracle(a, b, sp)


def test_hausdorff_edt_agrees_on_unit_lattice():
    rng = np.random.default_rng(5)
    for _ in range(30):
        a = _random_mask(rng)
        b = _random_mask(rng)
        sp = (1.0, 1.0, 1.0)
        assert (hausdorff_mm(a, b, spacing=sp, method="edt")
                == hausdorff_mm(a, b, spacing=sp, method="brute"))


def test_hausdorff_symmetry():
    rng = np.random.default_rng(6)
    for _ in range(10):
        a, b = _random_mask(rng), _random_mask(rng)
        sp = tuple(float(s) for s in rng.uniform(0.5, 2.0, 3))
        assert hausdorff_mm(a, b, spacing=sp) == hausdorff_mm(b, a, spacing=sp)


def test_hausdorff_spacing_handling():
    rng = np.random.default_rng(7)
    m = _random_mask(rng)
    with pytest.raises(ValueError, match="spacing is required"):
        hausdorff_mm(m, m)
    a = BinaryMask(m, spacing=(1.0, 1.0, 1.0))
    b = BinaryMask(m, spacing=(2.0, 1.0, 1.0))
    with pytest.raises(ValueError, match="spacings differ"):
        hausdorff_mm(a, b)
    # spacing rides along on the wrapper
    assert hausdorff_mm(a, BinaryMask(m, spacing=(1.0, 1.0, 1.0))) == 0.0


def test_hausdorff_empty_and_unknown_method():
    m = _single((3, 3, 3), (1, 1, 1))
    empty = np.zeros((3, 3, 3), bool)
    with pytest.raises(ValueError, match="empty"):
        hausdorff_mm(m, empty, spacing=(1, 1, 1))
    with pytest.raises(ValueError, match="empty"):
        hausdorff_mm(empty, m, spacing=(1, 1, 1))
    with pytest.raises(ValueError, match="unknown method"):
        hausdorff_mm(m, m, spacing=(1, 1, 1), method="fancy")


# ----------------------------------------------------------------------
# precision / recall
# ----------------------------------------------------------------------

def test_precision_recall_hand_cases():
    gt = np.zeros((1, 1, 8), bool)
    gt[0, 0, :5] = True          # 5 positives
    pred = np.zeros((1, 1, 8), bool)
    pred[0, 0, 3:6] = True       # TP=2 (3,4), FP=1 (5)
    prec, rec = precision_recall(pred, gt)
    assert prec == pytest.approx(2 / 3)
    assert rec == pytest.approx(2 / 5)
    assert precision_recall(gt, gt) == (1.0, 1.0)


def test_precision_recall_conventions():
    gt = _single((2, 2, 2), (0, 0, 0))
    empty = np.zeros((2, 2, 2), bool)
    assert precision_recall(empty, gt) == (0.0, 0.0)
    assert precision_recall(gt, empty) == (0.0, 0.0)
    with pytest.raises(ValueError, match="extents"):
        precision_recall(empty, np.zeros((2, 2, 3), bool))


def test_perfect_scores_iff_equal_masks():
    rng = np.random.default_rng(8)
    for _ in range(10):
        a = _random_mask(rng)
        b = _random_mask(rng)
        prec, rec = precision_recall(a, b)
        all_perfect = (dice(a, b) == 1.0 and prec == 1.0 and rec == 1.0)
        assert all_perfect == bool(np.array_equal(a, b))


# ----------------------------------------------------------------------
# per-volume evaluation
# ----------------------------------------------------------------------

def _phantom_labels(seed=0):
    from hemiseg.phantom import PhantomParams, generate_phantom
    _, lab = generate_phantom(PhantomParams(seed=seed))
    return lab


def test_evaluate_perfect_prediction():
    lab = _phantom_labels()
    rows = evaluate_volume(lab, lab)
    assert [r.region for r in rows] == ["brain", "contralateral_hemisphere"]
    for r in rows:
        assert (r.dice, r.hd_mm, r.precision, r.recall) == (1.0, 0.0, 1.0, 1.0)
        assert r.precision_defined


def test_evaluate_composes_from_single_mask_calls():
    gt = _phantom_labels(0)
    pred_labels = gt.labels.copy()
    pred_labels[10:14, 20:30, 20:44] = 0      # knock a chunk out
    pred = LabelVolume(labels=pred_labels, spacing=gt.spacing)
    rows = evaluate_volume(pred, gt)
    for row, (pm, gm) in zip(rows, [
        (pred.labels >= 1, gt.labels >= 1),
        (pred.labels == 2, gt.labels == 2),
    ]):
        prec, rec = precision_recall(pm, gm)
        assert row.dice == dice(pm, gm)
        assert row.hd_mm == hausdorff_mm(pm, gm, spacing=gt.spacing)
        assert (row.precision, row.recall) == (prec, rec)


def test_evaluate_slice_filter_full_equals_none():
    gt = _phantom_labels(1)
    pred_labels = gt.labels.copy()
    pred_labels[12:16] = 0
    pred = LabelVolume(labels=pred_labels, spacing=gt.spacing)
    unfiltered = evaluate_volume(pred, gt)
    everything = evaluate_volume(pred, gt, slice_filter=range(gt.extents[0]))
    for a, b in zip(unfiltered, everything):
        assert a == b


def test_evaluate_slice_filter_excludes_errors():
    gt = _phantom_labels(2)
    pred_labels = gt.labels.copy()
    pred_labels[15] = 0                        # destroy one slice
    pred = LabelVolume(labels=pred_labels, spacing=gt.spacing)
    assert evaluate_volume(pred, gt)[0].dice < 1.0
    keep = [z for z in range(gt.extents[0]) if z != 15]
    rows = evaluate_volume(pred, gt, slice_filter=keep)
    assert rows[0].dice == 1.0 and rows[0].hd_mm == 0.0


def test_evaluate_validation():
    gt = _phantom_labels(3)
    other = LabelVolume(labels=gt.labels[:16], spacing=gt.spacing)
    with pytest.raises(ValueError, match="extents"):
        evaluate_volume(other, gt)
    respaced = LabelVolume(labels=gt.labels, spacing=(2.0, 0.117, 0.117))
    with pytest.raises(ValueError, match="spacings"):
        evaluate_volume(respaced, gt)
    with pytest.raises(ValueError, match="slice_filter"):
        evaluate_volume(gt, gt, slice_filter=[0, 99])


def test_metric_report_layout(tmp_path):
    rows = [
        ("p0", MetricRow("brain", 0.9, 1.5, 0.8, 0.7)),
        ("p1", MetricRow("brain", 0.8, 2.5, 0.6, 0.5)),
        ("p0", MetricRow("contralateral_hemisphere", 1.0, 0.0, 1.0, 1.0)),
    ]
    path = str(tmp_path / "metrics.csv")
    write_metric_report(rows, path)
    lines = open(path).read().strip().split("\n")
    assert lines[0] == "volume_id,region,dice,hd_mm,precision,recall,precision_defined"
    assert lines[1].startswith("p0,brain,0.900000,1.500000,")
    body = "\n".join(lines)
    # mean and sample-sd summary rows per region
    assert "mean,brain,0.850000,2.000000" in body
    sd = np.std([0.9, 0.8], ddof=1)
    assert f"std,brain,{sd:.6f}" in body
    # a single contralateral row has no defined sample sd
    assert "std,contralateral_hemisphere,nan" in body
