"""Deep-supervision training objective: cross-entropy plus soft Dice.

Both losses treat the one-hot target as a constant and register a single
fused op on the autodiff tape, so the gradient closures below are the
analytic derivatives of the written-out formulas.  Conventions:

  CE   = -(1/(Nv*C)) * sum_i sum_c p[i,c] * log(max(q[i,c], clamp_floor))
  Dice = 1 - (2/C) * sum_c [ sum_i p*q / (sum_i p^2 + q^2 + smooth) ]

with Nv the number of voxels (batch included), C the class count, the log
clamp keeping CE finite on boundary probabilities and the smoothing term
(denominator only) keeping empty classes finite.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, record
from .ops import elementwise_add

__all__ = [
    "CLAMP_FLOOR",
    "DICE_SMOOTH",
    "one_hot",
    "cross_entropy",
    "dice_loss",
    "downsample_labels",
    "deep_supervision_loss",
]

CLAMP_FLOOR = 1e-7
DICE_SMOOTH = 1e-6


def one_hot(labels: np.ndarray, num_classes: int = 3) -> np.ndarray:
    """(D,H,W) integer labels -> (1, C, D, H, W) float64 one-hot target."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"labels must be 3D (D,H,W), got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    p = np.zeros((1, num_classes) + labels.shape, dtype=np.float64)
    for c in range(num_classes):
        p[0, c] = labels == c
    return p


def _check_target(q: Tensor, p: np.ndarray, op: str) -> None:
    if q.data.ndim != 5:
        raise ValueError(f"{op} prediction must be 5D (N,C,D,H,W), got {tuple(q.shape)}")
    if tuple(q.shape) != tuple(p.shape):
        raise ValueError(f"{op} shape mismatch: prediction {tuple(q.shape)} vs "
                         f"target {tuple(p.shape)}")


def cross_entropy(q: Tensor, p: np.ndarray, clamp_floor: float = CLAMP_FLOOR) -> Tensor:
    """Mean cross-entropy between probability maps, normalized by Nv*C."""
    _check_target(q, p, "cross_entropy")
    n, c = q.shape[0], q.shape[1]
    nv = n * int(np.prod(q.shape[2:]))
    qc = np.maximum(q.data, clamp_floor)
    value = -(p * np.log(qc)).sum() / (nv * c)
    y = Tensor(value)

    def backward_fn(gout):
        g = np.where(q.data > clamp_floor, -p / qc, 0.0) / (nv * c)
        return (g * gout,)

    return record((q,), y, backward_fn)


def dice_loss(q: Tensor, p: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft multi-class Dice loss with denominator-only smoothing."""
    _check_target(q, p, "dice_loss")
    c = q.shape[1]
    axes = (0, 2, 3, 4)
    num = (p * q.data).sum(axis=axes)            # per class
    den = (p * p + q.data * q.data).sum(axis=axes) + smooth
    value = 1.0 - (2.0 / c) * (num / den).sum()
    y = Tensor(value)

    def backward_fn(gout):
        shaped = lambda v: v[None, :, None, None, None]
        g = -(2.0 / c) * (p * shaped(den) - shaped(num) * 2.0 * q.data) / shaped(den * den)
        return (g * gout,)

    return record((q,), y, backward_fn)


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Majority label over factor^3 blocks; ties resolve to the lower class."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"labels must be 3D, got shape {labels.shape}")
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return labels.copy()
    d, h, w = labels.shape
    if d % factor or h % factor or w % factor:
        raise ValueError(f"extents {labels.shape} not divisible by factor {factor}")
    blocks = labels.reshape(d // factor, factor, h // factor, factor, w // factor, factor)
    num_classes = int(labels.max()) + 1
    counts = np.stack([(blocks == cls).sum(axis=(1, 3, 5)) for cls in range(num_classes)])
    # argmax returns the first maximum, which is the lower class on ties
    return counts.argmax(axis=0).astype(labels.dtype)


def deep_supervision_loss(output, labels, *,
                          clamp_floor: float = CLAMP_FLOOR,
                          smooth: float = DICE_SMOOTH,
                          return_terms: bool = False):
    """Unweighted sum of CE + Dice over the main head and every aux head.

    labels is a LabelVolume or a (D, H, W) integer array.  Each aux head is
    scored against the majority-downsampled labels at the factor implied by
    its resolution.  With ``return_terms`` the per-head CE/Dice values are
    returned alongside the scalar loss tensor.
    """
    labels = np.asarray(getattr(labels, "labels", labels))
    heads = [(output.main_probs, 1)]
    d = labels.shape[0]
    for aux in output.aux_probs:
        da = aux.shape[2]
        if da < 1 or d % da:
            raise ValueError(f"aux head depth {da} does not divide label depth {d}")
        factor = d // da
        expected = tuple(e // factor for e in labels.shape)
        if tuple(aux.shape[2:]) != expected:
            raise ValueError(
                f"aux head spatial shape {tuple(aux.shape[2:])} does not match "
                f"labels {labels.shape} at downsample factor {factor}")
        heads.append((aux, factor))

    total = None
    ce_sum = 0.0
    dice_sum = 0.0
    for probs, factor in heads:
        target = one_hot(downsample_labels(labels, factor), num_classes=probs.shape[1])
        ce = cross_entropy(probs, target, clamp_floor)
        dc = dice_loss(probs, target, smooth)
        ce_sum += ce.item()
        dice_sum += dc.item()
        head_loss = elementwise_add(ce, dc)
        total = head_loss if total is None else elementwise_add(total, head_loss)
    if return_terms:
        return total, {"ce": ce_sum, "dice": dice_sum}
    return total
