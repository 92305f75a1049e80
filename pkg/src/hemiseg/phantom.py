"""Synthetic lesion phantoms: an ellipsoidal brain split at a sagittal plane.

Each phantom is an ellipsoid of elevated intensity on a dark background,
split into ipsilateral (class 1) and contralateral (class 2) halves, with an
optional hyperintense spherical lesion strictly inside the ipsilateral half
and additive Gaussian noise.  Geometry and intensities jitter per seed so a
batch of phantoms behaves like a small dataset.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volumes import LabelVolume, VolumeGrid, derive_regions

# fraction of each extent used as the ellipsoid semi-axis, before jitter
_SEMI_AXIS_FRACTIONS = (0.40, 0.42, 0.44)
_MAX_LESION_ATTEMPTS = 200


@dataclass(frozen=True)
class PhantomParams:
    extents: tuple[int, int, int] = (32, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 0.117, 0.117)
    ipsi_mean: float = 1.0
    contra_mean: float = 0.8
    hemisphere_sigma: float = 0.05
    background_mean: float = 0.0
    lesion_radius_range: tuple[float, float] = (3.0, 6.0)
    lesion_intensity_shift: float = 0.6
    lesion_probability: float = 0.7
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if len(self.extents) != 3 or any(int(e) < 1 for e in self.extents):
            raise ValueError(f"extents must be 3 positive ints, got {self.extents}")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ValueError(f"lesion_probability must be in [0, 1], "
                             f"got {self.lesion_probability}")
        lo, hi = self.lesion_radius_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"bad lesion_radius_range {self.lesion_radius_range}")
        if self.hemisphere_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("sigmas must be nonnegative")


def _ellipsoid_mask(extents, center, semi_axes) -> np.ndarray:
    grids = np.ogrid[:extents[0], :extents[1], :extents[2]]
    acc = np.zeros(extents)
    for g, c, a in zip(grids, center, semi_axes):
        acc = acc + ((g - c) / a) ** 2
    return acc <= 1.0


def _place_lesion(rng, ipsi_mask: np.ndarray, radius: float) -> np.ndarray:
    """Rejection-sample a sphere center so the whole ball is ipsilateral."""
    coords = np.argwhere(ipsi_mask)
    extents = ipsi_mask.shape
    grids = np.ogrid[:extents[0], :extents[1], :extents[2]]
    for _ in range(_MAX_LESION_ATTEMPTS):
        cz, cy, cx = coords[rng.integers(len(coords))]
        acc = np.zeros(extents)
        for g, c in zip(grids, (cz, cy, cx)):
            acc = acc + (g - c) ** 2
        ball = acc <= radius ** 2
        if (ball & ~ipsi_mask).sum() == 0:
            return ball
    raise ValueError(
        f"could not place a lesion of radius {radius:.2f} inside the "
        f"ipsilateral hemisphere after {_MAX_LESION_ATTEMPTS} attempts"
    )


def generate_phantom(params: PhantomParams, with_parts: bool = False):
    """Build one (VolumeGrid, LabelVolume) pair, deterministic in the seed.

    with_parts additionally returns a dict holding the lesion mask and the
    jittered intensity means, for tests that need the construction details.
    """
    rng = np.random.default_rng(params.seed)
    extents = tuple(int(e) for e in params.extents)

    base_center = tuple((e - 1) / 2.0 for e in extents)
    center = tuple(c + j for c, j in
                   zip(base_center, rng.uniform(-0.02, 0.02, 3) * np.array(extents)))
    axis_scale = rng.uniform(0.92, 1.0, 3)
    semi_axes = tuple(f * e * s for f, e, s in
                      zip(_SEMI_AXIS_FRACTIONS, extents, axis_scale))
    for e, c, a in zip(extents, center, semi_axes):
        if c - a < 1.0 or c + a > e - 2.0:
            raise ValueError(
                f"extents {extents} are too small to contain the ellipsoid "
                f"(semi-axes {tuple(round(x, 2) for x in semi_axes)})"
            )

    brain = _ellipsoid_mask(extents, center, semi_axes)
    split = extents[2] // 2
    ipsi = brain.copy()
    ipsi[:, :, :split] = False
    contra = brain & ~ipsi
    labels = derive_regions(brain, contra, spacing=params.spacing)

    ipsi_mean = params.ipsi_mean + rng.normal(0.0, params.hemisphere_sigma)
    contra_mean = params.contra_mean + rng.normal(0.0, params.hemisphere_sigma)
    values = np.full(extents, params.background_mean)
    values[ipsi] = ipsi_mean
    values[contra] = contra_mean

    lesion = np.zeros(extents, dtype=bool)
    if rng.random() < params.lesion_probability:
        radius = rng.uniform(*params.lesion_radius_range)
        lesion = _place_lesion(rng, ipsi, radius)
        values[lesion] += params.lesion_intensity_shift

    if params.noise_sigma > 0:
        values = values + rng.normal(0.0, params.noise_sigma, extents)

    # quantize to float32 so file storage roundtrips bit-exactly
    values = values.astype(np.float32).astype(np.float64)
    grid = VolumeGrid(values=values, spacing=params.spacing)
    if with_parts:
        parts = {"lesion": lesion, "ipsi_mean": ipsi_mean, "contra_mean": contra_mean}
        return grid, labels, parts
    return grid, labels
