"""Volume domain types, intensity standardization, and dataset bookkeeping.

A VolumeGrid is a scalar field over a regular anisotropic grid; a LabelVolume
holds the mutually exclusive region classes 0 = background, 1 = ipsilateral
hemisphere, 2 = contralateral hemisphere.  Spacing is (slice, row, column)
in mm and rides along so distance metrics can work in physical units.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

NUM_CLASSES = 3


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive values in mm, got {spacing}")
    return spacing


@dataclass
class VolumeGrid:
    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # raw file header carried through reads so writes can keep orientation
    # fields this library never interprets
    meta: bytes | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"volume values must be (D, H, W), got shape {self.values.shape}")
        if self.values.size == 0:
            raise ValueError("volume has zero voxels")
        self.spacing = _check_spacing(self.spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class LabelVolume:
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: bytes | None = None

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be (D, H, W), got shape {self.labels.shape}")
        if self.labels.size == 0:
            raise ValueError("label volume has zero voxels")
        bad = int((self.labels >= NUM_CLASSES).sum())
        if bad:
            raise ValueError(f"{bad} voxels carry labels outside 0..{NUM_CLASSES - 1}")
        self.spacing = _check_spacing(self.spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def brain_mask(self) -> np.ndarray:
        return self.labels >= 1


def standardize(grid: VolumeGrid) -> VolumeGrid:
    """Shift/scale to zero mean and unit population variance over all voxels."""
    v = grid.values
    mean = v.mean()
    var = v.var()
    if var == 0.0:
        raise ValueError("cannot standardize a constant volume (zero variance)")
    return VolumeGrid(values=(v - mean) / np.sqrt(var), spacing=grid.spacing,
                      meta=grid.meta)


def derive_regions(brain_mask: np.ndarray, contra_mask: np.ndarray,
                   spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    """Split a brain mask into ipsilateral (1) and contralateral (2) regions."""
    brain = np.asarray(brain_mask, dtype=bool)
    contra = np.asarray(contra_mask, dtype=bool)
    if brain.shape != contra.shape:
        raise ValueError(f"mask shapes differ: {brain.shape} vs {contra.shape}")
    outside = int((contra & ~brain).sum())
    if outside:
        raise ValueError(f"{outside} contralateral voxels lie outside the brain mask")
    labels = np.zeros(brain.shape, dtype=np.uint8)
    labels[brain] = 1
    labels[contra] = 2
    return LabelVolume(labels=labels, spacing=spacing)


@dataclass
class ManifestEntry:
    id: str
    group: str
    volume_path: str
    labels_path: str


def write_manifest(entries: list[ManifestEntry], path: str) -> None:
    """Write a dataset manifest CSV; stored paths are relative to it."""
    base = os.path.dirname(os.path.abspath(path)) or "."
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "group", "volume_path", "labels_path"])
        for e in entries:
            writer.writerow([
                e.id, e.group,
                os.path.relpath(os.path.abspath(e.volume_path), base),
                os.path.relpath(os.path.abspath(e.labels_path), base),
            ])


def read_manifest(path: str) -> list[ManifestEntry]:
    base = os.path.dirname(os.path.abspath(path)) or "."
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "group", "volume_path", "labels_path"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"manifest {path} must have columns {sorted(required)}")
        for row in reader:
            entries.append(ManifestEntry(
                id=row["id"], group=row["group"],
                volume_path=os.path.join(base, row["volume_path"]),
                labels_path=os.path.join(base, row["labels_path"]),
            ))
    if not entries:
        raise ValueError(f"manifest {path} lists no volumes")
    return entries


def split_dataset(entries: list[ManifestEntry], train_per_group: int,
                  val_per_group: int, seed: int = 0):
    """Per-group shuffled split into (train, val, test) lists.

    Each group contributes exactly train_per_group training and val_per_group
    validation items; the remainder goes to test.  Deterministic in seed.
    """
    if train_per_group < 1 or val_per_group < 0:
        raise ValueError("need train_per_group >= 1 and val_per_group >= 0")
    groups: dict[str, list[ManifestEntry]] = {}
    for e in entries:
        groups.setdefault(e.group, []).append(e)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    need = train_per_group + val_per_group
    for name in sorted(groups):
        members = groups[name]
        if len(members) < need:
            raise ValueError(
                f"group '{name}' has {len(members)} items but the split "
                f"needs {need} (train {train_per_group} + val {val_per_group})"
            )
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        train.extend(shuffled[:train_per_group])
        val.extend(shuffled[train_per_group:need])
        test.extend(shuffled[need:])
    return train, val, test
