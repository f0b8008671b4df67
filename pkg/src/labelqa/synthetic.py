"""Synthetic fixtures: CT-like phantom volumes and realizable toy DSC tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import GRID, N_CELL_FEATURES, EmbeddingProvider, cell_features
from .training import EncodedSet
from .volume_io import SLICE_SIZE, LabeledVolume

DEFAULT_CLASSES = {
    1: "liver", 2: "spleen", 3: "left kidney", 4: "right kidney",
    5: "pancreas", 6: "aorta", 7: "stomach", 8: "gallbladder",
}

# mean HU per organ; body soft tissue ~40, air -1000
_ORGAN_HU = {1: 60, 2: 50, 3: 150, 4: 150, 5: 40, 6: 180, 7: 20, 8: 10}


def make_phantom(volume_id: str, shape=(48, 48, 32), classes=None, seed: int = 0,
                 spacing=(1.5, 1.5, 3.0), noise_hu: float = 15.0) -> LabeledVolume:
    """Ellipsoidal organs inside an elliptic body cylinder, with Gaussian HU noise.

    Each class gets one ellipsoid whose axial extent spans several slices;
    later classes overwrite earlier ones where they overlap.
    """
    classes = dict(classes or DEFAULT_CLASSES)
    rng = np.random.default_rng(seed)
    X, Y, Z = shape
    gx, gy, gz = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
    body = ((gx - X / 2) / (0.46 * X)) ** 2 + ((gy - Y / 2) / (0.42 * Y)) ** 2 <= 1.0
    image = np.where(body, 40.0, -1000.0)
    labels = np.zeros(shape, dtype=np.uint16)
    for cid in sorted(classes):
        r = rng.uniform([0.10 * X, 0.10 * Y, 0.18 * Z], [0.20 * X, 0.20 * Y, 0.35 * Z])
        c = rng.uniform([0.28 * X, 0.28 * Y, r[2] + 1], [0.72 * X, 0.72 * Y, Z - r[2] - 1])
        ell = ((gx - c[0]) / r[0]) ** 2 + ((gy - c[1]) / r[1]) ** 2 + ((gz - c[2]) / r[2]) ** 2 <= 1
        ell &= body
        labels[ell] = cid
        image[ell] = _ORGAN_HU.get(cid, 30 + 10 * cid)
    image = image + rng.normal(0.0, noise_hu, size=shape)
    return LabeledVolume(image=np.clip(np.rint(image), -1024, 3071).astype(np.int16),
                         ground_truth=labels, spacing=spacing, id=volume_id, classes=classes)


def make_phantoms(n: int, shape=(48, 48, 32), classes=None, seed: int = 0, prefix="phantom"):
    return [make_phantom(f"{prefix}{i:03d}", shape, classes, seed=seed * 100_003 + i)
            for i in range(n)]


# toy slice tasks ---------------------------------------------------------------

def _toy_slice(rng, size: int = SLICE_SIZE, grid: int = 8, skew: float = 0.0):
    """Piecewise-constant image on a ``grid`` x ``grid`` lattice and a rectangular mask.

    ``skew > 0`` draws intensities and rectangle sides from Beta(1 + skew, 1),
    pushing the toy target towards high values.
    """
    cell = size // grid
    levels = rng.beta(1.0 + skew, 1.0, size=(grid, grid)).astype(np.float32)
    pixels = np.kron(levels, np.ones((cell, cell), dtype=np.float32))
    mask = np.zeros((size, size), dtype=np.uint8)
    lo, hi = size // 12, size * 3 // 4
    h, w = (lo + np.floor(rng.beta(1.0 + skew, 1.0, size=2) * (hi - lo))).astype(int)
    r0 = rng.integers(0, size - h + 1)
    c0 = rng.integers(0, size - w + 1)
    mask[r0:r0 + h, c0:c0 + w] = 1
    return pixels, mask


# reference range of the global mask-area fraction drawn by _toy_slice
_AREA_MAX = (3 / 4) ** 2


def toy_targets(feats: np.ndarray, class_ids, class_dependent: bool = False) -> np.ndarray:
    """Affine DSC targets from two cell-feature aggregates: mask area and mean intensity.

    With ``class_dependent`` the area term is reversed for even class ids, so
    the target cannot be predicted without knowing the class.
    """
    feats = np.atleast_2d(feats)
    n = feats.shape[1] // 5
    mean_int = feats[:, :n].mean(axis=1)
    area = np.minimum(feats[:, n:2 * n].mean(axis=1) / _AREA_MAX, 1.0)
    if class_dependent:
        even = np.asarray(class_ids) % 2 == 0
        area = np.where(even, 1.0 - area, area)
    return 0.1 + 0.8 * (0.6 * area + 0.4 * mean_int)


@dataclass
class ToyFeatures:
    """Raw cell features of toy slices; encoding and targets are derived cheaply."""

    feats: np.ndarray
    class_ids: np.ndarray
    volume_ids: np.ndarray

    def encoded(self, provider: EmbeddingProvider, class_dependent: bool = False) -> EncodedSet:
        f1 = (self.feats @ provider._proj.T).astype(np.float32)
        return EncodedSet(f1=f1, class_ids=self.class_ids.copy(),
                          targets=toy_targets(self.feats, self.class_ids, class_dependent),
                          volume_ids=self.volume_ids.copy())


def toy_features(n: int, seed: int = 0, class_ids=(1,), skew: float = 0.0,
                 volume_size: int = 50) -> ToyFeatures:
    """Draw ``n`` random toy slices and keep their cell features.

    Samples are grouped ``volume_size`` at a time under shared volume ids.
    """
    rng = np.random.default_rng(seed)
    class_ids = np.asarray(list(class_ids), dtype=np.int64)
    feats = np.empty((n, N_CELL_FEATURES * GRID * GRID), dtype=np.float64)
    for k in range(n):
        pixels, mask = _toy_slice(rng, skew=skew)
        feats[k] = cell_features(pixels, mask)
    cids = class_ids[rng.integers(class_ids.size, size=n)]
    vols = np.array([f"toy{seed}_{i // volume_size:05d}" for i in range(n)], dtype=object)
    return ToyFeatures(feats, cids, vols)


def toy_task(n: int, provider: EmbeddingProvider, seed: int = 0, class_ids=(1,),
             class_dependent: bool = False, skew: float = 0.0,
             volume_size: int = 50) -> EncodedSet:
    """Encoded toy slices with realizable DSC targets."""
    return toy_features(n, seed, class_ids, skew, volume_size).encoded(provider, class_dependent)
