"""Segmentation overlap metrics and predicted-vs-actual evaluation metrics.

Undefined results (empty masks, zero variance, too-small groups) are returned
as ``None`` rather than 0 or NaN so that reports can show them as absent.
"""

from __future__ import annotations

import csv
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricSample:
    predicted: float
    actual: float
    class_id: int = 0
    sample_id: str = ""

    def __post_init__(self):
        for name in ("predicted", "actual"):
            v = getattr(self, name)
            if not (np.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} must be finite and within [0, 1]")


def _same_shape(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dsc(mask_a, mask_b) -> float | None:
    """Dice similarity ``2|A n B| / (|A| + |B|)``; None when both masks are empty."""
    a, b = _same_shape(mask_a, mask_b)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return None
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


def boundary(mask) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask (or the grid)."""
    m = np.asarray(mask, dtype=bool)
    struct = ndimage.generate_binary_structure(m.ndim, 1)
    inner = ndimage.binary_erosion(m, structure=struct, border_value=0)
    return m & ~inner


def default_tolerance(spacing) -> float:
    return float(max(spacing))


def nsd(mask_a, mask_b, spacing=None, tolerance: float | None = None) -> float | None:
    """Normalized surface distance at ``tolerance`` mm.

    Counts boundary voxels of each mask whose centre lies within ``tolerance``
    of the nearest boundary voxel centre of the other mask, divided by the
    total number of boundary voxels of both masks.
    """
    a, b = _same_shape(mask_a, mask_b)
    if not a.any() or not b.any():
        return None
    spacing = tuple(float(s) for s in (spacing if spacing is not None else (1.0,) * a.ndim))
    if len(spacing) != a.ndim:
        raise ValueError("spacing must have one entry per axis")
    tol = default_tolerance(spacing) if tolerance is None else float(tolerance)
    ba, bb = boundary(a), boundary(b)
    dist_to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    within = int((dist_to_b[ba] <= tol).sum()) + int((dist_to_a[bb] <= tol).sum())
    return within / (int(ba.sum()) + int(bb.sum()))


def _xy(samples):
    p = np.array([s.predicted for s in samples], dtype=np.float64)
    a = np.array([s.actual for s in samples], dtype=np.float64)
    return p, a


def pearson(x, y) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.size != y.size:
        return None
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """1-based ranks, tied values receive the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    xs = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float | None:
    return pearson(average_ranks(x), average_ranks(y))


def lcc(samples) -> float | None:
    return pearson(*_xy(samples))


def srocc(samples) -> float | None:
    return spearman(*_xy(samples))


def relevant_worst(actual, k: int) -> set[int]:
    """Relevance rule for MAP@k: the ``k`` samples with the lowest actual DSC.

    Ties at the cutoff are resolved by input position.
    """
    order = np.argsort(np.asarray(actual), kind="mergesort")
    return set(int(i) for i in order[:k])


def average_precision_at_k(predicted, relevant: set[int], k: int) -> float:
    # rank ascending by predicted DSC: worst-looking first
    order = np.argsort(np.asarray(predicted), kind="mergesort")[:k]
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if int(idx) in relevant:
            hits += 1
            total += hits / rank
    return total / min(k, len(relevant)) if relevant else 0.0


def map_at_k(samples, k: int, relevance=relevant_worst) -> float | None:
    """Mean over classes of AP@k for retrieving the worst labels by predicted DSC."""
    if k < 1:
        raise ValueError("k must be positive")
    groups: dict[int, list[MetricSample]] = defaultdict(list)
    for s in samples:
        groups[s.class_id].append(s)
    aps = []
    for cid in sorted(groups):
        g = groups[cid]
        if len(g) < k:
            warnings.warn(f"class {cid}: {len(g)} samples < k={k}; group skipped", stacklevel=2)
            continue
        p, a = _xy(g)
        aps.append(average_precision_at_k(p, relevance(a, k), k))
    if not aps:
        return None
    return float(np.mean(aps))


def evaluate(samples, ks=(5, 10)) -> dict[str, float | None]:
    out = {"lcc": lcc(samples), "srocc": srocc(samples)}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for k in ks:
            out[f"map{k}"] = map_at_k(samples, k)
    return out


def write_samples_csv(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "class_id", "predicted", "actual"])
        for s in samples:
            w.writerow([s.sample_id, s.class_id, repr(s.predicted), repr(s.actual)])
