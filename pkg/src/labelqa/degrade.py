"""Quality-labelled training data from degraded ground-truth masks.

Candidate masks are produced from ground truth by seeded corruptions
(erosion, dilation, component dropping, boundary noise, shifts and a decaying
"checkpoint" schedule). Every emitted slice carries its true per-slice DSC.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .metrics import dsc
from .volume_io import (DEFAULT_MARGIN, SLICE_SIZE, LabeledVolume, SlicePair,
                        preprocess_arrays, slices_containing)

log = logging.getLogger(__name__)

KINDS = ("erode", "dilate", "drop_components", "boundary_noise", "shift", "checkpoint_schedule")

# kind -> (min, max, integer?)
SEVERITY_RANGE = {
    "erode": (0, 64, True),
    "dilate": (0, 64, True),
    "drop_components": (0.0, 1.0, False),
    "boundary_noise": (0.0, 1.0, False),
    "shift": (0, 256, True),
    "checkpoint_schedule": (1, 10_000, True),
}


class DegradationError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    severity: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_RANGE:
            raise DegradationError(f"unknown degradation kind {self.kind!r}")
        lo, hi, integral = SEVERITY_RANGE[self.kind]
        if not lo <= self.severity <= hi:
            raise DegradationError(f"{self.kind}: severity {self.severity} outside [{lo}, {hi}]")
        if integral and float(self.severity) != int(self.severity):
            raise DegradationError(f"{self.kind}: severity must be an integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthesisConfig:
    severity_grid: dict[str, list] = field(default_factory=lambda: {
        "erode": [0, 1, 2, 3, 5, 8],
        "dilate": [1, 2, 3, 5],
        "checkpoint_schedule": [10, 20, 30, 40, 50, 100, 200, 300, 400, 500],
    })
    target_bins: int = 10
    samples_per_bin: int = 100
    seed: int = 0
    margin: int = DEFAULT_MARGIN
    size: int = SLICE_SIZE

    def __post_init__(self):
        if self.target_bins < 2:
            raise ValueError("target_bins must be >= 2")
        if self.samples_per_bin < 1:
            raise ValueError("samples_per_bin must be >= 1")

    def specs(self) -> list[tuple[str, float]]:
        return [(k, s) for k in sorted(self.severity_grid) for s in self.severity_grid[k]]


def box_structure(ndim: int) -> np.ndarray:
    return np.ones((3,) * ndim, dtype=bool)


def cell_seed(base_seed: int, *parts) -> int:
    """Stable per-cell seed: identical inputs give identical seeds on every platform."""
    key = "|".join(str(p) for p in parts).encode()
    return int(np.random.SeedSequence([base_seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(key)])
               .generate_state(1, dtype=np.uint64)[0])


def _erode(m, t):
    if t == 0:
        return m.copy()
    return ndimage.binary_erosion(m, structure=box_structure(m.ndim), iterations=int(t),
                                  border_value=0)


def _dilate(m, t):
    if t == 0:
        return m.copy()
    return ndimage.binary_dilation(m, structure=box_structure(m.ndim), iterations=int(t))


def _drop_components(m, frac, rng):
    lab, n = ndimage.label(m, structure=box_structure(m.ndim))
    n_drop = int(np.floor(frac * n + 0.5))
    if n_drop == 0:
        return m.copy()
    drop = rng.choice(np.arange(1, n + 1), size=n_drop, replace=False)
    return m & ~np.isin(lab, drop)


def _boundary_noise(m, p, rng):
    st = box_structure(m.ndim)
    band = ndimage.binary_dilation(m, structure=st) & ~ndimage.binary_erosion(
        m, structure=st, border_value=0)
    flip = band & (rng.random(m.shape) < p)
    return m ^ flip


def _shift(m, t, rng):
    out = np.zeros_like(m)
    if t == 0:
        return m.copy()
    axis = int(rng.integers(m.ndim))
    sign = 1 if rng.random() < 0.5 else -1
    t = int(t)
    if t >= m.shape[axis]:
        return out
    src = [slice(None)] * m.ndim
    dst = [slice(None)] * m.ndim
    if sign > 0:
        src[axis] = slice(0, m.shape[axis] - t)
        dst[axis] = slice(t, None)
    else:
        src[axis] = slice(t, None)
        dst[axis] = slice(0, m.shape[axis] - t)
    out[tuple(dst)] = m[tuple(src)]
    return out


def checkpoint_strengths(epoch: float) -> tuple[float, float, int]:
    """Corruption strengths for a virtual training epoch: (flip prob, drop fraction, erosion).

    Early epochs look like an immature model (heavy noise, missing parts,
    shrunken masks); strengths decay towards zero as the epoch grows.
    """
    e = float(epoch)
    return min(0.9, 6.0 / e), min(1.0, 3.0 / e), int(round(20.0 / e))


def apply_degradation(mask, spec: DegradationSpec) -> np.ndarray:
    """Return a corrupted copy of a binary mask; grid shape is never changed.

    A mask fully erased by the corruption is returned as an all-zero grid; use
    ``not out.any()`` as the empty-mask flag.
    """
    m = np.asarray(mask, dtype=bool)
    if spec.kind in ("erode", "shift", "drop_components") and not m.any():
        raise DegradationError(f"{spec.kind} needs a non-empty mask")
    rng = np.random.default_rng(spec.seed)
    s = spec.severity
    if spec.kind == "erode":
        out = _erode(m, s)
    elif spec.kind == "dilate":
        out = _dilate(m, s)
    elif spec.kind == "drop_components":
        out = _drop_components(m, s, rng)
    elif spec.kind == "boundary_noise":
        out = _boundary_noise(m, s, rng)
    elif spec.kind == "shift":
        out = _shift(m, s, rng)
    else:
        p, frac, t = checkpoint_strengths(s)
        out = _erode(m, t)
        out = _boundary_noise(out, p, rng) if out.any() else out
        out = _drop_components(out, frac, rng) if out.any() else out
    if m.any() and not out.any():
        log.debug("%s severity %s erased the mask", spec.kind, s)
    return out


def synthesize_volume(volume: LabeledVolume, config: SynthesisConfig,
                      class_ids=None) -> list[SlicePair]:
    if volume.ground_truth is None:
        raise ValueError(f"{volume.id}: ground truth required for synthesis")
    gt = volume.ground_truth
    classes = sorted(class_ids if class_ids is not None else volume.classes)
    out = []
    for cid in classes:
        truth = gt == cid
        present = slices_containing(volume, cid, "ground_truth")
        if not present:
            continue
        for kind, sev in config.specs():
            seed = cell_seed(config.seed, volume.id, cid, kind, sev)
            spec = DegradationSpec(kind, sev, seed)
            cand = apply_degradation(truth, spec)
            for z in present:
                t2 = volume.slice_of(truth, z)
                c2 = volume.slice_of(cand, z)
                pixels, mask, empty = preprocess_arrays(volume.slice_of(volume.image, z), c2,
                                                        config.margin, config.size)
                out.append(SlicePair(pixels=pixels, mask=mask, class_id=int(cid),
                                     true_dsc=dsc(c2, t2), volume_id=volume.id,
                                     slice_index=int(z), empty_mask=empty,
                                     meta={"degradation": spec.to_dict()}))
    return out


def synthesize_dataset(volumes, config: SynthesisConfig) -> list[SlicePair]:
    """Degrade every (volume, class, severity) cell and emit per-slice DSC-labelled pairs.

    Only slices where the class is present in ground truth are emitted, so the
    per-slice DSC is always defined (empty candidate slices give DSC 0).
    """
    volumes = list(volumes)
    all_classes = sorted({c for v in volumes for c in v.classes})
    for cid in all_classes:
        if not any(v.ground_truth is not None and (v.ground_truth == cid).any() for v in volumes):
            log.warning("class %d is empty in every volume; skipped", cid)
    pairs = []
    for v in volumes:
        pairs.extend(synthesize_volume(v, config))
    return pairs


def balanced_indices(dsc_values, config: SynthesisConfig) -> np.ndarray:
    """Indices realising a flat DSC histogram over ``target_bins`` equal bins on [0, 1]."""
    x = np.asarray(dsc_values, dtype=np.float64)
    bins = config.target_bins
    b = np.minimum((x * bins).astype(np.int64), bins - 1)
    rng = np.random.default_rng(config.seed)
    chosen = []
    for k in range(bins):
        members = np.flatnonzero(b == k)
        if members.size == 0:
            log.warning("DSC bin %d/%d has no source samples; left empty", k, bins)
            continue
        n = config.samples_per_bin
        if members.size >= n:
            pick = rng.choice(members, size=n, replace=False)
        else:
            pick = np.concatenate([members, rng.choice(members, size=n - members.size,
                                                       replace=True)])
        chosen.append(pick)
    if not chosen:
        return np.zeros(0, dtype=np.int64)
    idx = np.concatenate(chosen)
    return idx[rng.permutation(idx.size)]


def resample_balanced(pairs, config: SynthesisConfig) -> list[SlicePair]:
    if any(p.true_dsc is None for p in pairs):
        raise ValueError("every pair needs a true_dsc to be resampled")
    idx = balanced_indices([p.true_dsc for p in pairs], config)
    return [pairs[i] for i in idx]


def bin_counts(dsc_values, bins: int) -> np.ndarray:
    x = np.asarray(dsc_values, dtype=np.float64)
    return np.bincount(np.minimum((x * bins).astype(np.int64), bins - 1), minlength=bins)


# serialization ---------------------------------------------------------------

RECORD_PIXELS = np.dtype("<f4")
RECORD_MASK = np.dtype("u1")


def write_dataset(pairs, out_dir, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``records.bin`` (f32 pixels + u8 mask per record) and ``index.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bin_path = out_dir / "records.bin"
    idx_path = out_dir / "index.json"
    size = None
    records = []
    with open(bin_path, "wb") as fh:
        for p in pairs:
            if size is None:
                size = p.pixels.shape[0]
            if p.pixels.shape != (size, size) or p.mask.shape != (size, size):
                raise ValueError("all records must share one square slice size")
            fh.write(np.ascontiguousarray(p.pixels, dtype=RECORD_PIXELS).tobytes())
            fh.write(np.ascontiguousarray(p.mask, dtype=RECORD_MASK).tobytes())
            records.append({
                "class_id": p.class_id,
                "true_dsc": p.true_dsc,
                "volume_id": p.volume_id,
                "slice_index": p.slice_index,
                "empty_mask": p.empty_mask,
                "degradation": p.meta.get("degradation"),
            })
    index = {"format": "labelqa-slices-v1", "size": size or SLICE_SIZE, "records": records}
    if extra:
        index.update(extra)
    idx_path.write_text(json.dumps(index, indent=1, sort_keys=True))
    return bin_path, idx_path


def read_dataset(out_dir) -> list[SlicePair]:
    out_dir = Path(out_dir)
    index = json.loads((out_dir / "index.json").read_text())
    size = int(index["size"])
    n_pix = size * size
    rec_bytes = n_pix * (RECORD_PIXELS.itemsize + RECORD_MASK.itemsize)
    raw = np.memmap(out_dir / "records.bin", dtype=np.uint8, mode="r")
    if raw.size != rec_bytes * len(index["records"]):
        raise ValueError("records.bin size does not match index.json")
    pairs = []
    for i, r in enumerate(index["records"]):
        off = i * rec_bytes
        pix = np.frombuffer(raw, dtype=RECORD_PIXELS, count=n_pix, offset=off).reshape(size, size)
        msk = np.frombuffer(raw, dtype=RECORD_MASK, count=n_pix,
                            offset=off + n_pix * RECORD_PIXELS.itemsize).reshape(size, size)
        pairs.append(SlicePair(pixels=pix.astype(np.float32), mask=msk.copy(),
                               class_id=int(r["class_id"]), true_dsc=r["true_dsc"],
                               volume_id=r["volume_id"], slice_index=int(r["slice_index"]),
                               empty_mask=bool(r.get("empty_mask", False)),
                               meta={"degradation": r.get("degradation")}))
    return pairs
