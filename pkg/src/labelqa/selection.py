"""Quality-driven sample selection and the volumetric uncertainty baselines it is compared with."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

METHODS = ("segae", "entropy", "mc_variance", "random", "oracle")
# methods whose score is a quality (higher = better); the rest are uncertainties
QUALITY_METHODS = ("segae", "oracle")
PROB_TOL = 1e-4


class SelectionError(ValueError):
    pass


# probability volumes -----------------------------------------------------------

@dataclass
class ProbabilityVolume:
    """Per-voxel class probabilities, shape (C, *dims) or (K, C, *dims) for K samples."""

    probs: np.ndarray
    classes: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float32)
        if p.ndim not in (4, 5):
            raise SelectionError(f"probabilities must be (C, X, Y, Z) or (K, C, X, Y, Z), "
                                 f"got {p.shape}")
        if p.min() < 0:
            raise SelectionError("negative probability")
        s = p.sum(axis=-4, dtype=np.float64)
        if np.abs(s - 1.0).max() > PROB_TOL:
            raise SelectionError(f"probabilities sum to 1 within {PROB_TOL}: "
                                 f"max deviation {np.abs(s - 1.0).max():.3g}")
        self.probs = p

    @property
    def k(self) -> int:
        return self.probs.shape[0] if self.probs.ndim == 5 else 1

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.probs.shape[-3:])

    @property
    def n_classes(self) -> int:
        return self.probs.shape[-4]

    def samples(self) -> np.ndarray:
        return self.probs if self.probs.ndim == 5 else self.probs[None]

    def save(self, path) -> tuple[Path, Path]:
        """``<path>.json`` header (dims, classes, K) and ``<path>.f32`` C-order payload."""
        base = Path(path)
        header = base.with_suffix(".json")
        payload = base.with_suffix(".f32")
        header.write_text(json.dumps({"dims": list(self.dims), "n_classes": self.n_classes,
                                      "classes": {str(k): v for k, v in self.classes.items()},
                                      "K": self.k, "dtype": "<f4", "payload": payload.name},
                                     indent=1, sort_keys=True))
        payload.write_bytes(np.ascontiguousarray(self.samples(), dtype="<f4").tobytes())
        return header, payload

    @classmethod
    def load(cls, path, counter: "IOCounter | None" = None) -> "ProbabilityVolume":
        header_path = Path(path).with_suffix(".json")
        h = json.loads(header_path.read_text())
        raw = (header_path.parent / h["payload"]).read_bytes()
        shape = (int(h["K"]), int(h["n_classes"]), *map(int, h["dims"]))
        if len(raw) != 4 * int(np.prod(shape)):
            raise SelectionError(f"{header_path}: payload size does not match header")
        if counter is not None:
            counter.add(len(raw))
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        classes = {int(k): v for k, v in h.get("classes", {}).items()}
        return cls(arr if shape[0] > 1 else arr[0], classes)


class IOCounter:
    def __init__(self):
        self.bytes = 0

    def add(self, n: int) -> None:
        self.bytes += int(n)


def _foreground_voxels(p: np.ndarray) -> np.ndarray:
    # a voxel counts unless background is the unique argmax (ties go to foreground)
    if p.shape[0] < 2:
        return np.ones(p.shape[1:], dtype=bool)
    return p[1:].max(axis=0) >= p[0]


def voxel_entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, -p * np.log(p), 0.0)
    return t.sum(axis=0)


def entropy_score(prob: ProbabilityVolume) -> float:
    """Mean Shannon entropy (nats) over voxels whose argmax is not background.

    With K samples the mean prediction is used. No foreground voxels gives 0.
    """
    p = prob.samples().mean(axis=0, dtype=np.float64)
    fg = _foreground_voxels(p)
    if not fg.any():
        return 0.0
    return float(voxel_entropy(p)[fg].mean())


def mc_variance_score(probs) -> float:
    """Across-sample population variance, averaged over voxels and classes."""
    if isinstance(probs, ProbabilityVolume):
        stack = probs.samples()
    else:
        probs = list(probs)
        shapes = {p.probs.shape for p in probs}
        if len(shapes) != 1:
            raise SelectionError(f"probability volumes differ in shape: {sorted(shapes)}")
        stack = np.stack([p.probs for p in probs])
    if stack.shape[0] < 2:
        raise SelectionError("need K >= 2 probability samples")
    return float(np.var(stack.astype(np.float64), axis=0).mean())


def per_class_uncertainty(prob: ProbabilityVolume, method: str) -> dict[int, float]:
    """Uncertainty restricted to voxels whose argmax is each foreground class."""
    samples = prob.samples().astype(np.float64)
    p = samples.mean(axis=0)
    am = p.argmax(axis=0)
    out = {}
    ent = voxel_entropy(p) if method == "entropy" else None
    var = samples.var(axis=0).mean(axis=0) if method == "mc_variance" else None
    for c in range(1, p.shape[0]):
        sel = am == c
        if sel.any():
            out[c] = float((ent if ent is not None else var)[sel].mean())
    return out


def scan_uncertainty(prob: ProbabilityVolume, method: str) -> float | None:
    """Per-scan score: uniform mean of the per-class scores of the classes present."""
    per = per_class_uncertainty(prob, method)
    return float(np.mean(list(per.values()))) if per else None


# pools and selection -------------------------------------------------------------

@dataclass
class PoolRecord:
    volume_id: str
    scores: dict[str, float | None] = field(default_factory=dict)
    class_scores: dict[str, dict[int, float]] = field(default_factory=dict)
    true_dsc: float | None = None


@dataclass
class CandidatePool:
    records: list[PoolRecord]

    def __post_init__(self):
        ids = [r.volume_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise SelectionError("duplicate volume ids in pool")

    def __len__(self):
        return len(self.records)

    @classmethod
    def from_arrays(cls, ids, true_dsc=None, **method_scores) -> "CandidatePool":
        recs = []
        for i, vid in enumerate(ids):
            sc = {m: (None if v[i] is None or np.isnan(v[i]) else float(v[i]))
                  for m, v in method_scores.items()}
            t = None if true_dsc is None else float(true_dsc[i])
            if t is not None:
                sc.setdefault("oracle", t)
            recs.append(PoolRecord(str(vid), sc, true_dsc=t))
        return cls(recs)

    def subset(self, idx) -> "CandidatePool":
        return CandidatePool([self.records[i] for i in idx])


def _check(pool: CandidatePool, method: str, n: int):
    if method not in METHODS:
        raise SelectionError(f"unknown method {method!r}; choose from {METHODS}")
    if not 0 <= n <= len(pool):
        raise SelectionError(f"budget {n} outside [0, {len(pool)}]")
    if method != "random" and not any(method in r.scores for r in pool.records):
        raise SelectionError(f"pool is not scored under {method!r}")


def _random_order(pool, seed) -> list[str]:
    ids = sorted(r.volume_id for r in pool.records)
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in perm]


def _worst_first(pool: CandidatePool, method: str) -> list[str]:
    """Full pool in worst-first order; absent scores go last, by id."""
    scored = [(r.scores[method], r.volume_id) for r in pool.records
              if r.scores.get(method) is not None]
    absent = sorted(r.volume_id for r in pool.records if r.scores.get(method) is None)
    if method in QUALITY_METHODS:
        scored.sort(key=lambda t: (t[0], t[1]))
    else:
        scored.sort(key=lambda t: (-t[0], t[1]))
    return [vid for _, vid in scored] + absent


def select_active(pool: CandidatePool, method: str, n: int, seed: int = 0) -> list[str]:
    """The ``n`` cases most in need of correction: lowest quality or highest uncertainty."""
    _check(pool, method, n)
    if method == "random":
        return _random_order(pool, seed)[:n]
    return _worst_first(pool, method)[:n]


def select_semisup(pool: CandidatePool, method: str, n: int, seed: int = 0) -> list[str]:
    """The ``n`` pseudo-labels to admit: exact reverse of the active-learning order.

    Absent-scored records are never admitted ahead of scored ones.
    """
    _check(pool, method, n)
    if method == "random":
        return _random_order(pool, seed)[:n]
    order = _worst_first(pool, method)
    absent = {r.volume_id for r in pool.records if r.scores.get(method) is None}
    scored = [v for v in order if v not in absent]
    return (scored[::-1] + [v for v in order if v in absent])[:n]


def write_selection_json(ids, pool: CandidatePool, method: str, n: int, path,
                         config: dict | None = None) -> None:
    by_id = {r.volume_id: r for r in pool.records}
    payload = {"method": method, "budget": n, "ids": list(ids),
               "scores": [by_id[i].scores.get(method) for i in ids], "config": config or {}}
    Path(path).write_text(json.dumps(payload, indent=1))


# proxy evaluation ----------------------------------------------------------------

def simulate_selection_benefit(pool: CandidatePool, methods, n: int, trials: int = 200,
                               mode: str = "semisup", subpool: float = 0.5,
                               seed: int = 0) -> dict:
    """Selection quality over seeded sub-pools drawn without replacement.

    ``semisup``: mean true DSC of the admitted labels. ``active``: total
    true-DSC deficit (sum of 1 - DSC) reached by the selected labels.
    Returns per-method ``mean``, ``se`` and raw ``values``, plus the sub-pool
    mean true DSC averaged over trials.
    """
    if any(r.true_dsc is None for r in pool.records):
        raise SelectionError("simulation needs true DSC on every record")
    if mode not in ("semisup", "active"):
        raise SelectionError(f"unknown mode {mode!r}")
    m = max(n, int(round(subpool * len(pool))))
    if m > len(pool):
        raise SelectionError("budget exceeds the pool")
    truth = {r.volume_id: r.true_dsc for r in pool.records}
    values = {meth: np.empty(trials) for meth in methods}
    pool_means = np.empty(trials)
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        sub = pool.subset(np.sort(rng.choice(len(pool), size=m, replace=False)))
        pool_means[t] = np.mean([r.true_dsc for r in sub.records])
        for meth in methods:
            if mode == "semisup":
                ids = select_semisup(sub, meth, n, seed=int(rng.integers(2**32)))
                values[meth][t] = np.mean([truth[i] for i in ids]) if ids else np.nan
            else:
                ids = select_active(sub, meth, n, seed=int(rng.integers(2**32)))
                values[meth][t] = sum(1.0 - truth[i] for i in ids)
    out = {"mode": mode, "budget": n, "trials": trials, "subpool_size": m,
           "pool_mean": float(pool_means.mean()), "methods": {}}
    for meth, v in values.items():
        out["methods"][meth] = {"mean": float(v.mean()),
                                "se": float(v.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0,
                                "values": v.tolist()}
    return out


# resource accounting ---------------------------------------------------------------

def resource_report(volume, class_id: int, predictor, prob_path, n_slices: int = 10) -> dict:
    """Time and input bytes of scoring one label versus the entropy baseline on the same case.

    Quality scoring reads only the sampled image and candidate slices; the
    baseline reads the full f32 probability volume from ``prob_path``.
    """
    from .scoring import score_mask_3d
    t0 = time.perf_counter()
    rec = score_mask_3d(volume, class_id, predictor, n_slices)
    t_segae = time.perf_counter() - t0
    per_slice = (int(np.prod(volume.dims)) // volume.n_slices()) * (
        volume.image.itemsize + volume.labels("candidate").itemsize)
    segae_bytes = rec.n_slices_used * per_slice

    counter = IOCounter()
    t0 = time.perf_counter()
    prob = ProbabilityVolume.load(prob_path, counter)
    ent = entropy_score(prob)
    t_entropy = time.perf_counter() - t0
    return {
        "volume_id": volume.id, "class_id": int(class_id),
        "segae": {"score": rec.predicted_dsc, "n_slices": rec.n_slices_used,
                  "time_s": t_segae, "aux_bytes": 0, "input_bytes": segae_bytes},
        "entropy": {"score": ent, "time_s": t_entropy, "aux_bytes": counter.bytes,
                    "input_bytes": counter.bytes},
        "io_ratio": counter.bytes / max(segae_bytes, 1),
    }
