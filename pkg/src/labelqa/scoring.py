"""3D label scoring by averaging per-slice predictions over stratified slice samples."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import dsc
from .volume_io import DEFAULT_MARGIN, SLICE_SIZE, LabeledVolume, load_entry, load_manifest, \
    preprocess_slice, slices_containing

log = logging.getLogger(__name__)

DEFAULT_N_SLICES = 10
SCORE_COLUMNS = ("volume_id", "class_id", "class_name", "predicted_dsc", "n_slices", "time_s",
                 "status")


@dataclass
class ScoreRecord:
    volume_id: str
    class_id: int
    predicted_dsc: float | None
    n_slices_used: int
    per_slice_scores: list[float] = field(default_factory=list)
    slice_indices: list[int] = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "ok"  # ok | absent | error
    class_name: str = ""
    message: str = ""

    def row(self) -> dict:
        return {"volume_id": self.volume_id, "class_id": self.class_id,
                "class_name": self.class_name,
                "predicted_dsc": "" if self.predicted_dsc is None else repr(self.predicted_dsc),
                "n_slices": self.n_slices_used, "time_s": f"{self.wall_time:.6f}",
                "status": self.status}


def stratified_indices(m: int, n: int) -> list[int]:
    """Positions of ``n`` evenly spaced ranks in ``range(m)``, rounding half-down.

    Rank i maps to i*(m-1)/(n-1); a single draw takes the middle rank.
    """
    if n < 1:
        raise ValueError("n_slices must be >= 1")
    if m < 1:
        return []
    n = min(n, m)
    if n == 1:
        return [(m - 1) // 2]
    out = []
    for i in range(n):
        q, r = divmod(i * (m - 1), n - 1)
        out.append(q + (1 if 2 * r > n - 1 else 0))
    return out


class HeadPredictor:
    """Preprocess, encode and forward candidate slices through a trained head.

    Slices are encoded one at a time; only the (n, d) embedding batch is kept.
    """

    def __init__(self, head, provider, flags=None, margin: int = DEFAULT_MARGIN,
                 size: int = SLICE_SIZE):
        from .training import AblationFlags, ConditionTable
        self.head, self.provider = head, provider
        self.flags = flags or AblationFlags()
        self._cond_cls = ConditionTable
        self._cond = {}
        self.margin, self.size = margin, size

    def _phi(self, class_id, n):
        if class_id not in self._cond:
            self._cond[class_id] = self._cond_cls(self.provider, [class_id], self.flags)
        return self._cond[class_id].phi([class_id] * n)

    def __call__(self, volume: LabeledVolume, class_id: int, indices) -> np.ndarray:
        f1 = np.empty((len(indices), self.provider.vision_dim), dtype=np.float32)
        for k, z in enumerate(indices):
            pair = preprocess_slice(volume, None, z, class_id, "candidate", self.margin,
                                    self.size)
            f1[k] = self.provider.encode(pair)
        return self.head.forward(f1, self._phi(class_id, len(indices))).astype(np.float64)


def make_predictor(head, provider, flags=None, **kwargs) -> HeadPredictor:
    return HeadPredictor(head, provider, flags, **kwargs)


def oracle_predictor(volume: LabeledVolume, class_id: int, indices) -> np.ndarray:
    """Per-slice true DSC of candidate against ground truth (needs ground truth)."""
    gt = volume.labels("ground_truth") == class_id
    cand = volume.labels("candidate") == class_id
    out = []
    for z in indices:
        d = dsc(volume.slice_of(cand, z), volume.slice_of(gt, z))
        out.append(1.0 if d is None else d)
    return np.asarray(out, dtype=np.float64)


def score_mask_3d(volume: LabeledVolume, class_id: int, predictor,
                  n_slices: int = DEFAULT_N_SLICES) -> ScoreRecord:
    """Mean predicted DSC over ``n_slices`` stratified slices of the candidate's extent."""
    if n_slices < 1:
        raise ValueError("n_slices must be >= 1")
    t0 = time.perf_counter()
    name = volume.classes.get(int(class_id), "")
    present = slices_containing(volume, class_id, "candidate")
    if not present:
        return ScoreRecord(volume.id, int(class_id), None, 0, status="absent", class_name=name,
                           wall_time=time.perf_counter() - t0,
                           message="class absent from candidate")
    chosen = [present[i] for i in stratified_indices(len(present), n_slices)]
    scores = np.asarray(predictor(volume, int(class_id), chosen), dtype=np.float64)
    return ScoreRecord(volume.id, int(class_id), float(np.mean(scores)), len(chosen),
                       [float(s) for s in scores], chosen, time.perf_counter() - t0,
                       class_name=name)


def candidate_classes(volume: LabeledVolume) -> list[int]:
    return [int(c) for c in np.unique(volume.labels("candidate")) if c != 0]


def score_volumes(volumes, predictor, n_slices: int = DEFAULT_N_SLICES,
                  class_ids=None) -> list[ScoreRecord]:
    records = []
    for vol in volumes:
        cids = candidate_classes(vol) if class_ids is None else list(class_ids)
        for cid in cids:
            records.append(score_mask_3d(vol, cid, predictor, n_slices))
    records.sort(key=lambda r: (r.volume_id, r.class_id))
    return records


def score_dataset(manifest, predictor, n_slices: int = DEFAULT_N_SLICES) -> list[ScoreRecord]:
    """Score every candidate class of every manifest volume.

    ``manifest`` is a manifest path or a list of entries. An unreadable volume
    yields one error record and the run continues.
    """
    entries = load_manifest(manifest) if not isinstance(manifest, list) else manifest
    records = []
    for entry in entries:
        vid = str(entry.get("id", entry.get("path", entry.get("image", "?"))))
        try:
            vol = load_entry(entry)
        except (OSError, ValueError, KeyError) as exc:
            log.error("cannot load %s: %s", vid, exc)
            records.append(ScoreRecord(vid, -1, None, 0, status="error", message=str(exc)))
            continue
        records.extend(score_volumes([vol], predictor, n_slices))
    records.sort(key=lambda r: (r.volume_id, r.class_id))
    return records


def write_scores_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SCORE_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow(r.row())


def write_scores_json(records, path, config: dict | None = None) -> None:
    payload = {"config": config or {}, "records": [asdict(r) for r in records]}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def read_scores(path) -> list[ScoreRecord]:
    """Read a score table written by :func:`write_scores_json` or :func:`write_scores_csv`."""
    path = str(path)
    if path.endswith(".json"):
        with open(path) as fh:
            return [ScoreRecord(**r) for r in json.load(fh)["records"]]
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            p = r["predicted_dsc"]
            out.append(ScoreRecord(r["volume_id"], int(r["class_id"]),
                                   float(p) if p else None, int(r["n_slices"]),
                                   wall_time=float(r["time_s"]), status=r["status"],
                                   class_name=r.get("class_name", "")))
    return out
