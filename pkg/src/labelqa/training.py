"""Training loop, AdamW optimizer and the conditioning/ranking/resampling ablation."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .assignment import build_pairs
from .degrade import SynthesisConfig, balanced_indices
from .losses import LossConfig
from .metrics import MetricSample, evaluate
from .model import (EmbeddingProvider, HeadConfig, QualityHead, forward_backward,
                    onehot_embeddings)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss_mse", "loss_rank", "val_lcc", "val_srocc", "val_map5", "val_map10")


@dataclass(frozen=True)
class AblationFlags:
    use_text_condition: bool = True
    use_onehot_condition: bool = False
    use_rank_loss: bool = True
    use_resample: bool = False

    def label(self) -> str:
        on = [k.removeprefix("use_") for k, v in asdict(self).items() if v]
        return "+".join(on) or "none"


#: Lower block of the reference ablation table: condition / optimal pair / resample.
TABLE1_GRID = (
    AblationFlags(False, False, False, False),
    AblationFlags(True, False, False, False),
    AblationFlags(False, False, True, False),
    AblationFlags(True, False, True, False),
    AblationFlags(True, False, True, True),
)


def full_grid() -> list[AblationFlags]:
    return [AblationFlags(bool(m & 1), bool(m & 2), bool(m & 4), bool(m & 8)) for m in range(16)]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    flags: AblationFlags = field(default_factory=AblationFlags)
    head: HeadConfig = field(default_factory=HeadConfig)
    val_fraction: float = 0.2
    resample_bins: int = 10
    exact_pairing: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs and batch_size must be positive, learning_rate >= 0")


@dataclass
class EncodedSet:
    """Frozen image embeddings with class ids, DSC targets and source volume ids."""

    f1: np.ndarray
    class_ids: np.ndarray
    targets: np.ndarray
    volume_ids: np.ndarray

    def __len__(self):
        return self.f1.shape[0]

    def subset(self, idx) -> "EncodedSet":
        return EncodedSet(self.f1[idx], self.class_ids[idx], self.targets[idx],
                          self.volume_ids[idx])

    @classmethod
    def concat(cls, parts) -> "EncodedSet":
        return cls(*(np.concatenate([getattr(p, k) for p in parts])
                     for k in ("f1", "class_ids", "targets", "volume_ids")))


def encode_pairs(pairs, provider: EmbeddingProvider) -> EncodedSet:
    if any(p.true_dsc is None for p in pairs):
        raise ValueError("training pairs need true_dsc")
    return EncodedSet(
        f1=provider.encode_many(pairs),
        class_ids=np.array([p.class_id for p in pairs], dtype=np.int64),
        targets=np.array([p.true_dsc for p in pairs], dtype=np.float64),
        volume_ids=np.array([p.volume_id for p in pairs], dtype=object),
    )


def split_by_volume(data: EncodedSet, fraction: float, seed: int) -> tuple[EncodedSet, EncodedSet]:
    """Volume-wise split: ``fraction`` of the distinct volumes go to validation."""
    vols = np.array(sorted(set(data.volume_ids.tolist())), dtype=object)
    if vols.size < 2:
        raise ValueError("need at least two volumes for a volume-wise validation split")
    rng = np.random.default_rng(seed)
    n_val = min(max(1, int(round(fraction * vols.size))), vols.size - 1)
    val_vols = set(vols[rng.permutation(vols.size)[:n_val]].tolist())
    is_val = np.array([v in val_vols for v in data.volume_ids])
    return data.subset(np.flatnonzero(~is_val)), data.subset(np.flatnonzero(is_val))


class AdamW:
    """Adaptive moments with decoupled weight decay, in-place on a parameter dict."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k].astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.wd:
                p *= 1.0 - self.lr * self.wd
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


class ConditionTable:
    """Per-class conditioning vectors for a given ablation setting."""

    def __init__(self, provider: EmbeddingProvider, class_ids, flags: AblationFlags):
        dim = provider.text_dim
        ids = sorted(set(int(c) for c in class_ids))
        self.dim = dim
        self.table = {c: np.zeros(dim) for c in ids}
        onehot = onehot_embeddings(ids, dim) if flags.use_onehot_condition else None
        for c in ids:
            v = np.zeros(dim)
            if flags.use_text_condition:
                if c not in provider.text:
                    raise KeyError(f"class {c} has no text embedding")
                v = v + provider.text[c]
            if onehot is not None:
                v = v + onehot[c]
            n = np.linalg.norm(v)
            self.table[c] = v / n if n > 0 else v
        # pairing always uses semantic class embeddings when available
        self.pairing = {c: provider.text[c] if c in provider.text else onehot_embeddings(ids, dim)[c]
                        for c in ids}

    def phi(self, class_ids) -> np.ndarray:
        return np.stack([self.table[int(c)] for c in class_ids])

    def pair_embeddings(self, class_ids) -> np.ndarray:
        return np.stack([self.pairing[int(c)] for c in class_ids])


@dataclass
class TrainResult:
    head: QualityHead
    log: list[dict]
    best_epoch: int
    best_val: dict


def predict(head: QualityHead, data: EncodedSet, cond: ConditionTable,
            batch_size: int = 1024) -> np.ndarray:
    out = np.empty(len(data), dtype=np.float64)
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        out[sl] = head.forward(data.f1[sl], cond.phi(data.class_ids[sl]))
    return out


def evaluate_head(head, data: EncodedSet, cond: ConditionTable) -> dict:
    pred = predict(head, data, cond)
    samples = [MetricSample(float(p), float(a), int(c)) for p, a, c in
               zip(pred, data.targets, data.class_ids)]
    return evaluate(samples)


def train(data, provider: EmbeddingProvider, config: TrainConfig = TrainConfig(),
          loss: LossConfig = LossConfig(), val: EncodedSet | None = None) -> TrainResult:
    """Fit a head on DSC-labelled samples and keep the best-validation-SROCC epoch.

    ``data`` is an :class:`EncodedSet` or a list of SlicePairs (encoded with
    ``provider``). Without ``val`` a volume-wise split of ``data`` is used.
    """
    if not isinstance(data, EncodedSet):
        data = encode_pairs(list(data), provider)
    if len(data) == 0:
        raise ValueError("empty training set")
    if val is None:
        data, val = split_by_volume(data, config.val_fraction, config.seed)
    if len(val) == 0:
        raise ValueError("empty validation split")
    flags = config.flags
    cond = ConditionTable(provider, np.concatenate([data.class_ids, val.class_ids]), flags)

    if flags.use_resample:
        per_bin = max(1, int(np.ceil(len(data) / config.resample_bins)))
        idx = balanced_indices(data.targets, SynthesisConfig(
            target_bins=config.resample_bins, samples_per_bin=per_bin, seed=config.seed))
        data = data.subset(idx)

    head_cfg = replace(config.head, vision_dim=provider.vision_dim, text_dim=provider.text_dim)
    head = QualityHead.init(head_cfg, seed=config.seed)
    opt = AdamW(head.params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2,
                eps=config.eps, weight_decay=config.weight_decay)
    run_loss = loss if flags.use_rank_loss else replace(loss, lam=0.0)

    history = []
    best = (-np.inf, 0, None, None)
    n = len(data)
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        sums = np.zeros(2)
        n_batches = 0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            cids = data.class_ids[idx]
            pairs = None
            if flags.use_rank_loss and idx.size >= 2:
                pairs = build_pairs(cond.pair_embeddings(cids), exact=config.exact_pairing).pairs
            _, parts, grads = forward_backward(head, data.f1[idx], cond.phi(cids),
                                               data.targets[idx], pairs, run_loss)
            opt.step(head.params, grads)
            sums += (parts["mse"], parts["rank"])
            n_batches += 1
        m = evaluate_head(head, val, cond)
        row = {"epoch": epoch, "loss_mse": float(sums[0] / n_batches),
               "loss_rank": float(sums[1] / n_batches),
               "val_lcc": m["lcc"], "val_srocc": m["srocc"], "val_map5": m["map5"],
               "val_map10": m["map10"]}
        history.append(row)
        log.info("epoch %d mse %.5f rank %.5f val srocc %s", epoch, row["loss_mse"],
                 row["loss_rank"], m["srocc"])
        score = m["srocc"] if m["srocc"] is not None else -np.inf
        if score > best[0] or best[2] is None:
            best = (score, epoch, head.copy(), m)
    return TrainResult(head=best[2], log=history, best_epoch=best[1], best_val=best[3])


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float)
                            else r[k]) for k in LOG_COLUMNS})


ABLATION_COLUMNS = ("condition", "onehot", "opt_pair", "resample", "lcc", "srocc", "map5", "map10")


def run_ablation(train_data, provider: EmbeddingProvider, grid, test: EncodedSet,
                 config: TrainConfig = TrainConfig(), loss: LossConfig = LossConfig(),
                 val: EncodedSet | None = None) -> list[dict]:
    """Train one head per flag combination (same seed and budget) and score it on ``test``."""
    if not isinstance(train_data, EncodedSet):
        train_data = encode_pairs(list(train_data), provider)
    rows = []
    for flags in grid:
        res = train(train_data, provider, replace(config, flags=flags), loss, val=val)
        cond = ConditionTable(provider, np.concatenate([train_data.class_ids, test.class_ids]),
                              flags)
        m = evaluate_head(res.head, test, cond)
        rows.append({"condition": int(flags.use_text_condition),
                     "onehot": int(flags.use_onehot_condition),
                     "opt_pair": int(flags.use_rank_loss), "resample": int(flags.use_resample),
                     "lcc": m["lcc"], "srocc": m["srocc"], "map5": m["map5"], "map10": m["map10"]})
    return rows


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in ABLATION_COLUMNS})
