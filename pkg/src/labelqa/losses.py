"""Compositional regression + optimal-pair ranking loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    margin_xi: float = 0.05

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.margin_xi > 0:
            raise ValueError("margin must be strictly positive")


def rank_loss(h_hat_i, h_hat_j, h_i, h_j, xi: float) -> float:
    """Hinge on the product of predicted and (reversed) actual differences."""
    return max(0.0, (h_hat_i - h_hat_j) * (h_j - h_i) + xi)


def _pair_arrays(pairs):
    if not pairs:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    p = np.asarray(pairs, dtype=np.intp)
    return p[:, 0], p[:, 1]


def batch_loss(predictions, targets, pairs, config: LossConfig) -> tuple[float, dict]:
    """Mean squared error over all N samples plus ``lam`` x mean hinge over pairs.

    ``pairs`` is a list of index tuples (or a PairingResult); unpaired samples
    contribute to the squared-error term only.
    """
    value, parts, _ = batch_loss_and_grad(predictions, targets, pairs, config)
    return value, parts


def batch_loss_and_grad(predictions, targets, pairs, config: LossConfig):
    """Loss, per-term breakdown and d(loss)/d(predictions)."""
    pred = np.asarray(predictions, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    if pred.shape != tgt.shape or pred.ndim != 1:
        raise ValueError("predictions and targets must be 1-D of equal length")
    pairs = getattr(pairs, "pairs", pairs) or []
    n = pred.size
    ii, jj = _pair_arrays(pairs)
    if ii.size and (ii.max() >= n or jj.max() >= n):
        raise ValueError("pair index outside the batch")

    err = pred - tgt
    mse = float(np.mean(err * err))
    grad = 2.0 * err / n

    rank = 0.0
    if ii.size:
        margin = (pred[ii] - pred[jj]) * (tgt[jj] - tgt[ii]) + config.margin_xi
        active = margin > 0
        rank = float(np.sum(np.where(active, margin, 0.0)) / ii.size)
        coef = config.lam * active * (tgt[jj] - tgt[ii]) / ii.size
        np.add.at(grad, ii, coef)
        np.add.at(grad, jj, -coef)
    total = mse + config.lam * rank
    return total, {"mse": mse, "rank": rank}, grad
