"""Annealed cosine scoring and the in-batch-negatives objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric as nm


@dataclass(frozen=True)
class ScoreConfig:
    d: int = 512
    anneal_steps: int = 10_000
    smoothing: float = 0.2


def anneal_scale(step: int, cfg: ScoreConfig) -> float:
    """1 at step 0, rising linearly to sqrt(d) at ``anneal_steps`` and flat after."""
    frac = min(max(step, 0) / cfg.anneal_steps, 1.0) if cfg.anneal_steps > 0 else 1.0
    return 1.0 + (math.sqrt(cfg.d) - 1.0) * frac


def score(h_x, h_y, step: int, cfg: ScoreConfig, check: bool = True) -> float:
    h_x = np.asarray(h_x, dtype=np.float64)
    h_y = np.asarray(h_y, dtype=np.float64)
    if check:
        for h in (h_x, h_y):
            assert abs(np.linalg.norm(h) - 1.0) < 1e-3, "score() expects unit-norm encodings"
    return anneal_scale(step, cfg) * float(h_x @ h_y)


def smoothed_targets(k: int, smoothing: float) -> np.ndarray:
    """Row i puts 1 - smoothing on column i and spreads the rest over the K-1 negatives."""
    if k < 2:
        raise ValueError("in-batch negatives need K >= 2")
    off = smoothing / (k - 1)
    t = np.full((k, k), off)
    np.fill_diagonal(t, 1.0 - smoothing)
    return t


def batch_loss(h_x, h_y, step: int, cfg: ScoreConfig) -> nm.Tensor:
    """Smoothed cross-entropy over the K x K annealed score matrix, summed over rows.

    With smoothing 0 this is -J = -sum_i S(x_i, y_i) + sum_i logsumexp_j S(x_i, y_j).
    Always evaluated in float32 regardless of the ambient precision mode.
    """
    h_x, h_y = nm.as_tensor(h_x), nm.as_tensor(h_y)
    k = h_x.shape[0]
    if k < 2 or h_y.shape[0] != k:
        raise ValueError(f"batch_loss needs K >= 2 aligned rows, got {k} and {h_y.shape[0]}")
    with nm.precision("fp32"):
        logits = nm.scale(nm.matmul(h_x, nm.transpose(h_y, (1, 0))), anneal_scale(step, cfg))
        return nm.soft_cross_entropy(logits, smoothed_targets(k, cfg.smoothing))


def row_losses(scores: np.ndarray, smoothing: float = 0.0) -> np.ndarray:
    """Per-row smoothed cross-entropy of an already-scaled K x K score matrix."""
    s = np.asarray(scores, dtype=np.float64)
    t = smoothed_targets(s.shape[0], smoothing)
    return -(t * nm.log_softmax_np(s)).sum(axis=1)


def rank_responses(h_x, candidates) -> np.ndarray:
    """Candidate indices by descending cosine; ties go to the lower index."""
    c = np.asarray(candidates, dtype=np.float64)
    sims = c @ np.asarray(h_x, dtype=np.float64)
    return np.argsort(-sims, kind="stable")
