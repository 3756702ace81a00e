"""Evaluation metrics: L1 errors, predictive variance adequacy, and an
alignment-invariant correlation between mixing matrices."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

H_CORR_MAX_LATENTS = 6


@dataclass
class MetricsRecord:
    err_l1: float
    q95_l1: float
    pva: float
    h_corr: float
    n_iter: int = 0
    t_train: float = 0.0

    def __post_init__(self):
        if self.err_l1 < 0 or self.q95_l1 < 0:
            raise ValueError("L1 errors cannot be negative")


def l1_metrics(pred_mean, truth):
    """Mean and nearest-rank 95th percentile of |truth - pred| over all
    tasks and test points."""
    pred = np.asarray(pred_mean, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    errs = np.abs(pred - truth).reshape(-1)
    if errs.size == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    rank = int(np.ceil(0.95 * errs.size))  # nearest-rank definition
    q95 = float(np.sort(errs)[rank - 1])
    return float(errs.mean()), q95


def pva(pred_mean, pred_var, truth) -> float:
    """log of the mean squared-error-to-predicted-variance ratio; zero means
    the predictive spread matches the observed errors on average."""
    pred = np.asarray(pred_mean, dtype=np.float64)
    var = np.asarray(pred_var, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if not (pred.shape == var.shape == truth.shape):
        raise ValueError("prediction, variance and truth shapes differ")
    if np.any(var <= 0):
        raise ValueError("predicted variances must be positive")
    ratio = (truth - pred) ** 2 / var
    return float(np.log(ratio.mean()))


def h_corr(H_est, H_true) -> float:
    """Best Pearson correlation between the vectorized mixing matrices over
    all latent-axis permutations and per-latent sign flips."""
    a = np.asarray(H_est, dtype=np.float64)
    b = np.asarray(H_true, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("mixing matrices must have the same shape")
    q = a.shape[1]
    if q > H_CORR_MAX_LATENTS:
        raise ValueError(
            f"exhaustive alignment supports at most {H_CORR_MAX_LATENTS} latents"
        )
    bv = b.reshape(-1) - b.mean()
    nb = np.linalg.norm(bv)
    if nb == 0:
        raise ValueError("mixing matrix has zero variance")
    best = -1.0
    for perm in itertools.permutations(range(q)):
        cols = a[:, list(perm)]
        for signs in itertools.product((1.0, -1.0), repeat=q):
            av = (cols * np.asarray(signs)[None, :]).reshape(-1)
            av = av - av.mean()
            na = np.linalg.norm(av)
            if na == 0:
                raise ValueError("mixing matrix has zero variance")
            best = max(best, float(av @ bv / (na * nb)))
    return best
