"""Evaluation measures: categorical entropy of averaged classifications,
a Gaussian Frechet distance between point clouds, and total variation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


@dataclass(frozen=True)
class EntropyReport:
    mean_probs: np.ndarray
    entropy: float


def categorical_entropy(prob_rows) -> EntropyReport:
    """Shannon entropy (nats) of the row-averaged probability vector."""
    rows = np.atleast_2d(np.asarray(prob_rows, dtype=float))
    if rows.shape[0] < 1:
        raise ValueError("need at least one probability row")
    sums = np.sum(rows, axis=1)
    if np.any(rows < -1e-12) or np.any(np.abs(sums - 1.0) > 1e-8):
        raise ValueError("rows must lie on the probability simplex")
    mean = np.mean(rows, axis=0)
    nz = mean[mean > 0]
    return EntropyReport(mean_probs=mean, entropy=float(-np.sum(nz * np.log(nz))))


def gaussian_frechet(sample_a, sample_b, regulariser: float = 1e-6) -> float:
    """Frechet distance between Gaussians fitted to two sample sets."""
    a = np.atleast_2d(np.asarray(sample_a, dtype=float))
    b = np.atleast_2d(np.asarray(sample_b, dtype=float))
    d = a.shape[1]
    if b.shape[1] != d:
        raise ValueError("sample sets have different dimensions")
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise ValueError(f"need at least {d + 1} points per set")
    mu_a, mu_b = np.mean(a, axis=0), np.mean(b, axis=0)
    cov_a = np.cov(a, rowvar=False).reshape(d, d) + regulariser * np.eye(d)
    cov_b = np.cov(b, rowvar=False).reshape(d, d) + regulariser * np.eye(d)
    cross = scipy.linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(cross):
        cross = cross.real
    dist2 = np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * cross)
    return float(max(dist2, 0.0))


def marginal_tv(prob, target) -> float:
    """Total variation distance between two probability vectors."""
    p = np.asarray(prob, dtype=float)
    q = np.asarray(target, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(0.5 * np.sum(np.abs(p - q)))
