"""Independent brute-force verifiers: quadrature, convolution, finite
differences, and importance-sampled posterior means.

These deliberately avoid the closed forms used elsewhere so that tests can
cross-check the two routes against each other.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .schedule import DiffusionSchedule


class ResolutionWarning(UserWarning):
    """Grid integration did not stabilise under refinement."""


def _trapezoid_on_grid(values: np.ndarray, axes: list[np.ndarray]) -> float:
    out = values
    for ax in reversed(axes):
        out = np.trapezoid(out, ax, axis=-1)
    return float(out)


def grid_integrate(fn, box, points_per_axis: int = 256) -> float:
    """Trapezoidal integral of ``fn`` over a rectangular box.

    ``fn`` must accept an (N, d) array of points and return N values.
    ``box`` is a sequence of (low, high) pairs, one per dimension.
    """
    if points_per_axis < 16:
        raise ValueError("points_per_axis must be at least 16")
    box = [(float(lo), float(hi)) for lo, hi in box]
    for lo, hi in box:
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValueError(f"invalid box bounds ({lo}, {hi})")

    def evaluate(n_points):
        axes = [np.linspace(lo, hi, n_points) for lo, hi in box]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        vals = np.asarray(fn(pts), dtype=float)
        if not np.all(np.isfinite(vals)):
            bad = pts[~np.isfinite(vals)][0]
            raise NumericError(f"non-finite density sample at {bad}")
        return _trapezoid_on_grid(vals.reshape(mesh[0].shape), axes)

    fine = evaluate(points_per_axis)
    coarse = evaluate(points_per_axis // 2 + 1)
    if abs(fine - coarse) >= 1e-3:
        warnings.warn(
            f"integral changed by {abs(fine - coarse):.2e} under refinement",
            ResolutionWarning,
            stacklevel=2,
        )
    return fine


def convolve_density(grid: np.ndarray, clean_values: np.ndarray, schedule: DiffusionSchedule, t: int) -> np.ndarray:
    """Push a 1D clean density through the forward process by quadrature.

    Returns the noisy density evaluated on the same grid.  The grid must be
    wide enough that the clean density has effectively no boundary mass.
    """
    grid = np.asarray(grid, dtype=float)
    clean_values = np.asarray(clean_values, dtype=float)
    if grid.ndim != 1 or grid.shape != clean_values.shape:
        raise ValueError("grid and clean_values must be matching 1D arrays")
    if clean_values[0] > 1e-12 or clean_values[-1] > 1e-12:
        raise ValueError(
            f"boundary density too large ({clean_values[0]:.2e}, {clean_values[-1]:.2e}); widen the grid"
        )
    if t == 0:
        return clean_values.copy()
    a, s = schedule.alpha[t], schedule.sigma[t]
    # kernel[i, j] = N(x_i; a * x0_j, s^2)
    diff = grid[:, None] - a * grid[None, :]
    kernel = np.exp(-0.5 * (diff / s) ** 2) / (s * np.sqrt(2.0 * np.pi))
    return np.trapezoid(kernel * clean_values[None, :], grid, axis=1)


def finite_difference_grad(fn, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one axis at a time."""
    x = np.asarray(x, dtype=float)
    if h <= 0:
        raise ValueError("step h must be positive")
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        fp, fm = fn(x + step), fn(x - step)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite sample near {x} along axis {i}")
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class PosteriorMeanEstimate:
    mean: np.ndarray
    standard_error: np.ndarray
    effective_sample_size: float


def mc_posterior_mean(m, schedule: DiffusionSchedule, t: int, xt, n: int, seed: int) -> PosteriorMeanEstimate:
    """Self-normalised importance-sampling estimate of E[x0 | xt].

    Proposal is the clean mixture itself; weights are the forward-transition
    likelihoods N(xt; alpha_t * x0, sigma_t^2 I).
    """
    if n < 1000:
        raise ValueError("need at least 1000 samples")
    xt = np.asarray(xt, dtype=float)
    rng = np.random.default_rng(seed)
    x0 = m.sample(n, rng)
    a, s = schedule.alpha[t], schedule.sigma[t]
    log_w = -0.5 * np.sum((xt[None, :] - a * x0) ** 2, axis=1) / s**2
    log_w -= np.max(log_w)
    w = np.exp(log_w)
    w /= np.sum(w)
    ess = 1.0 / np.sum(w**2)
    if ess < 50:
        warnings.warn(f"effective sample size {ess:.1f} < 50; estimate unreliable", stacklevel=2)
    mean = np.sum(w[:, None] * x0, axis=0)
    var = np.sum(w[:, None] * (x0 - mean[None, :]) ** 2, axis=0)
    return PosteriorMeanEstimate(mean=mean, standard_error=np.sqrt(var / ess), effective_sample_size=float(ess))
