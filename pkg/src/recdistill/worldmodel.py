"""Pose-labeled Gaussian mixture prior with closed-form noisy statistics.

The mixture stands in for a pretrained generative prior: every quantity the
distillation loop needs (density, score, noise prediction, category
posterior) is exact.  Forward diffusion of a component N(mu, Sigma) at step t
is N(alpha_t * mu, alpha_t^2 * Sigma + sigma_t^2 * I), so the noisy
distribution is again a mixture with unchanged component weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .schedule import DiffusionSchedule


def _logsumexp(a, axis=None):
    amax = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


@dataclass(frozen=True)
class PoseLabeledMixture:
    """Gaussian mixture whose components carry discrete pose-category labels."""

    weights: np.ndarray        # (n_comp,)
    means: np.ndarray          # (n_comp, dim)
    covs: np.ndarray           # (n_comp, dim, dim)
    category_of: np.ndarray    # (n_comp,) ints in [0, num_categories)
    num_categories: int
    _chols: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covs, dtype=float)
        cat = np.asarray(self.category_of, dtype=int)
        d = mu.shape[1]
        if cov.size != w.size * d * d:
            raise ConfigurationError(
                f"covariances must contain {w.size} {d}x{d} matrices, got shape {cov.shape}"
            )
        cov = cov.reshape(w.size, d, d)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)
        object.__setattr__(self, "category_of", cat)
        if not (w.size == mu.shape[0] == cov.shape[0] == cat.size):
            raise ConfigurationError("component arrays have mismatched lengths")
        if np.any(w <= 0) or abs(np.sum(w) - 1.0) > 1e-12:
            raise ConfigurationError("component weights must be positive and sum to 1")
        covered = set(cat.tolist())
        missing = sorted(set(range(self.num_categories)) - covered)
        if missing or covered - set(range(self.num_categories)):
            raise ConfigurationError(
                f"every pose category needs probability mass (p(c) > 0); "
                f"missing or out-of-range categories: {missing or sorted(covered)}"
            )
        try:
            chols = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError("all component covariances must be positive-definite") from exc
        object.__setattr__(self, "_chols", chols)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_components(self) -> int:
        return self.weights.size

    def category_weights(self) -> np.ndarray:
        """Exact category marginal; unchanged by forward diffusion."""
        out = np.zeros(self.num_categories)
        np.add.at(out, self.category_of, self.weights)
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n clean points from the mixture."""
        comps = rng.choice(self.num_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comps] + np.einsum("nij,nj->ni", self._chols[comps], eps)

    def sample_noisy(self, schedule: DiffusionSchedule, t: int, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n points from the time-t noisy marginal."""
        x0 = self.sample(n, rng)
        eps = rng.standard_normal((n, self.dim))
        return schedule.alpha[t] * x0 + schedule.sigma[t] * eps


def _noisy_params(m: PoseLabeledMixture, schedule: DiffusionSchedule, t: int):
    a, s = schedule.alpha[t], schedule.sigma[t]
    means = a * m.means
    covs = a * a * m.covs + s * s * np.eye(m.dim)[None, :, :]
    return means, covs


def _component_log_densities(m: PoseLabeledMixture, schedule, t: int, x: np.ndarray) -> np.ndarray:
    """log(pi_k) + log N(x; mean_k(t), cov_k(t)) for every component; (..., n_comp)."""
    means, covs = _noisy_params(m, schedule, t)
    x = np.asarray(x, dtype=float)
    d = m.dim
    out = np.empty(x.shape[:-1] + (m.num_components,))
    for k in range(m.num_components):
        chol = np.linalg.cholesky(covs[k])
        diff = x - means[k]
        z = np.linalg.solve(chol, diff[..., None])[..., 0] if d > 1 else diff / chol[0, 0]
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[..., k] = (
            np.log(m.weights[k])
            - 0.5 * np.sum(z * z, axis=-1)
            - 0.5 * (d * np.log(2.0 * np.pi) + logdet)
        )
    return out


def _check_dim(m: PoseLabeledMixture, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != m.dim:
        raise ValueError(f"point dimension {x.shape[-1]} != mixture dimension {m.dim}")
    return x


def density(m: PoseLabeledMixture, x) -> np.ndarray:
    """Clean data density p(x); accepts a point (d,) or a batch (..., d)."""
    return noisy_density(m, None, 0, x)


def noisy_density(m: PoseLabeledMixture, schedule, t: int, xt) -> np.ndarray:
    """Time-t marginal density; reduces to `density` exactly at t=0."""
    xt = _check_dim(m, xt)
    if t == 0:
        schedule = _CLEAN
    log_comp = _component_log_densities(m, schedule, t, xt)
    return np.exp(_logsumexp(log_comp, axis=-1))


class _CleanSchedule:
    """Stand-in schedule so t=0 reuses the noisy code path bit-for-bit."""

    alpha = {0: 1.0}
    sigma = {0: 0.0}


_CLEAN = _CleanSchedule()


def score(m: PoseLabeledMixture, schedule, t: int, xt) -> np.ndarray:
    """Gradient of log p_t at xt: responsibility-weighted Gaussian scores."""
    xt = _check_dim(m, xt)
    if t == 0:
        schedule = _CLEAN
    means, covs = _noisy_params(m, schedule, t)
    log_comp = _component_log_densities(m, schedule, t, xt)
    resp = np.exp(log_comp - _logsumexp(log_comp, axis=-1)[..., None])
    out = np.zeros_like(xt)
    for k in range(m.num_components):
        grad_k = -np.linalg.solve(covs[k], (xt - means[k])[..., None])[..., 0]
        out += resp[..., k, None] * grad_k
    return out


def eps_pretrain(m: PoseLabeledMixture, schedule: DiffusionSchedule, t: int, xt) -> np.ndarray:
    """Exact noise prediction: -sigma_t times the score."""
    return -schedule.sigma[t] * score(m, schedule, t, xt)


def category_posterior(m: PoseLabeledMixture, schedule, t: int, xt) -> np.ndarray:
    """p(category | xt) at step t: normalised per-category responsibility sums."""
    xt = _check_dim(m, xt)
    if t == 0:
        schedule = _CLEAN
    log_comp = _component_log_densities(m, schedule, t, xt)
    resp = np.exp(log_comp - _logsumexp(log_comp, axis=-1)[..., None])
    out = np.zeros(xt.shape[:-1] + (m.num_categories,))
    for k in range(m.num_components):
        out[..., m.category_of[k]] += resp[..., k]
    return out / np.sum(out, axis=-1, keepdims=True)


def category_marginal(m: PoseLabeledMixture, schedule: DiffusionSchedule, t: int, n_samples: int, seed: int) -> np.ndarray:
    """Monte Carlo estimate of E[p(category | xt)] over the time-t marginal."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    if t == 0:
        xt = m.sample(n_samples, rng)
    else:
        xt = m.sample_noisy(schedule, t, n_samples, rng)
    return np.mean(category_posterior(m, schedule, t, xt), axis=0)


@dataclass(frozen=True)
class Renderer:
    """Maps particle parameters to data space; identity or a per-pose rotation."""

    kind: str = "identity"
    angles: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("identity", "rotation"):
            raise ConfigurationError(f"unknown renderer kind {self.kind!r}")


def _rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def render(r: Renderer, theta, c: int) -> np.ndarray:
    """Render parameters at pose c; rotation renderers preserve the norm."""
    theta = np.asarray(theta, dtype=float)
    if r.kind == "identity":
        return theta.copy()
    if not 0 <= c < len(r.angles):
        raise ValueError(f"pose {c} outside configured categories [0, {len(r.angles)})")
    if theta.shape[-1] != 2:
        raise ValueError("rotation renderer needs 2D parameters")
    return theta @ _rotation_matrix(r.angles[c]).T


def render_jacobian(r: Renderer, theta, c: int) -> np.ndarray:
    """d(render)/d(theta): identity matrix or the pose's rotation matrix."""
    theta = np.asarray(theta, dtype=float)
    if r.kind == "identity":
        return np.eye(theta.shape[-1])
    if not 0 <= c < len(r.angles):
        raise ValueError(f"pose {c} outside configured categories [0, {len(r.angles)})")
    return _rotation_matrix(r.angles[c])
