"""Score-distillation engine over the analytic mixture prior.

Implements plain score distillation (SDS), variational score distillation
with an exact particle-mixture variational score (VSD), the
marginal-rectified variant (USD) whose gradient is the VSD gradient plus a
log-rectifier correction, and a single-category control mode (CTRL).
Supporting pieces: a back-and-forth timestep scheduler and gradient-norm
alignment of the correction term.
"""

from __future__ import annotations

import csv
import pathlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import worldmodel
from .errors import ConfigurationError, DivergenceError
from .estimator import IntervalEma, ema_lookup, ema_update, tweedie_x0
from .metrics import categorical_entropy
from .rectify import Rectifier, TargetMarginal, grad_log_r
from .schedule import DiffusionSchedule, loss_weight
from .worldmodel import PoseLabeledMixture, Renderer, render, render_jacobian

METHODS = ("sds", "vsd", "usd", "ctrl")


@dataclass(frozen=True)
class ParticleSet:
    """The optimized parameter vectors plus their renderer."""

    particles: np.ndarray       # (n, d)
    renderer: Renderer
    seed: int

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.particles, dtype=float))
        object.__setattr__(self, "particles", p)
        if p.shape[0] < 1 or not np.all(np.isfinite(p)):
            raise ConfigurationError("need at least one finite particle")

    @classmethod
    def initialise(cls, n: int, dim: int, renderer: Renderer, seed: int, scale: float = 1.0) -> "ParticleSet":
        rng = np.random.default_rng(seed)
        return cls(particles=scale * rng.standard_normal((n, dim)), renderer=renderer, seed=seed)

    @property
    def num_particles(self) -> int:
        return self.particles.shape[0]


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters of one distillation run.

    eta2 is the learning rate of a fitted variational score network; the
    analytic particle-mixture score needs no fitting, so it is accepted for
    interface completeness but unused.
    """

    method: str
    eta1: float = 0.03
    eta2: float = 0.0
    iters: int = 4000
    bnf_n_i: int = 2
    grad_norm_align: bool = True
    control_category: int | None = None
    rectifier: Rectifier | None = None
    pose_probs: np.ndarray | None = None
    omega_kind: str = "sigma-squared"
    n_t: int = 10
    n_ema: int = 100
    snapshot_every: int = 200

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.eta1 <= 0 or self.eta2 < 0:
            raise ConfigurationError("learning rates must be positive (eta2 may be 0)")
        if (self.control_category is not None) != (self.method == "ctrl"):
            raise ConfigurationError("control_category must be set exactly when method='ctrl'")
        if self.method == "usd" and self.rectifier is None:
            raise ConfigurationError("method 'usd' needs a rectifier configuration")


@dataclass(frozen=True)
class VariationalScore:
    """Selects how the variational noise prediction is computed."""

    mode: str = "analytic-particle-mixture"

    def __post_init__(self):
        if self.mode not in ("analytic-particle-mixture", "single-particle-exact"):
            raise ConfigurationError(f"unknown variational score mode {self.mode!r}")


def variational_eps(vs: VariationalScore, ps: ParticleSet, schedule: DiffusionSchedule,
                    t: int, c: int, xt) -> np.ndarray:
    """Noise prediction of the particle-induced distribution at step t.

    The particles at pose c induce the mixture (1/n) sum_i
    N(alpha_t * g(theta_i, c), sigma_t^2 I); this returns
    -sigma_t * grad log of that mixture, the exact population minimizer of
    the usual noise-regression objective.
    """
    xt = np.asarray(xt, dtype=float)
    a, s = schedule.alpha[t], schedule.sigma[t]
    rendered = np.stack([render(ps.renderer, th, c) for th in ps.particles])
    if vs.mode == "single-particle-exact" and ps.num_particles != 1:
        raise ConfigurationError("single-particle-exact mode needs exactly one particle")
    diffs = xt[None, :] - a * rendered                       # (n, d)
    log_w = -0.5 * np.sum(diffs**2, axis=1) / s**2
    log_w -= log_w.max()
    w = np.exp(log_w)
    w /= w.sum()
    return (w @ diffs) / s


def bnf_interval(iteration: int, total_iters: int, n_i: int, num_steps: int) -> tuple[int, int]:
    """Back-and-forth timestep range for the block containing `iteration`.

    The run is split into 2*n_i equal blocks.  The first n_i blocks keep
    the upper bound at 0.98*T while the lower bound expands linearly from
    T - T/n_i down to 0.02*T; the last n_i blocks keep the lower bound at
    0.02*T while the upper bound shrinks linearly from 0.98*T to T/n_i.
    """
    if n_i < 1 or not 0 <= iteration < total_iters:
        raise ValueError("need n_i >= 1 and 0 <= iteration < total_iters")
    T = num_steps
    block = min(iteration * 2 * n_i // total_iters, 2 * n_i - 1)
    frac = block / (n_i - 1) if n_i > 1 else 1.0
    if block < n_i:
        t_high = 0.98 * T
        t_low = (1.0 - frac) * (T - T / n_i) + frac * 0.02 * T
    else:
        frac = (block - n_i) / (n_i - 1) if n_i > 1 else 0.0
        t_low = 0.02 * T
        t_high = (1.0 - frac) * 0.98 * T + frac * (T / n_i)
    lo = max(1, int(round(t_low)))
    hi = min(T, int(round(t_high)))
    if lo >= hi:
        raise ValueError(f"degenerate timestep range ({lo}, {hi}) at block {block}")
    return lo, hi


def grad_norm_align(primary_grad, secondary_grad) -> np.ndarray:
    """Rescale the secondary gradient to the primary's L2 norm.

    Keeps the secondary's direction; a zero secondary stays zero.
    """
    primary = np.asarray(primary_grad, dtype=float)
    secondary = np.asarray(secondary_grad, dtype=float)
    if not np.all(np.isfinite(primary)):
        raise ValueError("primary gradient must be finite")
    norm_s = np.linalg.norm(secondary)
    if norm_s == 0.0:
        return np.zeros_like(secondary)
    return secondary * (np.linalg.norm(primary) / norm_s)


# ---------------------------------------------------------------------------
# Per-iteration draws and gradient rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Draws:
    """One (t, pose, noise) triple per particle, shared across methods."""

    t: np.ndarray          # (n,) ints
    pose: np.ndarray       # (n,) ints
    eps: np.ndarray        # (n, d)
    xt: np.ndarray         # (n, d)


def _draw(ps: ParticleSet, m: PoseLabeledMixture, schedule: DiffusionSchedule,
          cfg: DistillConfig, iteration: int, rng: np.random.Generator) -> _Draws:
    n, d = ps.particles.shape
    lo, hi = bnf_interval(iteration, cfg.iters, cfg.bnf_n_i, schedule.num_steps)
    t = rng.integers(lo, hi + 1, size=n)
    probs = cfg.pose_probs
    if probs is None:
        probs = np.full(m.num_categories, 1.0 / m.num_categories)
    pose = rng.choice(m.num_categories, size=n, p=probs)
    eps = rng.standard_normal((n, d))
    xt = np.empty((n, d))
    for i in range(n):
        x0 = render(ps.renderer, ps.particles[i], int(pose[i]))
        xt[i] = schedule.alpha[t[i]] * x0 + schedule.sigma[t[i]] * eps[i]
    return _Draws(t=t, pose=pose, eps=eps, xt=xt)


def _vsd_gradients(ps: ParticleSet, m: PoseLabeledMixture, schedule: DiffusionSchedule,
                   cfg: DistillConfig, draws: _Draws, use_variational: bool) -> np.ndarray:
    """Stacked per-particle gradients of the SDS/VSD objective."""
    omega = loss_weight(schedule, cfg.omega_kind)
    vs = VariationalScore()
    out = np.empty_like(ps.particles)
    for i in range(ps.num_particles):
        t, c = int(draws.t[i]), int(draws.pose[i])
        eps_pre = worldmodel.eps_pretrain(m, schedule, t, draws.xt[i])
        if use_variational:
            eps_ref = variational_eps(vs, ps, schedule, t, c, draws.xt[i])
        else:
            eps_ref = draws.eps[i]
        jac = render_jacobian(ps.renderer, ps.particles[i], c)
        out[i] = omega(t) * (jac.T @ (eps_pre - eps_ref))
    return out


def sds_step(ps: ParticleSet, m: PoseLabeledMixture, schedule: DiffusionSchedule,
             cfg: DistillConfig, draws: _Draws) -> np.ndarray:
    """Plain score-distillation gradient: omega * (eps_pretrain - eps) through the renderer."""
    if cfg.method != "sds":
        raise ConfigurationError("sds_step needs method='sds'")
    return _vsd_gradients(ps, m, schedule, cfg, draws, use_variational=False)


def vsd_step(ps: ParticleSet, m: PoseLabeledMixture, schedule: DiffusionSchedule,
             cfg: DistillConfig, draws: _Draws) -> np.ndarray:
    """Variational gradient: the drawn noise is replaced by the particle-mixture prediction."""
    if cfg.method not in ("vsd", "usd"):
        raise ConfigurationError("vsd_step needs method 'vsd' (or as the base of 'usd')")
    return _vsd_gradients(ps, m, schedule, cfg, draws, use_variational=True)


def _posterior_fn(source: str, m: PoseLabeledMixture, schedule: DiffusionSchedule):
    """Category-posterior evaluator for the chosen source.

    'exact-mixture' uses the true time-t posterior.  The degraded variants
    mimic classifying images instead: 'classifier-on-tweedie' applies the
    clean posterior to the denoised point, 'classifier-direct' applies the
    clean posterior to the noisy point as-is.
    """
    if source == "exact-mixture":
        return lambda t, x: worldmodel.category_posterior(m, schedule, t, x)
    if source == "classifier-on-tweedie":
        def tweedie_posterior(t, x):
            if t == 0:
                return worldmodel.category_posterior(m, None, 0, x)
            x0 = tweedie_x0(schedule, t, x, worldmodel.eps_pretrain(m, schedule, t, x))
            return worldmodel.category_posterior(m, None, 0, x0)

        return tweedie_posterior
    if source == "classifier-direct":
        return lambda t, x: worldmodel.category_posterior(m, None, 0, x)
    raise ConfigurationError(f"unknown posterior source {source!r}")


def _marginal_at(rect: Rectifier, m: PoseLabeledMixture, state: IntervalEma,
                 t: int, fixed: np.ndarray | None) -> np.ndarray:
    if rect.marginal_source == "ema":
        return ema_lookup(state, t)
    if rect.marginal_source == "exact-mc":
        return m.category_weights()
    return fixed


def usd_step(ps: ParticleSet, m: PoseLabeledMixture, schedule: DiffusionSchedule,
             state: IntervalEma, cfg: DistillConfig, draws: _Draws,
             fixed_marginal: np.ndarray | None = None) -> np.ndarray:
    """VSD gradient minus the rectifier correction omega * sigma * J^T grad log r.

    Subtracting the term in a descent update ascends log r, steering the
    particle distribution's category marginal toward the rectifier target.
    """
    if cfg.method != "usd":
        raise ConfigurationError("usd_step needs method='usd'")
    rect = cfg.rectifier
    base = _vsd_gradients(ps, m, schedule, cfg, draws, use_variational=True)
    omega = loss_weight(schedule, cfg.omega_kind)
    context = m if rect.posterior_source == "exact-mixture" else _posterior_fn(rect.posterior_source, m, schedule)
    out = np.empty_like(base)
    for i in range(ps.num_particles):
        t, c = int(draws.t[i]), int(draws.pose[i])
        marginal = _marginal_at(rect, m, state, t, fixed_marginal)
        g_r = grad_log_r(rect, context, schedule, t, draws.xt[i], marginal)
        jac = render_jacobian(ps.renderer, ps.particles[i], c)
        correction = omega(t) * schedule.sigma[t] * (jac.T @ g_r)
        if cfg.grad_norm_align:
            correction = grad_norm_align(base[i], correction)
        out[i] = base[i] - correction
    return out


def _control_grad_log_posterior(m: PoseLabeledMixture, schedule: DiffusionSchedule,
                                t: int, xt, category: int) -> np.ndarray:
    """grad_x log p(category | x_t): submixture score minus full-mixture score."""
    keep = m.category_of == category
    sub = PoseLabeledMixture(
        weights=m.weights[keep] / np.sum(m.weights[keep]),
        means=m.means[keep],
        covs=m.covs[keep],
        category_of=np.zeros(int(keep.sum()), dtype=int),
        num_categories=1,
    )
    return worldmodel.score(sub, schedule, t, xt) - worldmodel.score(m, schedule, t, xt)


def ctrl_step(ps: ParticleSet, m: PoseLabeledMixture, schedule: DiffusionSchedule,
              cfg: DistillConfig, draws: _Draws) -> np.ndarray:
    """VSD gradient minus a single-category posterior ascent term.

    The rectifier collapses to the chosen category's posterior, so the
    correction drives every particle into that category's basin.
    """
    if cfg.method != "ctrl":
        raise ConfigurationError("ctrl_step needs method='ctrl'")
    base = _vsd_gradients(ps, m, schedule, cfg, draws, use_variational=True)
    omega = loss_weight(schedule, cfg.omega_kind)
    out = np.empty_like(base)
    for i in range(ps.num_particles):
        t, c = int(draws.t[i]), int(draws.pose[i])
        g_r = _control_grad_log_posterior(m, schedule, t, draws.xt[i], cfg.control_category)
        jac = render_jacobian(ps.renderer, ps.particles[i], c)
        correction = omega(t) * schedule.sigma[t] * (jac.T @ g_r)
        if cfg.grad_norm_align:
            correction = grad_norm_align(base[i], correction)
        out[i] = base[i] - correction
    return out


# ---------------------------------------------------------------------------
# The full optimization loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunReport:
    """Everything a distillation run produced, for inspection and export."""

    method: str
    seed: int
    final_particles: np.ndarray                   # (n, d)
    snapshots: tuple                              # ((iter, (n, d) array), ...)
    ema_trace: tuple                              # ((iter, (n_t, K) array), ...)
    metrics: tuple                                # ((iter, split vector, entropy), ...)


def particle_split(ps_particles: np.ndarray, renderer: Renderer, m: PoseLabeledMixture) -> np.ndarray:
    """Fraction of particles whose rendered clean point lands in each category."""
    counts = np.zeros(m.num_categories)
    for th in np.atleast_2d(ps_particles):
        post = worldmodel.category_posterior(m, None, 0, render(renderer, th, 0))
        counts[int(np.argmax(post))] += 1
    return counts / counts.sum()


def _metrics_row(iteration: int, particles: np.ndarray, renderer: Renderer, m: PoseLabeledMixture):
    rows = [worldmodel.category_posterior(m, None, 0, render(renderer, th, 0)) for th in particles]
    report = categorical_entropy(rows)
    return (iteration, particle_split(particles, renderer, m), report.entropy)


def run(ps: ParticleSet, m: PoseLabeledMixture, schedule: DiffusionSchedule,
        cfg: DistillConfig) -> RunReport:
    """Execute the configured distillation loop; deterministic given the seed.

    One (t, pose, noise) triple is drawn per particle per iteration.  The
    EMA marginal tracker observes one posterior evaluation per iteration,
    taken at a rotating particle's draw so no extra randomness is consumed
    (methods stay trajectory-comparable under a shared seed).
    """
    rng = np.random.default_rng(ps.seed)
    particles = ps.particles.copy()
    state = IntervalEma.create(schedule.num_steps, cfg.n_t, m.num_categories, cfg.n_ema)
    rect = cfg.rectifier
    posterior = None
    fixed_marginal = None
    if cfg.method == "usd":
        posterior = _posterior_fn(rect.posterior_source, m, schedule)
        if rect.marginal_source == "fixed-presampled":
            # one-shot estimate from the initial particles, never updated
            rows = [posterior(0, render(ps.renderer, th, 0)) for th in particles]
            fixed_marginal = np.mean(rows, axis=0)
    snapshots, ema_trace, metrics = [], [], []
    for it in range(cfg.iters):
        current = ParticleSet(particles=particles, renderer=ps.renderer, seed=ps.seed)
        draws = _draw(current, m, schedule, cfg, it, rng)
        if cfg.method == "sds":
            grads = sds_step(current, m, schedule, cfg, draws)
        elif cfg.method == "vsd":
            grads = vsd_step(current, m, schedule, cfg, draws)
        elif cfg.method == "usd":
            grads = usd_step(current, m, schedule, state, cfg, draws, fixed_marginal)
        else:
            grads = ctrl_step(current, m, schedule, cfg, draws)
        particles = particles - cfg.eta1 * grads
        if np.any(np.abs(particles) > 1e6) or not np.all(np.isfinite(particles)):
            raise DivergenceError(
                f"particle parameters diverged at iteration {it} (method {cfg.method!r})"
            )
        if cfg.method == "usd":
            j = it % current.num_particles
            observed = posterior(int(draws.t[j]), draws.xt[j])
            ema_update(state, int(draws.t[j]), observed)
        if it % cfg.snapshot_every == 0 or it == cfg.iters - 1:
            snapshots.append((it, particles.copy()))
            ema_trace.append((it, state.snapshot()))
            metrics.append(_metrics_row(it, particles, ps.renderer, m))
    return RunReport(
        method=cfg.method,
        seed=ps.seed,
        final_particles=particles,
        snapshots=tuple(snapshots),
        ema_trace=tuple(ema_trace),
        metrics=tuple(metrics),
    )


def write_report(report: RunReport, out_dir) -> None:
    """Write particles.csv, ema.csv and metrics.csv under out_dir."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dim = report.final_particles.shape[1]
    with open(out / "particles.csv", "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "particle"] + [f"x{j}" for j in range(dim)])
        for it, parts in report.snapshots:
            for i, th in enumerate(parts):
                w.writerow([it, i] + [repr(float(v)) for v in th])
    with open(out / "ema.csv", "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "interval", "category", "value"])
        for it, values in report.ema_trace:
            for interval in range(values.shape[0]):
                for cat in range(values.shape[1]):
                    w.writerow([it, interval, cat, repr(float(values[interval, cat]))])
    k = len(report.metrics[0][1])
    with open(out / "metrics.csv", "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "entropy"] + [f"split_{c}" for c in range(k)])
        for it, split, entropy in report.metrics:
            w.writerow([it, repr(float(entropy))] + [repr(float(v)) for v in split])
