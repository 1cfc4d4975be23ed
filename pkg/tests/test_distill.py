import numpy as np
import pytest
import scipy.special
import scipy.stats

from recdistill import distill as D
from recdistill import worldmodel
from recdistill.errors import ConfigurationError, DivergenceError
from recdistill.estimator import IntervalEma
from recdistill.oracle import finite_difference_grad
from recdistill.rectify import Rectifier, TargetMarginal
from recdistill.schedule import build_schedule, loss_weight
from recdistill.worldmodel import PoseLabeledMixture, Renderer


@pytest.fixture(scope="module")
def narrow_biased():
    """Well-separated 0.8 / 0.2 modes used by the full-run checks."""
    return PoseLabeledMixture(
        weights=np.array([0.8, 0.2]),
        means=np.array([[2.0], [-2.0]]),
        covs=np.array([[[0.01]], [[0.01]]]),
        category_of=np.array([0, 1]),
        num_categories=2,
    )


@pytest.fixture(scope="module")
def narrow_balanced():
    return PoseLabeledMixture(
        weights=np.array([0.5, 0.5]),
        means=np.array([[2.0], [-2.0]]),
        covs=np.array([[[0.01]], [[0.01]]]),
        category_of=np.array([0, 1]),
        num_categories=2,
    )


def _particles(values, seed=0):
    return D.ParticleSet(particles=np.asarray(values, dtype=float), renderer=Renderer(), seed=seed)


class TestVariationalEps:
    def test_single_particle_recovers_noise(self, schedule):
        vs = D.VariationalScore()
        ps = _particles([[1.5]])
        t, eps = 300, np.array([0.7])
        xt = schedule.alpha[t] * 1.5 + schedule.sigma[t] * eps
        got = D.variational_eps(vs, ps, schedule, t, 0, xt)
        assert got == pytest.approx(eps, rel=1e-12)

    def test_symmetric_pair_points_along_input(self, schedule):
        vs = D.VariationalScore()
        ps = _particles([[1.0, 0.0], [-1.0, 0.0]])
        t = 400
        xt = np.array([0.0, 0.8])
        got = D.variational_eps(vs, ps, schedule, t, 0, xt)
        # symmetry cancels the component along the particle axis
        assert abs(got[0]) < 1e-12 and got[1] != 0.0

    def test_matches_finite_difference_of_log_mixture(self, schedule):
        vs = D.VariationalScore()
        ps = _particles([[0.5, -0.2], [1.3, 0.9], [-0.7, 0.1]])
        t = 350
        a, s = schedule.alpha[t], schedule.sigma[t]
        xt = np.array([0.4, 0.2])

        def log_q(v):
            comps = -0.5 * np.sum((v - a * ps.particles) ** 2, axis=1) / s**2
            return float(scipy.special.logsumexp(comps) - np.log(len(comps)))

        fd = finite_difference_grad(log_q, xt, 1e-5)
        got = D.variational_eps(vs, ps, schedule, t, 0, xt)
        assert np.max(np.abs(got - (-s * fd))) / np.max(np.abs(got)) < 1e-5


class TestBnfInterval:
    def test_documented_blocks(self):
        assert D.bnf_interval(0, 4000, 2, 1000) == (500, 980)
        assert D.bnf_interval(1500, 4000, 2, 1000) == (20, 980)
        assert D.bnf_interval(3999, 4000, 2, 1000) == (20, 500)

    def test_middle_blocks_interpolate(self):
        # four expanding blocks: the lower bound walks 750 -> 20 linearly
        lows = [D.bnf_interval(i * 1000, 8000, 4, 1000)[0] for i in range(4)]
        assert lows == [750, 507, 263, 20]

    def test_bounds_valid_everywhere(self):
        for n_i in (1, 2, 3, 5):
            for it in range(0, 6000, 111):
                lo, hi = D.bnf_interval(it, 6000, n_i, 1000)
                assert 1 <= lo < hi <= 1000

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            D.bnf_interval(10, 10, 2, 1000)
        with pytest.raises(ValueError):
            D.bnf_interval(0, 100, 0, 1000)


class TestGradNormAlign:
    def test_double_secondary(self):
        p = np.array([3.0, 4.0])
        out = D.grad_norm_align(p, 2 * p)
        assert np.allclose(out, p, atol=1e-12)

    def test_zero_secondary(self):
        out = D.grad_norm_align(np.array([1.0, 1.0]), np.zeros(2))
        assert np.array_equal(out, np.zeros(2))

    def test_random_vectors(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            p, s = rng.standard_normal(3), rng.standard_normal(3)
            out = D.grad_norm_align(p, s)
            assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(p), abs=1e-12)
            cos = out @ s / (np.linalg.norm(out) * np.linalg.norm(s))
            assert cos == pytest.approx(1.0, abs=1e-12)


def _mean_gradient(method, m, schedule, theta, n_draws, seed, **cfg_kwargs):
    cfg = D.DistillConfig(method=method, iters=n_draws, bnf_n_i=1, **cfg_kwargs)
    ps = _particles([theta], seed=seed)
    rng = np.random.default_rng(seed)
    grads = []
    for it in range(n_draws):
        draws = D._draw(ps, m, schedule, cfg, it, rng)
        step = D.sds_step if method == "sds" else D.vsd_step
        grads.append(step(ps, m, schedule, cfg, draws)[0])
    return np.array(grads)


class TestSdsStep:
    def test_stationary_at_target_mean(self, schedule):
        m = PoseLabeledMixture(
            weights=np.array([1.0]), means=np.array([[1.2]]), covs=np.array([[[0.5]]]),
            category_of=np.array([0]), num_categories=1,
        )
        grads = _mean_gradient("sds", m, schedule, [1.2], 10_000, seed=0)
        se = grads.std() / np.sqrt(len(grads))
        assert abs(grads.mean()) < 3 * se

    def test_points_toward_target(self, schedule):
        m = PoseLabeledMixture(
            weights=np.array([1.0]), means=np.array([[1.2]]), covs=np.array([[[0.5]]]),
            category_of=np.array([0]), num_categories=1,
        )
        for theta in (-2.0, 4.0):
            grads = _mean_gradient("sds", m, schedule, [theta], 2000, seed=1)
            # descent moves theta toward the mode: gradient sign matches theta - mu
            assert np.sign(grads.mean()) == np.sign(theta - 1.2)

    def test_omega_changes_magnitude_not_sign(self, schedule):
        m = PoseLabeledMixture(
            weights=np.array([1.0]), means=np.array([[1.2]]), covs=np.array([[[0.5]]]),
            category_of=np.array([0]), num_categories=1,
        )
        g_const = _mean_gradient("sds", m, schedule, [4.0], 2000, seed=2, omega_kind="constant-one")
        g_sigma = _mean_gradient("sds", m, schedule, [4.0], 2000, seed=2, omega_kind="sigma-squared")
        assert np.sign(g_const.mean()) == np.sign(g_sigma.mean())
        assert not np.isclose(g_const.mean(), g_sigma.mean())


class TestVsdStep:
    def test_single_particle_equals_sds(self, schedule, narrow_biased):
        ps = _particles([[0.3]])
        cfg_s = D.DistillConfig(method="sds", iters=100)
        cfg_v = D.DistillConfig(method="vsd", iters=100)
        rng = np.random.default_rng(5)
        for it in range(20):
            draws = D._draw(ps, narrow_biased, schedule, cfg_s, it, rng)
            a = D.sds_step(ps, narrow_biased, schedule, cfg_s, draws)
            b = D.vsd_step(ps, narrow_biased, schedule, cfg_v, draws)
            assert np.allclose(a, b, atol=1e-10)

    def test_no_drift_when_particles_match_prior(self, schedule):
        # resample particles i.i.d. from the prior each round: the gradient
        # distribution is then symmetric about zero (no systematic drift)
        m = PoseLabeledMixture(
            weights=np.array([1.0]), means=np.array([[0.0]]), covs=np.array([[[1.0]]]),
            category_of=np.array([0]), num_categories=1,
        )
        rng = np.random.default_rng(8)
        cfg = D.DistillConfig(method="vsd", iters=50)
        # gradients within one round share a particle set, so aggregate to
        # one independent mean per round before testing
        round_means = []
        for it in range(50):
            ps = _particles(m.sample(16, rng))
            draws = D._draw(ps, m, schedule, cfg, it, rng)
            round_means.append(D.vsd_step(ps, m, schedule, cfg, draws).mean())
        round_means = np.array(round_means)
        se = round_means.std(ddof=1) / np.sqrt(len(round_means))
        assert abs(round_means.mean()) < 3 * se
        stat = scipy.stats.wilcoxon(round_means)
        assert stat.pvalue > 0.01


class TestUsdStep:
    def test_balanced_equals_vsd_bitwise(self, schedule, narrow_balanced):
        rect = Rectifier(target=TargetMarginal.uniform(2), marginal_source="exact-mc")
        cfg_u = D.DistillConfig(method="usd", iters=100, rectifier=rect)
        cfg_v = D.DistillConfig(method="vsd", iters=100)
        ps = _particles([[1.8], [-2.2], [0.4]])
        state = IntervalEma.create(1000, 10, 2)
        rng = np.random.default_rng(9)
        for it in range(20):
            draws = D._draw(ps, narrow_balanced, schedule, cfg_u, it, rng)
            u = D.usd_step(ps, narrow_balanced, schedule, state, cfg_u, draws)
            v = D.vsd_step(ps, narrow_balanced, schedule, cfg_v, draws)
            assert np.array_equal(u, v)

    def test_decomposition_identity(self, schedule, narrow_biased):
        # usd - vsd == -omega * sigma * J^T grad log r under shared draws
        rect = Rectifier(target=TargetMarginal.uniform(2), marginal_source="exact-mc")
        cfg = D.DistillConfig(method="usd", iters=100, rectifier=rect, grad_norm_align=False)
        cfg_v = D.DistillConfig(method="vsd", iters=100)
        omega = loss_weight(schedule, cfg.omega_kind)
        ps = _particles([[1.5], [-0.7]])
        state = IntervalEma.create(1000, 10, 2)
        rng = np.random.default_rng(10)
        from recdistill.rectify import grad_log_r

        for it in range(20):
            draws = D._draw(ps, narrow_biased, schedule, cfg, it, rng)
            u = D.usd_step(ps, narrow_biased, schedule, state, cfg, draws)
            v = D.vsd_step(ps, narrow_biased, schedule, cfg_v, draws)
            for i in range(2):
                t = int(draws.t[i])
                g_r = grad_log_r(rect, narrow_biased, schedule, t, draws.xt[i],
                                 narrow_biased.category_weights())
                expected = -omega(t) * schedule.sigma[t] * g_r
                diff = u[i] - v[i]
                assert np.max(np.abs(diff - expected)) <= 1e-10 * max(1.0, np.max(np.abs(expected)))

    def test_grad_log_r_matches_finite_differences(self, schedule, narrow_biased):
        from recdistill.oracle import finite_difference_grad
        from recdistill.rectify import Rectifier, grad_log_r, r_value

        rect = Rectifier(target=TargetMarginal.uniform(2))
        marginal = np.array([0.65, 0.35])
        rng = np.random.default_rng(12)
        checked = 0
        for _ in range(100):
            t = int(rng.integers(1, 1001))
            xt = rng.uniform(-3, 3, size=1)
            exact = grad_log_r(rect, narrow_biased, schedule, t, xt, marginal)

            def log_r(v):
                post = worldmodel.category_posterior(narrow_biased, schedule, t, v)
                return np.log(r_value(rect, post, marginal))

            fd = finite_difference_grad(log_r, xt, 1e-5)
            assert np.max(np.abs(fd - exact)) < 1e-5 * (1.0 + np.max(np.abs(exact)))
            checked += 1
        assert checked == 100


class TestCtrlStep:
    def test_saturated_posterior_gives_negligible_control(self, schedule, narrow_balanced):
        # particle deep inside the commanded basin at a low step: the
        # control term (the difference from plain VSD) nearly vanishes
        cfg = D.DistillConfig(method="ctrl", iters=100, control_category=0,
                              grad_norm_align=False)
        cfg_v = D.DistillConfig(method="vsd", iters=100)
        ps = _particles([[2.0]])
        t = np.array([30])
        draws = D._Draws(t=t, pose=np.array([0]), eps=np.array([[0.05]]),
                         xt=np.array([[schedule.alpha[30] * 2.0 + schedule.sigma[30] * 0.05]]))
        c = D.ctrl_step(ps, narrow_balanced, schedule, cfg, draws)
        v = D.vsd_step(ps, narrow_balanced, schedule, cfg_v, draws)
        assert np.max(np.abs(c - v)) < 1e-6

    def test_commanded_basin_wins(self, schedule, narrow_balanced):
        for cat in (0, 1):
            ps = D.ParticleSet.initialise(8, 1, Renderer(), seed=3, scale=2.0)
            cfg = D.DistillConfig(method="ctrl", eta1=0.03, iters=600,
                                  control_category=cat, grad_norm_align=False)
            report = D.run(ps, narrow_balanced, schedule, cfg)
            assert report.metrics[-1][1][cat] >= 0.75

    def test_requires_control_category(self):
        with pytest.raises(ConfigurationError):
            D.DistillConfig(method="ctrl", iters=10)
        with pytest.raises(ConfigurationError):
            D.DistillConfig(method="vsd", iters=10, control_category=1)


class TestRun:
    def test_seed_determinism(self, schedule, narrow_biased):
        rect = Rectifier(target=TargetMarginal.uniform(2))
        cfg = D.DistillConfig(method="usd", iters=60, rectifier=rect, snapshot_every=20)
        reports = []
        for _ in range(2):
            ps = D.ParticleSet.initialise(4, 1, Renderer(), seed=7, scale=2.0)
            reports.append(D.run(ps, narrow_biased, schedule, cfg))
        a, b = reports
        assert np.array_equal(a.final_particles, b.final_particles)
        for (ia, sa), (ib, sb) in zip(a.snapshots, b.snapshots):
            assert ia == ib and np.array_equal(sa, sb)
        for (ia, ea), (ib, eb) in zip(a.ema_trace, b.ema_trace):
            assert ia == ib and np.array_equal(ea, eb)

    def test_particle_count_conserved(self, schedule, narrow_biased):
        ps = D.ParticleSet.initialise(5, 1, Renderer(), seed=1, scale=2.0)
        cfg = D.DistillConfig(method="vsd", iters=30)
        report = D.run(ps, narrow_biased, schedule, cfg)
        assert report.final_particles.shape == (5, 1)
        for _, snap in report.snapshots:
            assert snap.shape == (5, 1)

    def test_balanced_usd_reproduces_vsd_trajectory(self, schedule, narrow_balanced):
        rect = Rectifier(target=TargetMarginal.uniform(2), marginal_source="exact-mc")
        ps = D.ParticleSet.initialise(4, 1, Renderer(), seed=2, scale=2.0)
        r_usd = D.run(ps, narrow_balanced, schedule,
                      D.DistillConfig(method="usd", iters=80, rectifier=rect))
        r_vsd = D.run(ps, narrow_balanced, schedule,
                      D.DistillConfig(method="vsd", iters=80))
        assert np.array_equal(r_usd.final_particles, r_vsd.final_particles)

    def test_divergence_aborts_with_diagnostic(self, schedule, narrow_biased):
        ps = D.ParticleSet.initialise(2, 1, Renderer(), seed=0, scale=2.0)
        cfg = D.DistillConfig(method="sds", eta1=1e9, iters=50, omega_kind="constant-one")
        with pytest.raises(DivergenceError, match=r"iteration \d+ \(method 'sds'\)"):
            D.run(ps, narrow_biased, schedule, cfg)

    def test_report_files_roundtrip(self, tmp_path, schedule, narrow_biased):
        ps = D.ParticleSet.initialise(3, 1, Renderer(), seed=4, scale=2.0)
        cfg = D.DistillConfig(method="vsd", iters=40, snapshot_every=10)
        report = D.run(ps, narrow_biased, schedule, cfg)
        D.write_report(report, tmp_path / "a")
        D.write_report(report, tmp_path / "b")
        for name in ("particles.csv", "ema.csv", "metrics.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        header = (tmp_path / "a" / "particles.csv").read_text().splitlines()[0]
        assert header == "iter,particle,x0"


class TestConfigValidation:
    def test_unknown_method(self):
        with pytest.raises(ConfigurationError):
            D.DistillConfig(method="gradient-flow")

    def test_usd_needs_rectifier(self):
        with pytest.raises(ConfigurationError):
            D.DistillConfig(method="usd")

    def test_nonpositive_rate(self):
        with pytest.raises(ConfigurationError):
            D.DistillConfig(method="vsd", eta1=0.0)
