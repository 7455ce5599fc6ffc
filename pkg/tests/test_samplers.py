import math

import numpy as np
import pytest
from scipy import stats

from rtchmc.diagnostics import iac, mc_average_with_error
from rtchmc.errors import DimensionMismatchError, IntegrationError, OffManifoldError
from rtchmc.manifolds import EuclideanBlock, constraint_violation
from rtchmc.models import BvmfParams, LangevinConfig, SamplerConfig
from rtchmc.samplers import (
    acceptance_probability,
    draw_duration,
    gbaoab,
    ornstein_uhlenbeck_step,
    rmhmc_fixed,
    rt_chmc_metropolis,
    rt_chmc_unadjusted,
    rt_rmhmc_exact_sphere,
    step_schedule,
    violates_nonneg,
)
from rtchmc.targets import TargetDensity, bvmf_target, uniform_target


def sphere_quadrature(n_theta=200, n_phi=400):
    """Latitude-longitude midpoint grid on S^2 with area weights."""
    theta = (np.arange(n_theta) + 0.5) * np.pi / n_theta
    phi = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    points = np.stack([np.cos(T), np.sin(T) * np.cos(P), np.sin(T) * np.sin(P)], axis=-1)
    return points.reshape(-1, 3), np.sin(T).reshape(-1)


def quadrature_mean(target, f):
    points, area = sphere_quadrature()
    potentials = np.array([target.potential(x) for x in points])
    weights = area * np.exp(-(potentials - potentials.min()))
    values = np.array([f(x, u) for x, u in zip(points, potentials)])
    return float(weights @ values / weights.sum())


def assert_within_se(series, expected, k):
    mean, stderr = mc_average_with_error(series)
    assert abs(mean - expected) <= k * stderr, (mean, expected, stderr)


class TestSchedule:
    """Test duration and stepsize bookkeeping."""

    def test_ceiling_arithmetic(self):
        L, h = step_schedule(0.35, 0.1)
        assert L == 4
        assert h == pytest.approx(0.0875)

    def test_duration_equal_to_cap(self):
        assert step_schedule(1e-3, 1e-3) == (1, 1e-3)

    def test_durations_are_exponential(self):
        rng = np.random.default_rng(3)
        draws = np.array([draw_duration(rng, 0.1) for _ in range(100_000)])
        assert abs(draws.mean() - 0.1) <= 3 * draws.std() / math.sqrt(draws.size)
        assert stats.kstest(draws, "expon", args=(0, 0.1)).pvalue > 0.01


class TestAcceptanceProbability:
    """Test the Metropolis acceptance rule."""

    @pytest.mark.parametrize(
        "start,end", [(1.0, 1.0), (1.0, 0.5), (0.0, 2.0), (-3.0, -1.0), (5.0, 5.5)]
    )
    def test_matches_min_formula(self, start, end):
        assert acceptance_probability(start, end) == min(1.0, math.exp(start - end))

    def test_non_finite_energy_is_rejected(self):
        assert acceptance_probability(0.0, math.nan) == 0.0
        assert acceptance_probability(0.0, math.inf) == 0.0

    def test_nonneg_helper(self):
        assert violates_nonneg(np.array([1.0, -0.1, 2.0]), [(1, 2)])
        assert not violates_nonneg(np.array([-1.0, 0.0, 2.0]), [(1, 3)])


class TestRtChmcMetropolis:
    """Test the Metropolis-adjusted randomized-time sampler."""

    def test_uniform_target_always_accepts(self, sphere2):
        cfg = SamplerConfig(mean_duration=0.1, dt_max=1e-3, n_samples=200, seed=1)
        record = rt_chmc_metropolis(sphere2, uniform_target(3), np.array([1.0, 0, 0]), cfg)
        assert record.acceptance_rate >= 0.995
        assert record.shake_failures == 0
        assert record.n_samples == 200
        assert record.acceptance_rate == np.mean(record.accepted)

    def test_deterministic(self, sphere2, mild_bvmf):
        cfg = SamplerConfig(mean_duration=0.2, dt_max=0.02, n_samples=300, seed=11)
        x0 = np.array([1.0, 0.0, 0.0])
        a = rt_chmc_metropolis(sphere2, mild_bvmf, x0, cfg)
        b = rt_chmc_metropolis(sphere2, mild_bvmf, x0, cfg)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.accepted, b.accepted)

    def test_samples_stay_on_manifold(self, stiefel62, rng):
        target = uniform_target(12)
        cfg = SamplerConfig(mean_duration=0.3, dt_max=0.05, n_samples=200, seed=2)
        record = rt_chmc_metropolis(stiefel62, target, stiefel62.random_point(rng), cfg)
        assert max(constraint_violation(stiefel62, x) for x in record.samples) <= 1e-12

    def test_matches_quadrature(self, sphere2, mild_bvmf):
        """Test x1, x1^2 and -log pi against quadrature within 4 standard errors."""
        cfg = SamplerConfig(mean_duration=0.5, dt_max=0.05, n_samples=10_000, seed=5)
        record = rt_chmc_metropolis(sphere2, mild_bvmf, np.array([1.0, 0.0, 0.0]), cfg)
        burn = record.n_samples // 10
        x1 = record.samples[burn:, 0]
        assert_within_se(x1, quadrature_mean(mild_bvmf, lambda x, u: x[0]), 4)
        assert_within_se(x1**2, quadrature_mean(mild_bvmf, lambda x, u: x[0] ** 2), 4)
        assert_within_se(
            record.potentials[burn:], quadrature_mean(mild_bvmf, lambda x, u: u), 4
        )
        assert record.acceptance_rate > 0.95

    def test_nonnegativity_rejection(self):
        M = EuclideanBlock(2, nonneg=True)
        target = TargetDensity("gauss", 2, lambda x: 0.5 * float(x @ x), lambda x: x.copy())
        cfg = SamplerConfig(
            mean_duration=0.5, dt_max=0.05, n_samples=2000, seed=3, nonneg_blocks=[(0, 2)]
        )
        record = rt_chmc_metropolis(M, target, np.array([1.0, 1.0]), cfg)
        assert record.samples.min() >= 0.0
        assert record.acceptance_rate < 1.0

    def test_reversibility_failures_grow_with_stepsize(self, sphere2, stiff_bvmf):
        x0 = np.array([0.0, 0.0, 1.0])

        def failure_ratio(dt_max, n):
            cfg = SamplerConfig(
                mean_duration=0.1, dt_max=dt_max, n_samples=n, seed=9, enable_rev_check=True
            )
            record = rt_chmc_metropolis(sphere2, stiff_bvmf, x0, cfg)
            return (record.rev_failures + record.shake_failures) / n

        assert failure_ratio(1e-3, 200) == 0.0
        assert failure_ratio(5e-2, 500) > 0.0

    def test_gradient_evaluations(self, sphere2):
        cfg = SamplerConfig(mean_duration=0.1, dt_max=0.01, n_samples=50, seed=4)
        record = rt_chmc_metropolis(sphere2, uniform_target(3), np.array([1.0, 0, 0]), cfg)
        steps = sum(step_schedule(T, cfg.dt_max)[0] for T in record.durations)
        assert record.grad_evals == 1 + steps

    def test_off_manifold_start(self, sphere2, mild_bvmf):
        with pytest.raises(OffManifoldError):
            rt_chmc_metropolis(sphere2, mild_bvmf, np.array([1.0, 1.0, 0.0]), SamplerConfig())

    def test_target_dimension_mismatch(self, sphere2):
        with pytest.raises(DimensionMismatchError):
            rt_chmc_metropolis(
                sphere2, uniform_target(4), np.array([1.0, 0, 0]), SamplerConfig()
            )

    def test_shake_failures_are_rejections(self, sphere2, mild_bvmf):
        cfg = SamplerConfig(
            mean_duration=1.0, dt_max=10.0, n_samples=50, seed=6, shake_max_iters=1
        )
        x0 = np.array([1.0, 0.0, 0.0])
        record = rt_chmc_metropolis(sphere2, mild_bvmf, x0, cfg)
        assert record.shake_failures > 0
        assert not record.accepted.all()


class TestRmhmcFixed:
    """Test the fixed-duration baseline."""

    def test_durations_are_fixed(self, sphere2, mild_bvmf):
        cfg = SamplerConfig(mean_duration=0.09, dt_max=0.01, n_samples=100, seed=1)
        record = rmhmc_fixed(sphere2, mild_bvmf, np.array([1.0, 0.0, 0.0]), cfg)
        np.testing.assert_array_equal(record.durations, np.full(100, 0.09))
        assert record.sampler == "rmhmc"

    def test_deterministic(self, sphere2, mild_bvmf):
        cfg = SamplerConfig(mean_duration=0.1, dt_max=0.01, n_samples=100, seed=8)
        x0 = np.array([1.0, 0.0, 0.0])
        np.testing.assert_array_equal(
            rmhmc_fixed(sphere2, mild_bvmf, x0, cfg).samples,
            rmhmc_fixed(sphere2, mild_bvmf, x0, cfg).samples,
        )


class TestRtChmcUnadjusted:
    """Test the unadjusted randomized-time sampler."""

    def test_uniform_moments(self, sphere2):
        cfg = SamplerConfig(mean_duration=0.5, dt_max=0.05, n_samples=20_000, seed=12)
        record = rt_chmc_unadjusted(sphere2, uniform_target(3), np.array([1.0, 0, 0]), cfg)
        kept = record.samples[2000:]
        for i in range(3):
            assert_within_se(kept[:, i] ** 2, 1 / 3, 4)
        assert record.acceptance_rate == 1.0

    def test_per_step_thinning(self, sphere2, mild_bvmf):
        cfg = SamplerConfig(
            mean_duration=0.1, dt_max=0.02, n_samples=30, seed=2, thin_per_step=True
        )
        record = rt_chmc_unadjusted(sphere2, mild_bvmf, np.array([1.0, 0, 0]), cfg)
        steps = sum(step_schedule(T, cfg.dt_max)[0] for T in record.durations)
        assert record.samples.shape == (steps, 3)
        assert record.potentials.shape == (steps,)
        assert record.accepted.shape == (30,)

    def test_shake_failure_aborts(self, sphere2, mild_bvmf):
        cfg = SamplerConfig(
            mean_duration=1.0, dt_max=10.0, n_samples=50, seed=6, shake_max_iters=1
        )
        with pytest.raises(IntegrationError, match="SHAKE failed"):
            rt_chmc_unadjusted(sphere2, mild_bvmf, np.array([1.0, 0.0, 0.0]), cfg)

    @pytest.mark.slow
    def test_small_stepsize_agrees_with_metropolized(self, sphere2, mild_bvmf):
        x0 = np.array([1.0, 0.0, 0.0])
        reference = rt_chmc_metropolis(
            sphere2,
            mild_bvmf,
            x0,
            SamplerConfig(mean_duration=0.1, dt_max=1e-2, n_samples=20_000, seed=31),
        )
        unadjusted = rt_chmc_unadjusted(
            sphere2,
            mild_bvmf,
            x0,
            SamplerConfig(mean_duration=0.1, dt_max=1e-3, n_samples=10_000, seed=32),
        )
        a = mc_average_with_error(unadjusted.potentials[1000:])
        b = mc_average_with_error(reference.potentials[2000:])
        assert abs(a[0] - b[0]) <= 4 * math.hypot(a[1], b[1]), (a, b)

    @pytest.mark.slow
    def test_bias_grows_with_stepsize(self, sphere2):
        """Unadjusted averages of -log pi drift away as the stepsize grows.

        A von Mises-Fisher target with kappa = 200 is close to Gaussian with
        tangential frequency sqrt(200), which makes the RATTLE bias visible.
        """
        target = bvmf_target(
            BvmfParams(A=np.zeros((3, 3)), c=np.array([200.0, 0.0, 0.0]))
        )
        x0 = np.array([1.0, 0.0, 0.0])

        def estimate(sampler, dt_max, seed):
            cfg = SamplerConfig(
                mean_duration=0.2, dt_max=dt_max, n_samples=50_000, seed=seed
            )
            record = sampler(sphere2, target, x0, cfg)
            return mc_average_with_error(record.potentials[5000:])

        reference = estimate(rt_chmc_metropolis, 1e-2, 41)
        medium = estimate(rt_chmc_unadjusted, 0.05, 42)
        large = estimate(rt_chmc_unadjusted, 0.1, 43)
        gaps = [value[0] - reference[0] for value in (medium, large)]
        errors = [math.hypot(value[1], reference[1]) for value in (medium, large)]
        observed = {"reference": reference, "h=0.05": medium, "h=0.1": large}

        assert 0.0 < gaps[0] < gaps[1], observed
        assert gaps[0] > 3 * errors[0], observed
        assert gaps[1] > 3 * errors[1], observed


class TestExactSphere:
    """Test the exact-flow uniform sampler."""

    def test_unit_norm(self):
        cfg = SamplerConfig(mean_duration=1.0, n_samples=1000, seed=1)
        record = rt_rmhmc_exact_sphere(3, np.array([0.0, 0.0, 1.0]), cfg)
        assert np.max(np.abs(np.linalg.norm(record.samples, axis=1) - 1.0)) <= 1e-12
        assert record.acceptance_rate == 1.0
        assert record.grad_evals == 0

    def test_uniform_moments(self):
        cfg = SamplerConfig(mean_duration=1.0, n_samples=20_000, seed=4)
        record = rt_rmhmc_exact_sphere(3, np.array([1.0, 0.0, 0.0]), cfg)
        for i in range(3):
            assert_within_se(record.samples[:, i], 0.0, 4)
            assert_within_se(record.samples[:, i] ** 2, 1 / 3, 4)

    def test_short_durations_mix_slowly(self):
        cfg = SamplerConfig(mean_duration=1e-3, n_samples=20_000, seed=4)
        record = rt_rmhmc_exact_sphere(3, np.array([1.0, 0.0, 0.0]), cfg)
        assert iac(record.samples[:, 0]).tau > 10

    def test_off_manifold_start(self):
        with pytest.raises(OffManifoldError):
            rt_rmhmc_exact_sphere(3, np.array([1.0, 0.1, 0.0]), SamplerConfig())


class TestGbaoab:
    """Test the constrained Langevin baseline."""

    def test_large_friction_refreshes_velocity(self, sphere2):
        rng = np.random.default_rng(0)
        x = np.array([0.0, 0.0, 1.0])
        v = np.array([5.0, -5.0, 0.0])
        draws = np.array(
            [ornstein_uhlenbeck_step(sphere2, x, v, 1e6, 0.01, rng) for _ in range(5000)]
        )
        assert stats.kstest(draws[:, 0], "norm").pvalue > 0.01
        assert stats.kstest(draws[:, 1], "norm").pvalue > 0.01
        np.testing.assert_allclose(draws[:, 2], 0.0, atol=1e-12)

    def test_free_flight_keeps_invariants(self, sphere2):
        lcfg = LangevinConfig(gamma=0.0, h=0.01, n_samples=10_000, seed=3)
        record = gbaoab(sphere2, uniform_target(3), np.array([1.0, 0.0, 0.0]), lcfg)
        assert max(constraint_violation(sphere2, x) for x in record.samples) <= 1e-10

    def test_free_flight_conserves_speed(self, sphere2):
        """Test gamma = 0 on U = 0 keeps the kinetic energy of the first draw."""
        lcfg = LangevinConfig(gamma=0.0, h=0.01, n_samples=500, seed=3)
        record = gbaoab(sphere2, uniform_target(3), np.array([1.0, 0.0, 0.0]), lcfg)
        np.testing.assert_allclose(record.energy, record.energy[0], rtol=1e-6)

    def test_shake_failure_aborts(self, sphere2, mild_bvmf):
        lcfg = LangevinConfig(gamma=1.0, h=5.0, n_samples=20, seed=1, shake_max_iters=1)
        with pytest.raises(IntegrationError):
            gbaoab(sphere2, mild_bvmf, np.array([1.0, 0.0, 0.0]), lcfg)

    def test_deterministic(self, sphere2, mild_bvmf):
        lcfg = LangevinConfig(gamma=2.0, h=0.05, n_samples=200, seed=7)
        x0 = np.array([1.0, 0.0, 0.0])
        np.testing.assert_array_equal(
            gbaoab(sphere2, mild_bvmf, x0, lcfg).samples,
            gbaoab(sphere2, mild_bvmf, x0, lcfg).samples,
        )

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            LangevinConfig(gamma=-1.0, h=0.1)
        with pytest.raises(ValueError):
            LangevinConfig(gamma=1.0, h=0.0)
