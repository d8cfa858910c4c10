#!/usr/bin/env python3
"""
Tests for the noise schedule, the self-consistency projection T and the
reverse-time sampler.
"""
import math
import os
import sys
import unittest
from unittest.mock import patch

import numpy as np

# Add parent directory to path to import package modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sms_diffusion.calibration import fit_kernels
from sms_diffusion.diffusion import (
    NoiseSchedule,
    ReverseSampler,
    SelfConsistencyProjection,
    VESchedule,
    perturb,
    project_T,
    reverse_sample,
)
from sms_diffusion.metrics import nmse
from sms_diffusion.operators import CompositeH, SamplingOperator
from sms_diffusion.sgsp import sgsp_reconstruct
from sms_diffusion.simulation import make_mask, simulate
from sms_diffusion.tensor_core import fft2c
from utils import DivergenceError, InvalidArgumentError, PhantomSpec, ProjectionConfig, SamplerConfig, SgspConfig
from tests.oracles import (
    calibrated_operator,
    dense,
    expected_projection,
    filtered_operator,
    identity_operator,
    random_complex,
    random_kernel_sets,
    split_operator,
)


class TestVESchedule(unittest.TestCase):
    """sigma, beta and eta of the variance-exploding schedule."""

    def setUp(self):
        self.schedule = VESchedule(sigma_min=0.01, sigma_max=10.0, kappa=2.0)

    def test_end_points(self):
        self.assertEqual(self.schedule.sigma(0.0), 0.0)
        self.assertAlmostEqual(self.schedule.sigma(1.0), 0.01 * math.sqrt(1e6 - 1), places=10)

    def test_beta_is_variance_rate(self):
        for t in (0.1, 0.5, 0.9):
            h = 1e-6
            rate = (self.schedule.sigma(t + h) ** 2 - self.schedule.sigma(t - h) ** 2) / (2 * h)
            self.assertAlmostEqual(self.schedule.beta(t) / rate, 1.0, places=6)
            self.assertAlmostEqual(self.schedule.eta(t), 2.0 * self.schedule.beta(t))

    def test_timesteps(self):
        steps = self.schedule.timesteps(4, 0.2)
        np.testing.assert_allclose(steps, [1.0, 0.8, 0.6, 0.4, 0.2])
        with self.assertRaises(InvalidArgumentError):
            self.schedule.timesteps(0, 0.1)

    def test_invalid_parameters(self):
        with self.assertRaises(InvalidArgumentError):
            VESchedule(sigma_min=1.0, sigma_max=0.5)
        with self.assertRaises(InvalidArgumentError):
            VESchedule(kappa=-1.0)


class TestProjection(unittest.TestCase):
    """T(z) = argmin ||(H - I) F z'||^2 + mu ||z' - z||^2."""

    def setUp(self):
        self.rng = np.random.default_rng(47)

    def test_identity_when_consistent(self):
        z = random_complex(self.rng, (1, 2, 8, 8))
        result = project_T(z, identity_operator((8, 8)))
        np.testing.assert_allclose(result.z, z, atol=1e-12)
        self.assertTrue(result.converged)

    def test_closed_form(self):
        H = filtered_operator((6, 6))
        z = random_complex(self.rng, (2, 2, 6, 6))
        cfg = ProjectionConfig(mu=0.3, max_iter=100, tol=1e-12)
        result = SelfConsistencyProjection(H, cfg).project(z)
        self.assertTrue(result.converged)
        np.testing.assert_allclose(result.z, expected_projection(z, 0.3, (6, 6)), atol=1e-9)

    def test_batched(self):
        H = filtered_operator((6, 6))
        T = SelfConsistencyProjection(H, ProjectionConfig(mu=0.3, max_iter=100, tol=1e-12))
        z = random_complex(self.rng, (3, 2, 2, 6, 6))
        batched = T(z)
        for i in range(3):
            np.testing.assert_allclose(batched[i], T(z[i]), atol=1e-9)

    def test_contracts_and_reduces_inconsistency(self):
        H = filtered_operator((6, 6))
        z = random_complex(self.rng, (2, 2, 6, 6))
        projected = project_T(z, H, ProjectionConfig(mu=0.1, max_iter=50, tol=1e-10)).z
        self.assertLessEqual(np.linalg.norm(projected), np.linalg.norm(z))
        self.assertLess(H.residual_norm(projected), H.residual_norm(z))

    def test_direct_solve_matches_dense_system(self):
        spirit, grappa = random_kernel_sets(self.rng, n_slice=2, n_coil=2, caipi_increment=np.pi)
        H = CompositeH(spirit, grappa, (4, 4))
        T = SelfConsistencyProjection(H, ProjectionConfig(mu=0.3))
        self.assertEqual(T.method, "direct")

        shape = (2, 2, 4, 4)
        psi = dense(H.normal_psi, shape)
        z = random_complex(self.rng, shape)
        expected = 0.3 * np.linalg.solve(psi + 0.3 * np.eye(psi.shape[0]), z.ravel())
        result = T.project(z)
        self.assertTrue(result.converged)
        self.assertEqual(result.iterations, 0)
        np.testing.assert_allclose(result.z.ravel(), expected, atol=1e-9 * np.abs(expected).max())

    def test_forced_cg_matches_closed_form(self):
        H = filtered_operator((6, 6))
        z = random_complex(self.rng, (2, 2, 6, 6))
        T = SelfConsistencyProjection(H, ProjectionConfig(mu=0.3, solver="cg", max_iter=100, tol=1e-12))
        self.assertEqual(T.method, "cg")
        np.testing.assert_allclose(T(z), expected_projection(z, 0.3, (6, 6)), atol=1e-9)

    def test_fractional_shift_falls_back_to_cg(self):
        spirit, grappa = random_kernel_sets(self.rng, n_slice=2, n_coil=2, caipi_increment=0.7)
        H = CompositeH(spirit, grappa, (4, 4))
        with patch("sms_diffusion.diffusion.logger") as mock_logger:
            T = SelfConsistencyProjection(H, ProjectionConfig(max_iter=2, tol=1e-14))
            self.assertEqual(T.method, "cg")
            mock_logger.info.assert_called_once()

            first = T.project(random_complex(self.rng, (2, 2, 4, 4)))
            T.project(random_complex(self.rng, (2, 2, 4, 4)))
            self.assertFalse(first.converged)
            self.assertEqual(mock_logger.warning.call_count, 1)
            self.assertIn("approximately linear", mock_logger.warning.call_args[0][0])

    def test_direct_solver_unavailable(self):
        spirit, grappa = random_kernel_sets(self.rng, n_slice=2, n_coil=2, caipi_increment=0.7)
        with self.assertRaises(InvalidArgumentError):
            SelfConsistencyProjection(CompositeH(spirit, grappa, (4, 4)), ProjectionConfig(solver="direct"))
        with self.assertRaises(InvalidArgumentError):
            SelfConsistencyProjection(filtered_operator(), ProjectionConfig(solver="direct", max_block_entries=10))

    def test_idempotent_on_separated_spectrum(self):
        H = split_operator((6, 6))
        T = SelfConsistencyProjection(H, ProjectionConfig(mu=1e-9))
        z = random_complex(self.rng, H.dims)
        once = T(z)
        np.testing.assert_allclose(once[0], z[0], atol=1e-12)
        np.testing.assert_allclose(once[1], z[1] * 1e-9 / (1.0 + 1e-9), atol=1e-12)
        self.assertLess(np.linalg.norm(T(once) - once), 1e-8 * np.linalg.norm(z))

    def test_non_finite_input(self):
        z = np.full((1, 2, 8, 8), np.nan, dtype=complex)
        with self.assertRaises(InvalidArgumentError):
            project_T(z, identity_operator((8, 8)))

    def test_perturb(self):
        x0 = random_complex(self.rng, (1, 2, 8, 8))
        schedule = VESchedule()
        T = SelfConsistencyProjection(identity_operator((8, 8)))
        x_t, z = perturb(x0, 0.5, schedule, np.random.default_rng(0), T)
        np.testing.assert_allclose(x_t, x0 + schedule.sigma(0.5) * z, atol=1e-12)
        with self.assertRaises(InvalidArgumentError):
            perturb(x0, 0.0, schedule, np.random.default_rng(0), T)


class TestCalibratedProjection(unittest.TestCase):
    """T built from kernels fitted to a simulated SMS3 acquisition."""

    @classmethod
    def setUpClass(cls):
        cls.H, _ = calibrated_operator()
        cls.T = SelfConsistencyProjection(cls.H, ProjectionConfig(mu=1e-2))

    def setUp(self):
        self.rng = np.random.default_rng(59)

    def test_solved_directly(self):
        self.assertEqual(self.T.method, "direct")
        self.assertTrue(self.T.project(random_complex(self.rng, self.H.dims)).converged)

    def test_linear(self):
        u = random_complex(self.rng, self.H.dims)
        v = random_complex(self.rng, self.H.dims)
        a, b = 0.7 - 1.2j, -2.5 + 0.3j
        combined = self.T(a * u + b * v)
        np.testing.assert_allclose(combined, a * self.T(u) + b * self.T(v), atol=1e-10 * np.linalg.norm(u))

    def test_hermitian(self):
        u = random_complex(self.rng, self.H.dims)
        v = random_complex(self.rng, self.H.dims)
        lhs = np.vdot(self.T(u), v)
        rhs = np.vdot(u, self.T(v))
        self.assertLess(abs(lhs - rhs), 1e-10 * np.linalg.norm(u) * np.linalg.norm(v))

    def test_contracts_and_reduces_inconsistency(self):
        batch = random_complex(self.rng, (50,) + self.H.dims)
        projected = self.T(batch)
        for z, tz in zip(batch, projected):
            self.assertLessEqual(np.linalg.norm(tz), np.linalg.norm(z) * (1.0 + 1e-12))
            self.assertLess(self.H.residual_norm(tz), self.H.residual_norm(z))

    def test_idempotence_gap_is_bounded(self):
        # each eigen-direction is scaled by f in (0, 1], so T^2 - T scales it by f(f - 1)
        z = random_complex(self.rng, self.H.dims)
        once = self.T(z)
        self.assertLessEqual(np.linalg.norm(self.T(once) - once), 0.25 * np.linalg.norm(z))


class _ConstantSchedule(NoiseSchedule):
    def __init__(self, sigma, beta, eta):
        self._sigma, self._beta, self._eta = sigma, beta, eta

    def sigma(self, t):
        return self._sigma

    def beta(self, t):
        return self._beta

    def eta(self, t):
        return self._eta


class TestPerturbationCovariance(unittest.TestCase):
    """x_t - x_0 = sigma(t) T z has covariance 2 sigma^2 T T^H."""

    def test_empirical_covariance(self):
        H = filtered_operator((6, 6))
        T = SelfConsistencyProjection(H, ProjectionConfig(mu=0.3))
        schedule = VESchedule(sigma_min=0.01, sigma_max=2.0)
        t = 0.6
        sigma = schedule.sigma(t)
        matrix = dense(T, H.dims)
        expected = 2.0 * sigma**2 * matrix @ matrix.conj().T

        rng = np.random.default_rng(61)
        n_draws, chunk = 60000, 6000
        x0 = np.zeros((chunk,) + H.dims, dtype=complex)
        covariance = np.zeros_like(expected)
        for _ in range(n_draws // chunk):
            x_t, _ = perturb(x0, t, schedule, rng, T)
            d = x_t.reshape(chunk, -1)
            covariance += d.T @ d.conj()
        covariance /= n_draws

        error = np.linalg.norm(covariance - expected) / np.linalg.norm(expected)
        self.assertLess(error, 0.05)


def _unit_gaussian_score(schedule):
    return lambda x, t: -x / (1.0 + schedule.sigma(t) ** 2)


class TestReverseSampler(unittest.TestCase):
    """Euler-Maruyama integration of the projected reverse SDE."""

    def setUp(self):
        self.rng = np.random.default_rng(53)

    def _gaussian_setup(self, grid):
        H = identity_operator(grid)
        plan = make_mask(accel=1, acs_lines=0, grid=grid)
        y = np.zeros((1, 2) + grid, dtype=complex)
        return H, plan, y

    def test_gaussian_target(self):
        """With an exact Gaussian score the chain ends at that Gaussian."""
        grid = (100, 100)
        H, plan, y = self._gaussian_setup(grid)
        mean = random_complex(self.rng, (1, 2) + grid)
        spread = 0.5
        schedule = VESchedule(sigma_min=0.01, sigma_max=5.0)

        def score(x, t):
            return -(x - mean) / (spread**2 + schedule.sigma(t) ** 2)

        cfg = SamplerConfig(dc_weight=0.0, final_data_consistency=False, log_every=500)
        result = reverse_sample(
            y, plan, H, score, schedule, np.random.default_rng(1), cfg, x_init=mean, n_steps=2000, eps=1e-3
        )
        deviation = result.x - mean
        self.assertLess(abs(deviation.real.mean()), 0.02)
        self.assertLess(abs(deviation.imag.mean()), 0.02)
        self.assertAlmostEqual(deviation.real.std() / spread, 1.0, delta=0.05)
        self.assertAlmostEqual(deviation.imag.std() / spread, 1.0, delta=0.05)

    def test_seeded_runs_are_identical(self):
        H = filtered_operator((6, 6))
        plan = make_mask(accel=2, acs_lines=2, grid=(6, 6), caipi_increment=0.0)
        y = SamplingOperator(plan, 2).project(random_complex(self.rng, (1, 2, 6, 6)))
        schedule = VESchedule()
        sampler = ReverseSampler(y, plan, H, _unit_gaussian_score(schedule), schedule, SamplerConfig(n_corrector=1))
        first = sampler.sample(np.random.default_rng(7), n_steps=10)
        second = sampler.sample(np.random.default_rng(7), n_steps=10)
        np.testing.assert_array_equal(first.x, second.x)
        self.assertEqual(first.trajectory, second.trajectory)

    def test_final_data_consistency(self):
        H = filtered_operator((6, 6))
        plan = make_mask(accel=2, acs_lines=2, grid=(6, 6), caipi_increment=np.pi)
        D = SamplingOperator(plan, 2)
        y = D.project(random_complex(self.rng, (1, 2, 6, 6)))
        truth = random_complex(self.rng, (2, 2, 6, 6))
        result = reverse_sample(
            y, plan, H, lambda x, t: np.zeros_like(x), VESchedule(), np.random.default_rng(3),
            n_steps=5, truth=truth,
        )
        np.testing.assert_allclose(D.apply(fft2c(result.x)), y, atol=1e-10)
        final = result.trajectory[-1]
        self.assertEqual(final["step"], 5)
        self.assertIn("nmse", final)
        self.assertIn("consistency_ratio", final)

    def test_trajectory_cadence(self):
        H, plan, y = self._gaussian_setup((8, 8))
        cfg = SamplerConfig(log_every=4, final_data_consistency=False)
        schedule = VESchedule()
        result = reverse_sample(y, plan, H, _unit_gaussian_score(schedule), schedule, np.random.default_rng(0), cfg, n_steps=10)
        self.assertEqual([entry["step"] for entry in result.trajectory], [0, 4, 8, 9])

    def test_divergence(self):
        H, plan, y = self._gaussian_setup((8, 8))
        with self.assertRaises(DivergenceError):
            reverse_sample(
                y, plan, H, lambda x, t: np.full_like(x, np.nan), VESchedule(), np.random.default_rng(0), n_steps=3
            )

    def test_score_shape_checked(self):
        H, plan, y = self._gaussian_setup((8, 8))
        with self.assertRaises(InvalidArgumentError):
            reverse_sample(y, plan, H, lambda x, t: x[:, :1], VESchedule(), np.random.default_rng(0), n_steps=2)

    def test_initial_image_checked(self):
        H, plan, y = self._gaussian_setup((8, 8))
        with self.assertRaises(InvalidArgumentError):
            reverse_sample(
                y, plan, H, lambda x, t: -x, VESchedule(), np.random.default_rng(0),
                x_init=np.zeros((2, 2, 8, 8), dtype=complex), n_steps=2,
            )


    def test_frozen_dynamics(self):
        """sigma = beta = eta = 0 leaves the initial image untouched."""
        H = filtered_operator((6, 6))
        plan = make_mask(accel=2, acs_lines=2, grid=(6, 6), caipi_increment=0.0)
        y = SamplingOperator(plan, 2).project(random_complex(self.rng, (1, 2, 6, 6)))
        x_init = random_complex(self.rng, (2, 2, 6, 6))
        cfg = SamplerConfig(dc_weight=0.0, final_data_consistency=False)
        result = reverse_sample(
            y, plan, H, lambda x, t: np.zeros_like(x), _ConstantSchedule(0.0, 0.0, 0.0), np.random.default_rng(5),
            cfg, x_init=x_init, n_steps=20,
        )
        np.testing.assert_array_equal(result.x, x_init)
        self.assertEqual(result.clipped_steps, 0)


class TestDriftClipping(unittest.TestCase):
    """Psi-drift steps past the explicit-Euler limit are cut back to 1 / L (L = 4 here)."""

    n_steps = 400

    def setUp(self):
        self.rng = np.random.default_rng(67)
        self.H = filtered_operator((6, 6))
        self.plan = make_mask(accel=2, acs_lines=2, grid=(6, 6), caipi_increment=0.0)
        self.y = SamplingOperator(self.plan, 2).project(random_complex(self.rng, (1, 2, 6, 6)))
        self.x_init = random_complex(self.rng, (2, 2, 6, 6))
        self.dt = (1.0 - 1e-3) / self.n_steps

    def _run(self, drift_times_l, clip):
        # drift = 0.5 * dt * eta
        schedule = _ConstantSchedule(0.1, 1e-6, drift_times_l / (4.0 * 0.5 * self.dt))
        cfg = SamplerConfig(dc_weight=0.0, final_data_consistency=False, clip_drift=clip)
        return reverse_sample(
            self.y, self.plan, self.H, lambda x, t: np.zeros_like(x), schedule, np.random.default_rng(9),
            cfg, x_init=self.x_init, n_steps=self.n_steps,
        )

    def test_unstable_drift_diverges_without_clipping(self):
        with self.assertRaises(DivergenceError):
            self._run(10.0, clip=False)

    def test_unstable_drift_is_clipped(self):
        result = self._run(10.0, clip=True)
        self.assertTrue(np.all(np.isfinite(result.x)))
        self.assertEqual(result.clipped_steps, self.n_steps)
        self.assertLessEqual(np.linalg.norm(result.x), 2.0 * np.linalg.norm(self.x_init))

    def test_stable_drift_is_left_alone(self):
        clipped = self._run(1.5, clip=True)
        plain = self._run(1.5, clip=False)
        self.assertEqual(clipped.clipped_steps, 0)
        np.testing.assert_array_equal(clipped.x, plain.x)

    def test_default_keeps_clipping_on(self):
        self.assertTrue(SamplerConfig().clip_drift)

@unittest.skipUnless(os.getenv("SMS_RUN_SLOW") == "1", "set SMS_RUN_SLOW=1 for reconstruction-quality runs")
class TestReconstructionQuality(unittest.TestCase):
    """
    SMS3, 8 coils, 60x60, 32 ACS lines. The score is exact for a narrow
    Gaussian prior around the truth, so the sampler should not end up worse
    than the SGSP image it starts from.
    """

    prior_std = 2e-3

    def _setup(self, seed, accel):
        spec = PhantomSpec(n_slice=3, n_coil=8, grid=(60, 60), seed=seed)
        sim = simulate(spec, accel=accel, acs_lines=32)
        kernels = fit_kernels(sim.calib_slices, sim.plan, (5, 5))
        H = CompositeH(kernels.spirit, kernels.slice_grappa, spec.grid)
        sgsp = sgsp_reconstruct(sim.y, sim.plan, H, SgspConfig()).x
        return sim, H, sgsp

    def _diffuse(self, sim, H, x_init, seed):
        truth = sim.coil_images.data
        schedule = VESchedule(sigma_min=1e-3, sigma_max=0.5)

        def score(x, t):
            return -(x - truth) / (self.prior_std**2 + schedule.sigma(t) ** 2)

        return reverse_sample(
            sim.y, sim.plan, H, score, schedule, np.random.default_rng(seed), SamplerConfig(log_every=50),
            x_init=x_init, n_steps=200,
        ).x

    def test_diffusion_not_worse_than_sgsp(self):
        wins = 0
        for seed in range(1, 6):
            sim, H, sgsp = self._setup(seed, accel=3)
            self.assertEqual(SelfConsistencyProjection(H).method, "direct")
            truth = sim.coil_images.data
            x = self._diffuse(sim, H, sgsp, seed)
            wins += nmse(x, truth) <= nmse(sgsp, truth)
        self.assertGreaterEqual(wins, 4)

    def test_high_acceleration_stays_finite(self):
        for seed in range(1, 6):
            sim, H, sgsp = self._setup(seed, accel=10)
            truth = sim.coil_images.data
            x = self._diffuse(sim, H, sgsp, seed)
            self.assertTrue(np.all(np.isfinite(x)), f"seed {seed}")
            zero_filled = SamplingOperator(sim.plan, 3).zero_filled(sim.y)
            self.assertLess(nmse(x, truth), nmse(zero_filled, truth), f"seed {seed}")



if __name__ == "__main__":
    unittest.main()
