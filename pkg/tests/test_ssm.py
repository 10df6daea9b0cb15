"""Tests for state-space models, noise laws, and simulation."""

import numpy as np
import pytest
from scipy.linalg import expm

from difftrack.ssm import (
    MeasurementSpec,
    NoiseSpec,
    SsmSpec,
    Trajectory,
    TransitionSpec,
    apply_transition,
    lorenz_drift_matrix,
    lorenz_ssm,
    lorenz_transition_matrix,
    load_ssm,
    measure,
    q2_r2_from_db,
    sample_attractor_state,
    sample_noise,
    save_ssm,
    simulate_trajectory,
    spherical_to_cartesian,
    ssm_from_dict,
    ssm_to_dict,
    trajectory_from_csv,
    trajectory_to_csv,
    wiener_velocity_model,
)


class TestLorenzTransition:
    def test_first_order_at_origin(self):
        # J=1 is I + A*delta with A evaluated at x1=0.
        F = lorenz_transition_matrix(np.zeros(3), 0.02, 1)
        expected = np.array([
            [0.8, 0.2, 0.0],
            [0.56, 0.98, 0.0],
            [0.0, 0.0, 1.0 - 8.0 / 3.0 * 0.02],
        ])
        np.testing.assert_allclose(F, expected, atol=1e-15)

    def test_vanishing_step_gives_identity(self):
        for order in (1, 3, "exact"):
            F = lorenz_transition_matrix(np.array([5.0, -5.0, 20.0]), 1e-300, order)
            np.testing.assert_allclose(F, np.eye(3), atol=1e-12)

    def test_exact_matches_scaling_and_squaring(self):
        # Independent oracle: scipy's Pade/scaling-squaring matrix exponential.
        x = np.array([5.0, -5.0, 20.0])
        F = lorenz_transition_matrix(x, 0.02, "exact")
        oracle = expm(lorenz_drift_matrix(x) * 0.02)
        np.testing.assert_allclose(F, oracle, atol=1e-10)

    def test_truncation_error_decreases_with_order(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            x = sample_attractor_state(rng)
            exact = lorenz_transition_matrix(x, 0.02, "exact")
            errs = [
                np.linalg.norm(lorenz_transition_matrix(x, 0.02, J) - exact)
                for J in (1, 2, 3, 5)
            ]
            assert errs[1] < errs[0]
            assert errs[3] < errs[1]  # J=5 strictly better than J=2

    def test_batched_agrees_with_loop(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(scale=10.0, size=(6, 3))
        batch = lorenz_transition_matrix(xs, 0.02, 5)
        for i in range(6):
            np.testing.assert_allclose(
                batch[i], lorenz_transition_matrix(xs[i], 0.02, 5), atol=1e-14
            )

    def test_invalid_state_rejected(self):
        with pytest.raises(ValueError, match="invalid state"):
            lorenz_transition_matrix(np.array([np.nan, 0.0, 0.0]), 0.02, 1)


class TestWienerVelocity:
    def test_motion_matrix_at_5hz(self):
        F, _ = wiener_velocity_model(0.2, 1.0)
        assert np.all(np.diag(F) == 1.0)
        assert F[0, 2] == 0.2 and F[1, 3] == 0.2

    def test_zero_intensity_gives_zero_cov(self):
        _, Q = wiener_velocity_model(0.2, 0.0)
        assert np.all(Q == 0.0)

    def test_unit_step_unit_intensity_entries(self):
        _, Q = wiener_velocity_model(1.0, 1.0)
        assert Q[0, 0] == pytest.approx(1.0 / 3.0)
        assert Q[0, 2] == pytest.approx(0.5)
        assert Q[2, 2] == pytest.approx(1.0)


class TestMeasure:
    def test_identity(self):
        spec = MeasurementSpec(kind="identity")
        np.testing.assert_array_equal(
            measure(spec, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0]
        )

    def test_spherical_unit_x(self):
        spec = MeasurementSpec(kind="cartesian_to_spherical")
        z = measure(spec, np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(z, [1.0, 0.0, np.pi / 2], atol=1e-15)

    def test_spherical_origin_is_singular(self):
        spec = MeasurementSpec(kind="cartesian_to_spherical")
        with pytest.raises(ValueError, match="singular measurement"):
            measure(spec, np.zeros(3))

    def test_spherical_round_trip(self):
        spec = MeasurementSpec(kind="cartesian_to_spherical")
        rng = np.random.default_rng(11)
        for _ in range(200):
            x = rng.normal(scale=5.0, size=3)
            if np.linalg.norm(x) < 1e-9:
                continue
            back = spherical_to_cartesian(measure(spec, x))
            np.testing.assert_allclose(back, x, rtol=1e-12, atol=1e-12)

    def test_rotation_one_degree(self):
        spec = MeasurementSpec(kind="rotated_identity", rotation_deg=1.0)
        z = measure(spec, np.array([1.0, 0.0, 0.0]))
        th = np.deg2rad(1.0)
        np.testing.assert_allclose(z, [np.cos(th), np.sin(th), 0.0], atol=1e-15)
        # chord displacement for theta=1 degree is about 1.75%
        assert np.linalg.norm(z - [1.0, 0.0, 0.0]) == pytest.approx(
            2.0 * np.sin(th / 2.0), abs=1e-12
        )

    def test_rotation_preserves_norm(self):
        spec = MeasurementSpec(kind="rotated_identity", rotation_deg=37.0)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(50, 3))
        z = measure(spec, x)
        np.testing.assert_allclose(
            np.linalg.norm(z, axis=1), np.linalg.norm(x, axis=1), rtol=1e-12
        )


class TestNoise:
    def test_degenerate_mixture_equals_gaussian(self):
        g = NoiseSpec(kind="gaussian", cov1=2.0 * np.eye(2))
        m = NoiseSpec(kind="gaussian_mixture", cov1=2.0 * np.eye(2),
                      cov2=50.0 * np.eye(2), mix_weight=1.0)
        draws_g = sample_noise(g, np.random.default_rng(0), size=1000)
        draws_m = sample_noise(m, np.random.default_rng(0), size=1000)
        np.testing.assert_allclose(draws_g, draws_m)

    def test_zero_covariance_gives_zero(self):
        spec = NoiseSpec(kind="gaussian_mixture", cov1=np.zeros((3, 3)),
                         cov2=np.zeros((3, 3)), mix_weight=0.5)
        draws = sample_noise(spec, np.random.default_rng(1), size=100)
        assert np.all(draws == 0.0)

    def test_mixture_empirical_covariance(self):
        # alpha=0.8 with cov2 = 10*cov1: E cov = 0.8*I + 0.2*10*I = 2.8*I
        spec = NoiseSpec(kind="gaussian_mixture", cov1=np.eye(3),
                         cov2=10.0 * np.eye(3), mix_weight=0.8)
        draws = sample_noise(spec, np.random.default_rng(2), size=10 ** 6)
        emp = draws.T @ draws / draws.shape[0]
        np.testing.assert_allclose(emp, 2.8 * np.eye(3), atol=2.8 * 0.02)
        assert np.abs(draws.mean(axis=0)).max() < 0.01

    def test_moment_matched_cov(self):
        spec = NoiseSpec(kind="gaussian_mixture", cov1=np.eye(2),
                         cov2=10.0 * np.eye(2), mix_weight=0.8)
        np.testing.assert_allclose(spec.moment_matched_cov(), 2.8 * np.eye(2))

    def test_non_psd_rejected(self):
        with pytest.raises(ValueError, match="positive semidefinite"):
            NoiseSpec(kind="gaussian", cov1=np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestSimulate:
    def test_noise_free_measurements_equal_states(self):
        ssm = lorenz_ssm(q2=0.0, r2=0.0)
        x0 = np.array([1.0, 1.0, 1.0])
        traj = simulate_trajectory(ssm, x0, 50, np.random.default_rng(0))
        np.testing.assert_array_equal(traj.measurements, traj.states[1:])

    def test_fixed_seed_reproducible(self):
        ssm = lorenz_ssm(q2=0.01, r2=1.0)
        x0 = sample_attractor_state(np.random.default_rng(9))
        a = simulate_trajectory(ssm, x0, 30, np.random.default_rng(42))
        b = simulate_trajectory(ssm, x0, 30, np.random.default_rng(42))
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.measurements, b.measurements)

    def test_noise_levels_from_db(self):
        # nu = -20 dB at 1/r^2 = 0 dB means q^2 = 0.01 and r^2 = 1.
        q2, r2 = q2_r2_from_db(0.0, -20.0)
        assert q2 == pytest.approx(0.01)
        assert r2 == pytest.approx(1.0)
        ssm = lorenz_ssm(q2=q2, r2=r2)
        rng = np.random.default_rng(3)
        errs = []
        for _ in range(40):
            x0 = sample_attractor_state(rng)
            traj = simulate_trajectory(ssm, x0, 60, rng)
            errs.append(((traj.measurements - traj.states[1:]) ** 2).mean())
        mse_db = 10.0 * np.log10(np.mean(errs))
        assert abs(mse_db) < 0.3

    def test_divergence_guard(self):
        ssm = SsmSpec(
            transition=TransitionSpec(kind="explicit_matrix", delta=1.0,
                                      matrix=5.0 * np.eye(2)),
            measurement=MeasurementSpec(kind="identity"),
            process_noise=NoiseSpec(cov1=np.zeros((2, 2))),
            meas_noise=NoiseSpec(cov1=np.zeros((2, 2))),
            n_x=2, n_z=2,
        )
        with pytest.raises(RuntimeError, match="trajectory diverged"):
            simulate_trajectory(ssm, np.array([1.0, 1.0]), 40,
                                np.random.default_rng(0))

    def test_zero_noise_is_deterministic_function(self):
        ssm = lorenz_ssm(q2=0.0, r2=0.0)
        x0 = np.array([2.0, -1.0, 25.0])
        a = simulate_trajectory(ssm, x0, 20, np.random.default_rng(1))
        b = simulate_trajectory(ssm, x0, 20, np.random.default_rng(999))
        np.testing.assert_array_equal(a.states, b.states)


class TestSerialization:
    def test_ssm_yaml_round_trip(self, tmp_path):
        ssm = lorenz_ssm(q2=0.001, r2=0.1, taylor_order=5,
                         noise_kind="gaussian_mixture")
        path = tmp_path / "ssm.yaml"
        save_ssm(ssm, path)
        back = load_ssm(path)
        assert back.transition.kind == "lorenz_taylor"
        assert back.transition.taylor_order == 5
        np.testing.assert_allclose(back.process_noise.cov1, ssm.process_noise.cov1)
        np.testing.assert_allclose(back.meas_noise.cov2, ssm.meas_noise.cov2)
        assert back.meas_noise.mix_weight == 0.8

    def test_ssm_dict_round_trip(self):
        ssm = lorenz_ssm(q2=1e-3, r2=0.1,
                         measurement=MeasurementSpec(kind="rotated_identity",
                                                     rotation_deg=1.0))
        back = ssm_from_dict(ssm_to_dict(ssm))
        assert back.measurement.rotation_deg == 1.0
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(
            apply_transition(back.transition, x),
            apply_transition(ssm.transition, x),
        )

    def test_trajectory_csv_round_trip(self):
        ssm = lorenz_ssm(q2=0.01, r2=1.0)
        traj = simulate_trajectory(ssm, np.array([1.0, 1.0, 1.0]), 12,
                                   np.random.default_rng(4))
        back = trajectory_from_csv(trajectory_to_csv(traj))
        np.testing.assert_array_equal(back.states, traj.states)
        np.testing.assert_array_equal(back.measurements, traj.measurements)

    def test_trajectory_shape_validation(self):
        with pytest.raises(ValueError):
            Trajectory(states=np.zeros((5, 3)), measurements=np.zeros((5, 3)))
