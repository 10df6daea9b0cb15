"""Tests for the classical filters against the closed-form KF oracle."""

import numpy as np
import pytest

from difftrack.filters import (
    FilterConfig,
    GaussianBelief,
    ParticleSet,
    _sigma_points,
    effective_sample_size,
    ekf_step,
    filter_trajectory,
    init_belief,
    kf_oracle_step,
    numerical_jacobian,
    pf_init,
    pf_mean,
    pf_step,
    systematic_resample,
    ukf_step,
)
from difftrack.ssm import (
    MeasurementSpec,
    NoiseSpec,
    SsmSpec,
    TransitionSpec,
    lorenz_ssm,
    sample_attractor_state,
    simulate_trajectory,
)


def scalar_ssm(q2=1.0, r2=1.0) -> SsmSpec:
    return SsmSpec(
        transition=TransitionSpec(kind="explicit_matrix", delta=1.0,
                                  matrix=np.eye(1)),
        measurement=MeasurementSpec(kind="identity"),
        process_noise=NoiseSpec(cov1=q2 * np.eye(1)),
        meas_noise=NoiseSpec(cov1=r2 * np.eye(1)),
        n_x=1, n_z=1,
    )


def random_linear_ssm(rng, n=3, q2=0.1, r2=0.5) -> SsmSpec:
    # a stable random transition matrix
    M = rng.normal(size=(n, n))
    M *= 0.9 / np.abs(np.linalg.eigvals(M)).max()
    return SsmSpec(
        transition=TransitionSpec(kind="explicit_matrix", delta=1.0, matrix=M),
        measurement=MeasurementSpec(kind="identity"),
        process_noise=NoiseSpec(cov1=q2 * np.eye(n)),
        meas_noise=NoiseSpec(cov1=r2 * np.eye(n)),
        n_x=n, n_z=n,
    )


class TestKfOracle:
    def test_scalar_hand_computed(self):
        # predict var 2, gain 2/3: posterior mean 2, var 2/3
        belief = GaussianBelief(mean=np.zeros(1), cov=np.eye(1))
        out = kf_oracle_step(belief, np.array([3.0]), np.eye(1), np.eye(1),
                             np.eye(1), np.eye(1))
        assert out.mean[0] == pytest.approx(2.0)
        assert out.cov[0, 0] == pytest.approx(2.0 / 3.0)

    def test_huge_measurement_noise_keeps_prior(self):
        belief = GaussianBelief(mean=np.array([1.0, -2.0]), cov=np.eye(2))
        out = kf_oracle_step(belief, np.array([100.0, 100.0]), np.eye(2),
                             np.eye(2), np.zeros((2, 2)), 1e12 * np.eye(2))
        np.testing.assert_allclose(out.mean, belief.mean, atol=1e-9)

    def test_posterior_cov_dominated_by_prior(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(3, 3))
        P = A @ A.T + 0.1 * np.eye(3)
        belief = GaussianBelief(mean=np.zeros(3), cov=P)
        out = kf_oracle_step(belief, rng.normal(size=3), np.eye(3), np.eye(3),
                             np.zeros((3, 3)), 0.5 * np.eye(3))
        # predicted cov equals P here (F=I, Q=0); update must contract it
        assert np.linalg.eigvalsh(P - out.cov).min() > -1e-10


class TestEkf:
    def test_scalar_matches_hand_computation(self):
        belief = GaussianBelief(mean=np.zeros(1), cov=np.eye(1))
        out = ekf_step(belief, np.array([3.0]), scalar_ssm())
        assert out.mean[0] == pytest.approx(2.0, abs=1e-9)
        assert out.cov[0, 0] == pytest.approx(2.0 / 3.0, abs=1e-9)

    def test_zero_measurement_noise_returns_measurement(self):
        ssm = scalar_ssm(q2=1.0, r2=0.0)
        belief = GaussianBelief(mean=np.array([5.0]), cov=np.eye(1))
        out = ekf_step(belief, np.array([-7.0]), ssm)
        # finite-difference Jacobians leave ~1e-9 noise in the unit gain
        assert out.mean[0] == pytest.approx(-7.0, abs=1e-7)

    def test_linear_model_matches_kf_oracle(self):
        rng = np.random.default_rng(1)
        ssm = random_linear_ssm(rng)
        x0 = rng.normal(size=3)
        traj = simulate_trajectory(ssm, x0, 100, rng)
        ekf = init_belief(x0)
        kf = init_belief(x0)
        M = ssm.transition.matrix
        for z in traj.measurements:
            ekf = ekf_step(ekf, z, ssm)
            kf = kf_oracle_step(kf, z, M, np.eye(3),
                                ssm.process_noise.cov1, ssm.meas_noise.cov1)
            np.testing.assert_allclose(ekf.mean, kf.mean, atol=1e-8)
            np.testing.assert_allclose(ekf.cov, kf.cov, atol=1e-8)

    def test_singular_innovation_raises(self):
        ssm = scalar_ssm(q2=0.0, r2=0.0)
        belief = GaussianBelief(mean=np.zeros(1), cov=np.zeros((1, 1)))
        with pytest.raises(RuntimeError, match="singular innovation"):
            ekf_step(belief, np.array([1.0]), ssm)


class TestUkf:
    def test_sigma_weights_sum_to_one(self):
        cfg = FilterConfig()
        _, wm, wc = _sigma_points(np.zeros(3), np.eye(3), cfg)
        assert wm.sum() == pytest.approx(1.0, abs=1e-12)

    def test_linear_model_matches_kf_oracle(self):
        rng = np.random.default_rng(2)
        ssm = random_linear_ssm(rng)
        x0 = rng.normal(size=3)
        traj = simulate_trajectory(ssm, x0, 100, rng)
        ukf = init_belief(x0)
        kf = init_belief(x0)
        M = ssm.transition.matrix
        for z in traj.measurements:
            ukf = ukf_step(ukf, z, ssm)
            kf = kf_oracle_step(kf, z, M, np.eye(3),
                                ssm.process_noise.cov1, ssm.meas_noise.cov1)
            np.testing.assert_allclose(ukf.mean, kf.mean, atol=1e-6)
            np.testing.assert_allclose(ukf.cov, kf.cov, atol=1e-6)

    def test_deterministic(self):
        ssm = lorenz_ssm(q2=0.01, r2=1.0, taylor_order=5)
        belief = GaussianBelief(mean=np.array([1.0, 1.0, 1.0]), cov=0.1 * np.eye(3))
        z = np.array([1.1, 0.9, 1.2])
        a = ukf_step(belief, z, ssm)
        b = ukf_step(belief, z, ssm)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.cov, b.cov)


class TestNumericalJacobian:
    def test_linear_map_recovered(self):
        rng = np.random.default_rng(3)
        M = rng.normal(size=(4, 4))
        J = numerical_jacobian(lambda x: M @ x, rng.normal(size=4), 1e-6)
        np.testing.assert_allclose(J, M, atol=1e-8)

    def test_scalar_square(self):
        J = numerical_jacobian(lambda x: x ** 2, np.array([3.0]), 1e-5)
        assert J[0, 0] == pytest.approx(6.0, abs=1e-6)

    def test_lorenz_against_forward_difference(self):
        from difftrack.ssm import apply_transition, TransitionSpec
        tr = TransitionSpec(kind="lorenz_taylor", delta=0.02, taylor_order=5)
        f = lambda x: apply_transition(tr, x)
        x = sample_attractor_state(np.random.default_rng(8))
        J = numerical_jacobian(f, x, 1e-6)
        h = 1e-7
        Jf = np.stack(
            [(f(x + h * e) - f(x)) / h for e in np.eye(3)], axis=-1
        )
        np.testing.assert_allclose(J, Jf, rtol=1e-4, atol=1e-6)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            numerical_jacobian(lambda x: np.array([np.inf]), np.zeros(1), 1e-6)


class TestParticleFilter:
    def test_uniform_weights_give_full_ess(self):
        n = 128
        assert effective_sample_size(np.full(n, -np.log(n))) == pytest.approx(n)

    def test_systematic_resample_preserves_count(self):
        rng = np.random.default_rng(4)
        w = rng.random(100)
        w /= w.sum()
        idx = systematic_resample(w, rng)
        assert idx.shape == (100,)
        assert idx.min() >= 0 and idx.max() < 100

    def test_resample_concentrates_on_heavy_particle(self):
        w = np.full(50, 1e-6)
        w[17] = 1.0
        w /= w.sum()
        idx = systematic_resample(w, np.random.default_rng(5))
        assert (idx == 17).mean() > 0.9

    def test_pf_tracks_kf_on_linear_gaussian(self):
        rng = np.random.default_rng(6)
        ssm = random_linear_ssm(rng, n=2, q2=0.2, r2=0.5)
        x0 = np.zeros(2)
        traj = simulate_trajectory(ssm, x0, 100, rng)
        cfg = FilterConfig(pf_particles=50_000)
        ps = pf_init(x0, cfg.pf_particles, rng)
        kf = init_belief(x0)
        M = ssm.transition.matrix
        gaps = []
        for z in traj.measurements:
            ps = pf_step(ps, z, ssm, cfg, rng)
            kf = kf_oracle_step(kf, z, M, np.eye(2),
                                ssm.process_noise.cov1, ssm.meas_noise.cov1)
            gaps.append(pf_mean(ps) - kf.mean)
        rmse = np.sqrt(np.mean(np.square(gaps)))
        assert rmse < 0.05

    def test_resampled_weights_are_uniform(self):
        rng = np.random.default_rng(7)
        ssm = random_linear_ssm(rng, n=2)
        cfg = FilterConfig(pf_particles=500, pf_ess_fraction=1.0)  # always resample
        ps = pf_init(np.zeros(2), cfg.pf_particles, rng)
        ps = pf_step(ps, np.array([0.3, -0.2]), ssm, cfg, rng)
        np.testing.assert_allclose(ps.log_weights, -np.log(500))

    def test_degeneracy_raises(self):
        rng = np.random.default_rng(8)
        ssm = SsmSpec(
            transition=TransitionSpec(kind="explicit_matrix", delta=1.0,
                                      matrix=np.eye(1)),
            measurement=MeasurementSpec(kind="identity"),
            process_noise=NoiseSpec(cov1=np.zeros((1, 1))),
            meas_noise=NoiseSpec(cov1=1e-300 * np.eye(1)),
            n_x=1, n_z=1,
        )
        ps = pf_init(np.zeros(1), 100, rng)
        with pytest.raises(RuntimeError, match="particle degeneracy"):
            pf_step(ps, np.array([1e6]), ssm, FilterConfig(), rng)

    def test_particle_set_validation(self):
        with pytest.raises(ValueError):
            ParticleSet(particles=np.zeros((1, 3)), log_weights=np.zeros(1))


class TestFilterTrajectory:
    def test_ekf_runs_on_lorenz(self):
        data_ssm = lorenz_ssm(q2=0.001, r2=0.1)
        filt_ssm = lorenz_ssm(q2=0.001, r2=0.1, taylor_order=5)
        rng = np.random.default_rng(9)
        x0 = sample_attractor_state(rng)
        traj = simulate_trajectory(data_ssm, x0, 60, rng)
        est = filter_trajectory("ekf", filt_ssm, traj.measurements, x0)
        err_f = ((est - traj.states[1:]) ** 2).mean()
        err_z = ((traj.measurements - traj.states[1:]) ** 2).mean()
        assert est.shape == (60, 3)
        assert err_f < err_z  # beats raw measurements

    def test_unknown_kind_raises(self):
        with pytest.raises(KeyError):
            filter_trajectory("vortex", lorenz_ssm(0.01, 1.0), np.zeros((3, 3)),
                              np.zeros(3))
