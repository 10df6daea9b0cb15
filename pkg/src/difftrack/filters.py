"""Classical Bayesian filters: closed-form KF, EKF, UKF, and a bootstrap PF.

All step functions consume an SsmSpec as the filter's model of the world,
which may deliberately differ from the model that generated the data
(mismatch studies). Under Gaussian-mixture noise the Kalman-family filters
use the moment-matched single-Gaussian covariance; the particle filter
evaluates the exact mixture likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ssm import (
    SsmSpec,
    apply_transition,
    measure,
    noise_log_density,
    sample_noise,
)

DEFAULT_INIT_COV = 1e-4  # filters start at the true x0 with this * identity


@dataclass(eq=False)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ValueError("belief covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-10:
            raise ValueError("belief covariance must be PSD")


@dataclass(eq=False)
class ParticleSet:
    particles: np.ndarray      # (N, n_x)
    log_weights: np.ndarray    # (N,)

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=np.float64)
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
        if self.particles.shape[0] < 2:
            raise ValueError("need at least 2 particles")


@dataclass(frozen=True)
class FilterConfig:
    ukf_alpha: float = 0.1
    ukf_beta: float = 2.0
    ukf_kappa: float = 0.0
    pf_particles: int = 1000
    pf_ess_fraction: float = 0.5
    jacobian_step: float = 1e-6

    def __post_init__(self):
        if self.pf_particles < 2:
            raise ValueError("pf_particles must be >= 2")
        if not 0.0 < self.pf_ess_fraction <= 1.0:
            raise ValueError("pf_ess_fraction must lie in (0, 1]")


def numerical_jacobian(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, column i = (fn(x+h e_i) - fn(x-h e_i)) / 2h."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * step))
    J = np.stack(cols, axis=-1)
    if not np.all(np.isfinite(J)):
        raise ValueError("non-finite Jacobian")
    return J


def _solve_innovation(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("singular innovation") from exc


def kf_oracle_step(belief: GaussianBelief, z: np.ndarray, F: np.ndarray,
                   H: np.ndarray, Q: np.ndarray, R: np.ndarray) -> GaussianBelief:
    """Textbook linear Kalman recursion (predict + update); the test oracle."""
    m_pred = F @ belief.mean
    P_pred = F @ belief.cov @ F.T + Q
    S = H @ P_pred @ H.T + R
    K = _solve_innovation(S.T, (P_pred @ H.T).T).T
    mean = m_pred + K @ (z - H @ m_pred)
    cov = P_pred - K @ S @ K.T
    return GaussianBelief(mean=mean, cov=0.5 * (cov + cov.T))


def ekf_step(belief: GaussianBelief, z: np.ndarray, ssm_model: SsmSpec,
             cfg: FilterConfig | None = None) -> GaussianBelief:
    """Extended Kalman step with finite-difference linearization.

    The transition uses the model's configured Taylor truncation; Jacobians of
    f(x) = F(x) x and of h are central differences around the operating point.
    """
    cfg = cfg or FilterConfig()
    f = lambda x: apply_transition(ssm_model.transition, x)
    h = lambda x: measure(ssm_model.measurement, x)
    Q = ssm_model.process_noise.moment_matched_cov()
    R = ssm_model.meas_noise.moment_matched_cov()

    Fj = numerical_jacobian(f, belief.mean, cfg.jacobian_step)
    m_pred = f(belief.mean)
    P_pred = Fj @ belief.cov @ Fj.T + Q

    Hj = numerical_jacobian(h, m_pred, cfg.jacobian_step)
    S = Hj @ P_pred @ Hj.T + R
    K = _solve_innovation(S.T, (P_pred @ Hj.T).T).T
    mean = m_pred + K @ (z - h(m_pred))
    IKH = np.eye(belief.mean.size) - K @ Hj
    cov = IKH @ P_pred @ IKH.T + K @ R @ K.T  # Joseph form
    return GaussianBelief(mean=mean, cov=0.5 * (cov + cov.T))


def _sigma_points(mean: np.ndarray, cov: np.ndarray, cfg: FilterConfig):
    """Scaled unscented sigma points and weights (2n+1 points)."""
    n = mean.size
    lam = cfg.ukf_alpha ** 2 * (n + cfg.ukf_kappa) - n
    c = n + lam
    if c <= 0:
        raise ValueError("unscented scaling must be positive")
    try:
        L = np.linalg.cholesky(c * cov)
    except np.linalg.LinAlgError:
        try:
            L = np.linalg.cholesky(c * (cov + 1e-12 * np.eye(n)))
        except np.linalg.LinAlgError as exc:
            raise RuntimeError("sigma-point square root failed") from exc
    pts = np.empty((2 * n + 1, n))
    pts[0] = mean
    pts[1 : n + 1] = mean + L.T
    pts[n + 1 :] = mean - L.T
    wm = np.full(2 * n + 1, 0.5 / c)
    wc = wm.copy()
    wm[0] = lam / c
    wc[0] = lam / c + (1.0 - cfg.ukf_alpha ** 2 + cfg.ukf_beta)
    return pts, wm, wc


def _ut_cov(pts: np.ndarray, mean: np.ndarray, wc: np.ndarray) -> np.ndarray:
    d = pts - mean
    return (d * wc[:, None]).T @ d


def ukf_step(belief: GaussianBelief, z: np.ndarray, ssm_model: SsmSpec,
             cfg: FilterConfig | None = None) -> GaussianBelief:
    """Unscented Kalman step: sigma points are redrawn after the predict."""
    cfg = cfg or FilterConfig()
    Q = ssm_model.process_noise.moment_matched_cov()
    R = ssm_model.meas_noise.moment_matched_cov()

    pts, wm, wc = _sigma_points(belief.mean, belief.cov, cfg)
    prop = apply_transition(ssm_model.transition, pts)
    m_pred = wm @ prop
    P_pred = _ut_cov(prop, m_pred, wc) + Q
    P_pred = 0.5 * (P_pred + P_pred.T)

    pts2, wm2, wc2 = _sigma_points(m_pred, P_pred, cfg)
    Z = measure(ssm_model.measurement, pts2)
    z_pred = wm2 @ Z
    S = _ut_cov(Z, z_pred, wc2) + R
    dz = Z - z_pred
    dx = pts2 - m_pred
    C = (dx * wc2[:, None]).T @ dz
    K = _solve_innovation(S.T, C.T).T
    mean = m_pred + K @ (z - z_pred)
    cov = P_pred - K @ S @ K.T
    return GaussianBelief(mean=mean, cov=0.5 * (cov + cov.T))


def effective_sample_size(log_weights: np.ndarray) -> float:
    w = np.exp(log_weights - log_weights.max())
    w /= w.sum()
    return 1.0 / float((w * w).sum())


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices of a systematic resample; preserves the particle count."""
    n = weights.size
    positions = (np.arange(n) + rng.random()) / n
    return np.searchsorted(np.cumsum(weights), positions)


def pf_init(x0: np.ndarray, n: int, rng: np.random.Generator,
            init_cov: float = DEFAULT_INIT_COV) -> ParticleSet:
    x0 = np.asarray(x0, dtype=np.float64)
    parts = x0 + np.sqrt(init_cov) * rng.standard_normal((n, x0.size))
    return ParticleSet(particles=parts, log_weights=np.full(n, -np.log(n)))


def pf_step(ps: ParticleSet, z: np.ndarray, ssm_model: SsmSpec,
            cfg: FilterConfig, rng: np.random.Generator) -> ParticleSet:
    """Bootstrap step: propagate through the model, reweight by the exact
    measurement likelihood, resample systematically when ESS drops."""
    n = ps.particles.shape[0]
    prop = apply_transition(ssm_model.transition, ps.particles)
    prop = prop + sample_noise(ssm_model.process_noise, rng, size=n)
    diff = z - measure(ssm_model.measurement, prop)
    logw = ps.log_weights + noise_log_density(ssm_model.meas_noise, diff)
    hi = logw.max()
    if not np.isfinite(hi):
        raise RuntimeError("particle degeneracy")
    logw = logw - (hi + np.log(np.exp(logw - hi).sum()))
    if effective_sample_size(logw) < cfg.pf_ess_fraction * n:
        idx = systematic_resample(np.exp(logw), rng)
        prop = prop[idx]
        logw = np.full(n, -np.log(n))
    return ParticleSet(particles=prop, log_weights=logw)


def pf_mean(ps: ParticleSet) -> np.ndarray:
    return np.exp(ps.log_weights) @ ps.particles


def init_belief(x0: np.ndarray, init_cov: float = DEFAULT_INIT_COV) -> GaussianBelief:
    x0 = np.asarray(x0, dtype=np.float64)
    return GaussianBelief(mean=x0.copy(), cov=init_cov * np.eye(x0.size))


def filter_trajectory(kind: str, ssm_model: SsmSpec, measurements: np.ndarray,
                      x0: np.ndarray, cfg: FilterConfig | None = None,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Run one filter over a measurement sequence; returns (T, n_x) estimates.

    Filters are initialized at the true x0 with covariance DEFAULT_INIT_COV * I.
    """
    cfg = cfg or FilterConfig()
    T = measurements.shape[0]
    out = np.zeros((T, ssm_model.n_x))
    if kind == "pf":
        if rng is None:
            raise ValueError("pf needs a random source")
        ps = pf_init(x0, cfg.pf_particles, rng)
        for t in range(T):
            ps = pf_step(ps, measurements[t], ssm_model, cfg, rng)
            out[t] = pf_mean(ps)
        return out
    step = {"ekf": ekf_step, "ukf": ukf_step}[kind]
    belief = init_belief(x0)
    for t in range(T):
        belief = step(belief, measurements[t], ssm_model, cfg)
        out[t] = belief.mean
    return out
