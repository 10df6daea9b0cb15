"""Denoising-diffusion machinery and the measurement-conditioned tracking loop.

A trajectory window holds past measurements and the current state in one
right-aligned array. The forward process noises it; the reverse process
denoises under classifier-free guidance while observed measurement slots are
clamped to their known values (inpainting) and the initial noise for the
state slot is centered at the dynamics prediction f(x_prev) — the filter's
predict step. Low-temperature sampling scales the reverse-process variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ssm import TransitionSpec, apply_transition


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Per-step scalars for k = 1..K, stored at index k-1.

    Invariants: 0 < beta_k < 1, alpha_k = 1 - beta_k, and alpha_bar is the
    running product of alphas (strictly decreasing, in (0, 1)).
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def K(self) -> int:
        return self.betas.shape[0]

    def alpha_bar_prev(self, k: int) -> float:
        """alpha_bar at step k-1, with the convention alpha_bar_0 = 1."""
        return 1.0 if k <= 1 else float(self.alpha_bars[k - 2])


COSINE_S = 0.008
BETA_CLIP = 0.999


def cosine_alpha_bar(u: np.ndarray, s: float = COSINE_S) -> np.ndarray:
    """Closed-form cumulative signal fraction at progress u = k/K."""
    return np.cos((u + s) / (1.0 + s) * np.pi / 2.0) ** 2 / np.cos(
        s / (1.0 + s) * np.pi / 2.0
    ) ** 2


def build_schedule(K: int, kind: str = "cosine") -> DiffusionSchedule:
    """Cosine schedule (betas clipped at BETA_CLIP) or linear betas in [1e-4, 0.02]."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if kind == "cosine":
        bars = cosine_alpha_bar(np.arange(K + 1) / K)
        betas = np.minimum(1.0 - bars[1:] / bars[:-1], BETA_CLIP)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, K)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


@dataclass(eq=False)
class DiffusionTrajectory:
    """Right-aligned window (z_1 .. z_{t-1}, x_t) with a padding mask.

    slots: (H, n) array; mask: (H,) with 1 on real entries; the state
    occupies the last slot (state_index) and masked slots stay zero.
    """

    slots: np.ndarray
    mask: np.ndarray
    state_index: int

    def __post_init__(self):
        self.slots = np.asarray(self.slots, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.state_index != int(np.nonzero(self.mask)[0][-1]):
            raise ValueError("state_index must be the last unmasked slot")
        if np.any(self.slots[self.mask == 0.0] != 0.0):
            raise ValueError("masked slots must be zero")


def make_window(measurements: np.ndarray, state: np.ndarray,
                horizon: int) -> DiffusionTrajectory:
    """Assemble a window from the most recent measurements and the state.

    Keeps at most horizon-1 trailing measurements; left-pads with zeros.
    """
    measurements = np.atleast_2d(np.asarray(measurements, dtype=np.float64))
    if measurements.size == 0:
        measurements = measurements.reshape(0, state.shape[-1])
    m = min(measurements.shape[0], horizon - 1)
    slots = np.zeros((horizon, state.shape[-1]))
    mask = np.zeros(horizon)
    if m > 0:
        slots[horizon - 1 - m : horizon - 1] = measurements[-m:]
    slots[horizon - 1] = state
    mask[horizon - 1 - m :] = 1.0
    return DiffusionTrajectory(slots=slots, mask=mask, state_index=horizon - 1)


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 1.2
    temp_scale: float = 0.5
    predict_shift_mode: str = "init_only"

    def __post_init__(self):
        # temp_scale 0 is allowed: fully deterministic reverse sampling
        if not 0.0 <= self.temp_scale <= 1.0:
            raise ValueError("temp_scale must lie in [0, 1]")
        if self.omega < 0.0:
            raise ValueError("omega must be nonnegative")
        if self.predict_shift_mode not in ("init_only", "every_step"):
            raise ValueError("predict_shift_mode must be init_only or every_step")


@dataclass(frozen=True, eq=False)
class Normalization:
    """Per-dimension standardization shared by states and measurements."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if np.any(self.std <= 0):
            raise ValueError("std must be positive")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    @staticmethod
    def identity(n: int) -> "Normalization":
        return Normalization(mean=np.zeros(n), std=np.ones(n))


def q_sample_array(slots: np.ndarray, mask: np.ndarray, k: np.ndarray | int,
                   eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Forward noising on unmasked slots:
    sqrt(abar_k) * tau0 + sqrt(1 - abar_k) * eps."""
    k_arr = np.asarray(k, dtype=int)
    if np.any((k_arr < 1) | (k_arr > sched.K)):
        raise ValueError("k out of range")
    abar = sched.alpha_bars[k_arr - 1]
    if k_arr.ndim > 0:  # per-sample steps over a batch (B, H, n)
        abar = abar.reshape((-1,) + (1,) * (slots.ndim - 1))
    a = np.sqrt(abar)
    b = np.sqrt(1.0 - abar)
    return (a * slots + b * eps) * mask[..., None]


def q_sample(tau0: DiffusionTrajectory, k: int, eps: np.ndarray,
             sched: DiffusionSchedule) -> DiffusionTrajectory:
    slots = q_sample_array(tau0.slots, tau0.mask, k, eps, sched)
    return DiffusionTrajectory(slots=slots, mask=tau0.mask.copy(),
                               state_index=tau0.state_index)


def posterior_coefficients(sched: DiffusionSchedule, k: int):
    """DDPM posterior q(tau_{k-1} | tau_k, tau0): coefficients (on tau0_hat,
    on tau_k) and the variance."""
    if k < 1 or k > sched.K:
        raise ValueError("k out of range")
    beta = sched.betas[k - 1]
    alpha = sched.alphas[k - 1]
    abar = sched.alpha_bars[k - 1]
    abar_prev = sched.alpha_bar_prev(k)
    c0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
    ck = np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    var = (1.0 - abar_prev) / (1.0 - abar) * beta
    return c0, ck, var


def denoise_step_array(tau_k: np.ndarray, tau0_hat: np.ndarray, k: int,
                       sched: DiffusionSchedule, temp_scale: float,
                       rng: np.random.Generator,
                       mask: np.ndarray | None = None) -> np.ndarray:
    """One reverse step: sample from N(mu, temp_scale * var). At k=1 the
    posterior mean is returned without noise (it equals tau0_hat)."""
    c0, ck, var = posterior_coefficients(sched, k)
    mu = c0 * tau0_hat + ck * tau_k
    if k == 1:
        return mu
    noise = rng.standard_normal(mu.shape)
    if mask is not None:
        noise = noise * mask[..., None]
    return mu + np.sqrt(temp_scale * var) * noise


def denoise_step(tau_k: DiffusionTrajectory, tau0_hat: np.ndarray, k: int,
                 sched: DiffusionSchedule, temp_scale: float,
                 rng: np.random.Generator) -> DiffusionTrajectory:
    slots = denoise_step_array(tau_k.slots, tau0_hat, k, sched, temp_scale,
                               rng, tau_k.mask)
    return DiffusionTrajectory(slots=slots, mask=tau_k.mask.copy(),
                               state_index=tau_k.state_index)


def guided_tau0(params, net_cfg, tau: np.ndarray, mask: np.ndarray,
                cond: np.ndarray, k, omega: float,
                forward_fn=None) -> np.ndarray:
    """Classifier-free guided prediction:
    uncond + omega * (cond_out - uncond).

    omega=0 and omega=1 return the unconditional/conditional output exactly.
    Both branches run in one batched forward pass otherwise.
    """
    if forward_fn is None:
        from .denoiser import forward as forward_fn
    if omega == 0.0:
        return forward_fn(params, net_cfg, tau, mask, None, k)
    if omega == 1.0:
        return forward_fn(params, net_cfg, tau, mask, cond, k)
    B = tau.shape[0]
    k_arr = np.full(B, k, dtype=int) if np.ndim(k) == 0 else np.asarray(k)
    both = forward_fn(
        params, net_cfg,
        np.concatenate([tau, tau], axis=0),
        np.concatenate([mask, mask], axis=0),
        np.concatenate([cond, np.zeros_like(cond)], axis=0),
        np.concatenate([k_arr, k_arr]),
        null_rows=np.concatenate([np.zeros(B, dtype=bool), np.ones(B, dtype=bool)]),
    )
    cond_out, uncond = both[:B], both[B:]
    return uncond + omega * (cond_out - uncond)


def _assemble_step(zs_norm: np.ndarray, t: int, horizon: int, cond_len: int):
    """Measurement slots (z_(t-m)..z_(t-1) right-aligned), effective length,
    and the conditioning window z_(t-L+1..t), left-padded at cold start."""
    B = zs_norm.shape[0]
    m = min(t - 1, horizon - 1)
    meas = zs_norm[:, t - 1 - m : t - 1]
    cond_start = t - cond_len
    if cond_start >= 0:
        cond = zs_norm[:, cond_start : t]
    else:
        pad = np.repeat(zs_norm[:, :1], -cond_start, axis=1)
        cond = np.concatenate([pad, zs_norm[:, :t]], axis=1)
    return meas, m + 1, cond


def track_trajectories(params, net_cfg, measurements: np.ndarray,
                       x0: np.ndarray, sched: DiffusionSchedule,
                       guid: GuidanceConfig, transition: TransitionSpec,
                       norm: Normalization, rng: np.random.Generator,
                       forward_fn=None) -> np.ndarray:
    """Filter a batch of measurement sequences in lockstep.

    measurements: (B, T, n); x0: (B, n). Returns (B, T, n) state estimates.
    Trajectories are independent; batching realizes trajectory-level
    parallelism with shared immutable parameters.
    """
    measurements = np.asarray(measurements, dtype=np.float64)
    if measurements.ndim != 3:
        raise ValueError("measurements must be (B, T, n)")
    B, T, n = measurements.shape
    H = net_cfg.horizon
    zs_norm = norm.normalize(measurements)
    x_prev = np.array(x0, dtype=np.float64).reshape(B, n).copy()
    out = np.zeros((B, T, n))
    for t in range(1, T + 1):
        meas, eff_len, cond = _assemble_step(zs_norm, t, H, net_cfg.cond_length)
        mask = np.zeros((B, H))
        mask[:, H - eff_len :] = 1.0
        shift = norm.normalize(apply_transition(transition, x_prev))
        tau = np.sqrt(guid.temp_scale) * rng.standard_normal((B, H, n))
        tau *= mask[..., None]
        tau[:, H - 1] += shift
        for k in range(sched.K, 0, -1):
            tau[:, H - eff_len : H - 1] = meas
            if guid.predict_shift_mode == "every_step":
                tau[:, H - 1] += shift
            tau0_hat = guided_tau0(params, net_cfg, tau, mask, cond, k,
                                   guid.omega, forward_fn)
            tau = denoise_step_array(tau, tau0_hat, k, sched,
                                     guid.temp_scale, rng, mask)
        tau[:, H - eff_len : H - 1] = meas
        x_hat = norm.denormalize(tau[:, H - 1])
        if not np.all(np.isfinite(x_hat)):
            raise RuntimeError("filter diverged")
        out[:, t - 1] = x_hat
        x_prev = x_hat
    return out


def track_step(params, net_cfg, history_meas: list, x_prev: np.ndarray,
               z_t: np.ndarray, sched: DiffusionSchedule,
               guid: GuidanceConfig, transition: TransitionSpec,
               norm: Normalization, rng: np.random.Generator,
               forward_fn=None):
    """One filtering step: insert z_t, denoise a window, return the estimate.

    history_meas is the raw measurement queue (mutated in place: z_t is
    appended, entries beyond the window capacity are dropped). Returns
    (x_hat, tau0) where tau0 is the final denoised window with measurement
    slots clamped to their observed values.
    """
    H = net_cfg.horizon
    history_meas.append(np.asarray(z_t, dtype=np.float64))
    # capacity H: the window needs the last H-1 measurements before z_t,
    # and the condition needs the last cond_length including z_t
    while len(history_meas) > H:
        history_meas.pop(0)
    zs = np.stack(history_meas)  # (t_eff, n)
    t_eff = zs.shape[0]
    zs_norm = norm.normalize(zs)[None]
    # local time index within the retained queue
    meas, eff_len, cond = _assemble_step(zs_norm, t_eff, H, net_cfg.cond_length)
    mask = np.zeros((1, H))
    mask[:, H - eff_len :] = 1.0
    n = zs.shape[1]
    shift = norm.normalize(apply_transition(transition, x_prev.reshape(1, n)))
    tau = np.sqrt(guid.temp_scale) * rng.standard_normal((1, H, n))
    tau *= mask[..., None]
    tau[:, H - 1] += shift
    for k in range(sched.K, 0, -1):
        tau[:, H - eff_len : H - 1] = meas
        if guid.predict_shift_mode == "every_step":
            tau[:, H - 1] += shift
        tau0_hat = guided_tau0(params, net_cfg, tau, mask, cond, k,
                               guid.omega, forward_fn)
        tau = denoise_step_array(tau, tau0_hat, k, sched, guid.temp_scale,
                                 rng, mask)
    tau[:, H - eff_len : H - 1] = meas
    x_hat = norm.denormalize(tau[0, H - 1])
    if not np.all(np.isfinite(x_hat)):
        raise RuntimeError("filter diverged")
    tau0 = DiffusionTrajectory(slots=tau[0] * mask[0][:, None], mask=mask[0],
                               state_index=H - 1)
    return x_hat, tau0


def track_trajectory(params, net_cfg, measurements: np.ndarray,
                     x0: np.ndarray, sched: DiffusionSchedule,
                     guid: GuidanceConfig, transition: TransitionSpec,
                     norm: Normalization, rng: np.random.Generator,
                     forward_fn=None) -> np.ndarray:
    """Sequentially filter one measurement sequence; returns (T, n) estimates."""
    measurements = np.asarray(measurements, dtype=np.float64)
    history: list = []
    x_prev = np.asarray(x0, dtype=np.float64)
    out = np.zeros_like(measurements)
    for t in range(measurements.shape[0]):
        x_prev, _ = track_step(params, net_cfg, history, x_prev,
                               measurements[t], sched, guid, transition,
                               norm, rng, forward_fn)
        out[t] = x_prev
    return out
