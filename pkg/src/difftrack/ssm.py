"""State-space models, noise laws, and trajectory simulation.

Two families are built in: the chaotic Lorenz-63 system discretized through
the matrix exponential of its state-dependent drift matrix, and the linear
Wiener-velocity model used for planar odometry tracking. Process and
measurement noise can be Gaussian or a two-component Gaussian mixture.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import yaml

# State and measurement vectors are plain float64 arrays.
StateVec = np.ndarray
MeasVec = np.ndarray

DIVERGENCE_LIMIT = 1e6

# Plain Taylor accumulation for exp(A*delta): stop once the next term is
# negligible at double precision. ||A(x)*delta|| stays below ~1 on the
# attractor at delta=0.02, so the series converges in <25 terms.
EXACT_TOL = 1e-14
EXACT_MAX_TERMS = 40


def _psd_factor(cov: np.ndarray, name: str) -> np.ndarray:
    """Return L with L @ L.T = cov, raising if cov is not symmetric PSD."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.min() < -1e-10:
        raise ValueError(f"{name} must be positive semidefinite")
    return v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Additive noise law: N(0, cov1) or the mixture a*N(0,cov1)+(1-a)*N(0,cov2)."""

    kind: str = "gaussian"
    cov1: np.ndarray = field(default_factory=lambda: np.eye(1))
    cov2: np.ndarray | None = None
    mix_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "gaussian_mixture"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        cov1 = np.asarray(self.cov1, dtype=np.float64)
        object.__setattr__(self, "cov1", cov1)
        object.__setattr__(self, "_chol1", _psd_factor(cov1, "cov1"))
        if self.kind == "gaussian_mixture":
            if self.cov2 is None:
                raise ValueError("gaussian_mixture requires cov2")
            if not 0.0 <= self.mix_weight <= 1.0:
                raise ValueError("mix_weight must lie in [0, 1]")
            cov2 = np.asarray(self.cov2, dtype=np.float64)
            object.__setattr__(self, "cov2", cov2)
            object.__setattr__(self, "_chol2", _psd_factor(cov2, "cov2"))
        else:
            object.__setattr__(self, "cov2", None)
            object.__setattr__(self, "_chol2", None)

    @property
    def dim(self) -> int:
        return self.cov1.shape[0]

    def moment_matched_cov(self) -> np.ndarray:
        """Single-Gaussian approximation: the mixture's exact covariance."""
        if self.kind == "gaussian":
            return self.cov1
        return self.mix_weight * self.cov1 + (1.0 - self.mix_weight) * self.cov2


@dataclass(frozen=True, eq=False)
class TransitionSpec:
    """State evolution map x -> F(x) x.

    kind 'lorenz_taylor' builds F(x) from the Lorenz drift matrix, truncated
    at `taylor_order` terms or summed to convergence for order='exact'.
    kind 'wiener_velocity' and 'explicit_matrix' are constant linear maps.
    """

    kind: str = "lorenz_taylor"
    delta: float = 0.02
    taylor_order: int | str = "exact"
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("lorenz_taylor", "wiener_velocity", "explicit_matrix"):
            raise ValueError(f"unknown transition kind {self.kind!r}")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.kind == "lorenz_taylor" and self.taylor_order != "exact":
            if int(self.taylor_order) < 1:
                raise ValueError("taylor_order must be >= 1 or 'exact'")
            object.__setattr__(self, "taylor_order", int(self.taylor_order))
        if self.kind == "explicit_matrix":
            if self.matrix is None:
                raise ValueError("explicit_matrix requires a matrix")
            object.__setattr__(
                self, "matrix", np.asarray(self.matrix, dtype=np.float64)
            )
        if self.kind == "wiener_velocity" and self.matrix is None:
            F, _ = wiener_velocity_model(self.delta, 0.0)
            object.__setattr__(self, "matrix", F)


@dataclass(frozen=True, eq=False)
class MeasurementSpec:
    """Noise-free measurement map h.

    kind 'identity' returns x; 'rotated_identity' applies a rotation
    (by default rotation_deg about the third axis, or a full Euler triple);
    'cartesian_to_spherical' maps a 3-vector to (range, azimuth, inclination).
    """

    kind: str = "identity"
    rotation_deg: float = 0.0
    rotation_euler_deg: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "rotated_identity", "cartesian_to_spherical"):
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if not np.isfinite(self.rotation_deg):
            raise ValueError("rotation_deg must be finite")


@dataclass(frozen=True, eq=False)
class SsmSpec:
    transition: TransitionSpec
    measurement: MeasurementSpec
    process_noise: NoiseSpec
    meas_noise: NoiseSpec
    n_x: int
    n_z: int

    def __post_init__(self):
        if self.process_noise.dim != self.n_x:
            raise ValueError("process noise dimension must match n_x")
        if self.meas_noise.dim != self.n_z:
            raise ValueError("measurement noise dimension must match n_z")
        if self.measurement.kind == "cartesian_to_spherical" and self.n_x != 3:
            raise ValueError("cartesian_to_spherical requires n_x = 3")


@dataclass(eq=False)
class Trajectory:
    """states has length T+1 (index 0 is the initial state); measurements has
    length T, with measurements[t-1] generated from states[t]."""

    states: np.ndarray
    measurements: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.measurements = np.asarray(self.measurements, dtype=np.float64)
        if self.states.shape[0] != self.measurements.shape[0] + 1:
            raise ValueError("states must be one longer than measurements")

    @property
    def horizon(self) -> int:
        return self.measurements.shape[0]


def lorenz_drift_matrix(x: np.ndarray) -> np.ndarray:
    """A(x) of the Lorenz-63 system; batched over leading axes of x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 3:
        raise ValueError("Lorenz state must have dimension 3")
    if not np.all(np.isfinite(x)):
        raise ValueError("invalid state")
    x1 = x[..., 0]
    A = np.zeros(x.shape[:-1] + (3, 3))
    A[..., 0, 0] = -10.0
    A[..., 0, 1] = 10.0
    A[..., 1, 0] = 28.0
    A[..., 1, 1] = -1.0
    A[..., 1, 2] = -x1
    A[..., 2, 1] = x1
    A[..., 2, 2] = -8.0 / 3.0
    return A


def lorenz_transition_matrix(x: np.ndarray, delta: float,
                             order: int | str = "exact") -> np.ndarray:
    """Discrete transition matrix F(x) = exp(A(x) * delta).

    For integer order J the series is truncated: I + sum_{j<=J} (A d)^j / j!.
    For order='exact' terms accumulate until the next term's Frobenius norm
    drops below EXACT_TOL (capped at EXACT_MAX_TERMS). Batched over leading
    axes of x.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    Ad = lorenz_drift_matrix(x) * delta
    eye = np.broadcast_to(np.eye(3), Ad.shape).copy()
    F = eye.copy()
    term = eye.copy()
    if order == "exact":
        for j in range(1, EXACT_MAX_TERMS + 1):
            term = term @ Ad / j
            F += term
            if np.sqrt((term * term).sum(axis=(-2, -1))).max() < EXACT_TOL:
                break
    else:
        J = int(order)
        if J < 1:
            raise ValueError("order must be >= 1 or 'exact'")
        for j in range(1, J + 1):
            term = term @ Ad / j
            F += term
    return F


def wiener_velocity_model(delta_t: float, q: float):
    """Constant-velocity planar model: returns (F, Q) for state (x1,x2,v1,v2).

    Acceleration enters as white noise with intensity q^2; Q is the standard
    Wiener-velocity process covariance over one step of length delta_t.
    """
    if delta_t <= 0:
        raise ValueError("delta_t must be positive")
    if q < 0:
        raise ValueError("q must be nonnegative")
    dt = float(delta_t)
    F = np.array([
        [1.0, 0.0, dt, 0.0],
        [0.0, 1.0, 0.0, dt],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    Q = q ** 2 * np.array([
        [dt ** 3 / 3.0, 0.0, dt ** 2 / 2.0, 0.0],
        [0.0, dt ** 3 / 3.0, 0.0, dt ** 2 / 2.0],
        [dt ** 2 / 2.0, 0.0, dt, 0.0],
        [0.0, dt ** 2 / 2.0, 0.0, dt],
    ])
    return F, Q


def transition_matrix(spec: TransitionSpec, x: np.ndarray) -> np.ndarray:
    """F(x) for the given transition; batched over leading axes of x."""
    if spec.kind == "lorenz_taylor":
        return lorenz_transition_matrix(x, spec.delta, spec.taylor_order)
    x = np.asarray(x, dtype=np.float64)
    return np.broadcast_to(spec.matrix, x.shape[:-1] + spec.matrix.shape)


def apply_transition(spec: TransitionSpec, x: np.ndarray) -> np.ndarray:
    """f(x) = F(x) x; batched over leading axes of x."""
    F = transition_matrix(spec, x)
    x = np.asarray(x, dtype=np.float64)
    return np.einsum("...ij,...j->...i", F, x)


def rotation_matrix_euler(deg1: float, deg2: float, deg3: float) -> np.ndarray:
    """Rotation R = R3(deg3) @ R2(deg2) @ R1(deg1) about the coordinate axes."""
    a1, a2, a3 = np.deg2rad([deg1, deg2, deg3])
    c, s = np.cos(a1), np.sin(a1)
    R1 = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    c, s = np.cos(a2), np.sin(a2)
    R2 = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    c, s = np.cos(a3), np.sin(a3)
    R3 = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return R3 @ R2 @ R1


def measurement_matrix(spec: MeasurementSpec, n_x: int) -> np.ndarray:
    """Linear measurement matrix; only defined for the linear kinds."""
    if spec.kind == "identity":
        return np.eye(n_x)
    if spec.kind == "rotated_identity":
        euler = spec.rotation_euler_deg or (0.0, 0.0, spec.rotation_deg)
        if n_x != 3:
            raise ValueError("rotated_identity requires n_x = 3")
        return rotation_matrix_euler(*euler)
    raise ValueError(f"{spec.kind} has no measurement matrix")


def measure(spec: MeasurementSpec, x: np.ndarray) -> np.ndarray:
    """Noise-free measurement h(x); batched over leading axes of x."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "identity":
        return x.copy()
    if spec.kind == "rotated_identity":
        R = measurement_matrix(spec, x.shape[-1])
        return np.einsum("ij,...j->...i", R, x)
    # cartesian -> (range, azimuth in (-pi, pi], inclination in [0, pi])
    if x.shape[-1] != 3:
        raise ValueError("cartesian_to_spherical requires dimension 3")
    r = np.linalg.norm(x, axis=-1)
    if np.any(r == 0.0):
        raise ValueError("singular measurement")
    az = np.arctan2(x[..., 1], x[..., 0])
    incl = np.arccos(np.clip(x[..., 2] / r, -1.0, 1.0))
    return np.stack([r, az, incl], axis=-1)


def spherical_to_cartesian(z: np.ndarray) -> np.ndarray:
    """Inverse of the spherical measurement, used for round-trip checks."""
    z = np.asarray(z, dtype=np.float64)
    r, az, incl = z[..., 0], z[..., 1], z[..., 2]
    return np.stack([
        r * np.sin(incl) * np.cos(az),
        r * np.sin(incl) * np.sin(az),
        r * np.cos(incl),
    ], axis=-1)


def sample_noise(spec: NoiseSpec, rng: np.random.Generator,
                 size: int | None = None) -> np.ndarray:
    """Draw from the noise law: one vector (size=None) or (size, dim)."""
    n = spec.dim
    shape = (n,) if size is None else (size, n)
    eps = rng.standard_normal(shape)
    draw1 = eps @ spec._chol1.T
    if spec.kind == "gaussian":
        return draw1
    draw2 = eps @ spec._chol2.T
    pick = rng.random(shape[:-1] or (1,)) < spec.mix_weight
    if size is None:
        return draw1 if pick[0] else draw2
    return np.where(pick[:, None], draw1, draw2)


def gaussian_log_density(diff: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """log N(diff; 0, cov), batched over leading axes of diff."""
    n = cov.shape[0]
    L = np.linalg.cholesky(cov + 1e-300 * np.eye(n))
    sol = np.linalg.solve(L, diff[..., None])[..., 0]
    maha = (sol * sol).sum(axis=-1)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (maha + logdet + n * np.log(2.0 * np.pi))


def noise_log_density(spec: NoiseSpec, diff: np.ndarray) -> np.ndarray:
    """Log density of the noise law at diff (exact mixture for GM noise)."""
    if spec.kind == "gaussian":
        return gaussian_log_density(diff, spec.cov1)
    la = gaussian_log_density(diff, spec.cov1) + np.log(spec.mix_weight)
    lb = gaussian_log_density(diff, spec.cov2) + np.log1p(-spec.mix_weight)
    hi = np.maximum(la, lb)
    return hi + np.log(np.exp(la - hi) + np.exp(lb - hi))


def simulate_trajectory(ssm: SsmSpec, x0: np.ndarray, horizon: int,
                        rng: np.random.Generator) -> Trajectory:
    """Roll the SSM forward: x_t = F(x_{t-1}) x_{t-1} + w_t, z_t = h(x_t) + v_t."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("invalid state")
    states = np.zeros((horizon + 1, ssm.n_x))
    measurements = np.zeros((horizon, ssm.n_z))
    states[0] = x0
    for t in range(1, horizon + 1):
        x = apply_transition(ssm.transition, states[t - 1])
        x = x + sample_noise(ssm.process_noise, rng)
        if np.any(np.abs(x) > DIVERGENCE_LIMIT):
            raise RuntimeError("trajectory diverged")
        states[t] = x
        measurements[t - 1] = measure(ssm.measurement, x) + sample_noise(
            ssm.meas_noise, rng
        )
    return Trajectory(states=states, measurements=measurements)


def sample_attractor_state(rng: np.random.Generator, burn_in: int = 500,
                           delta: float = 0.02) -> np.ndarray:
    """Initial Lorenz state: uniform in [-1,1]^3, then burned onto the attractor
    with noise-free exact steps."""
    x = rng.uniform(-1.0, 1.0, size=3)
    for _ in range(burn_in):
        x = lorenz_transition_matrix(x, delta, "exact") @ x
    return x


# --- noise level helpers (dB conventions used throughout the benchmarks) ---

def db_to_lin(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


def lin_to_db(x_lin: float) -> float:
    return 10.0 * np.log10(x_lin)


def q2_r2_from_db(inv_r2_db: float, nu_db: float) -> tuple[float, float]:
    """Measurement variance r^2 from its inverse level in dB, and q^2 = nu * r^2."""
    r2 = 1.0 / db_to_lin(inv_r2_db)
    q2 = db_to_lin(nu_db) * r2
    return q2, r2


def lorenz_ssm(q2: float, r2: float, delta: float = 0.02,
               taylor_order: int | str = "exact",
               measurement: MeasurementSpec | None = None,
               noise_kind: str = "gaussian", gm_scale: float = 10.0,
               gm_weight: float = 0.8) -> SsmSpec:
    """Convenience constructor for the Lorenz SSM at given noise variances.

    Gaussian-mixture noise uses cov2 = gm_scale * cov1 with weight gm_weight
    on the first component.
    """
    meas = measurement or MeasurementSpec(kind="identity")
    n_z = 3
    def _noise(var, n):
        cov1 = var * np.eye(n)
        if noise_kind == "gaussian":
            return NoiseSpec(kind="gaussian", cov1=cov1)
        return NoiseSpec(kind="gaussian_mixture", cov1=cov1,
                         cov2=gm_scale * cov1, mix_weight=gm_weight)
    return SsmSpec(
        transition=TransitionSpec(kind="lorenz_taylor", delta=delta,
                                  taylor_order=taylor_order),
        measurement=meas,
        process_noise=_noise(q2, 3),
        meas_noise=_noise(r2, n_z),
        n_x=3,
        n_z=n_z,
    )


def wiener_ssm(delta_t: float, q2: float, r2: float) -> SsmSpec:
    """Wiener-velocity SSM with identity full-state measurement."""
    F, Q = wiener_velocity_model(delta_t, np.sqrt(q2))
    return SsmSpec(
        transition=TransitionSpec(kind="wiener_velocity", delta=delta_t),
        measurement=MeasurementSpec(kind="identity"),
        process_noise=NoiseSpec(kind="gaussian", cov1=Q),
        meas_noise=NoiseSpec(kind="gaussian", cov1=r2 * np.eye(4)),
        n_x=4,
        n_z=4,
    )


# --- serialization -----------------------------------------------------------

def _noise_to_dict(spec: NoiseSpec) -> dict:
    return {
        "kind": spec.kind,
        "cov1": spec.cov1.tolist(),
        "cov2": None if spec.cov2 is None else spec.cov2.tolist(),
        "mix_weight": float(spec.mix_weight),
    }


def _noise_from_dict(d: dict, dim: int) -> NoiseSpec:
    def _cov(v):
        if v is None:
            return None
        v = np.asarray(v, dtype=np.float64)
        if v.ndim == 0:
            return float(v) * np.eye(dim)
        return v
    return NoiseSpec(
        kind=d.get("kind", "gaussian"),
        cov1=_cov(d["cov1"]),
        cov2=_cov(d.get("cov2")),
        mix_weight=float(d.get("mix_weight", 1.0)),
    )


def ssm_to_dict(ssm: SsmSpec) -> dict:
    return {
        "n_x": int(ssm.n_x),
        "n_z": int(ssm.n_z),
        "transition": {
            "kind": ssm.transition.kind,
            "delta": float(ssm.transition.delta),
            "taylor_order": ssm.transition.taylor_order,
            "matrix": None if ssm.transition.matrix is None
            else ssm.transition.matrix.tolist(),
        },
        "measurement": {
            "kind": ssm.measurement.kind,
            "rotation_deg": float(ssm.measurement.rotation_deg),
            "rotation_euler_deg": None if ssm.measurement.rotation_euler_deg is None
            else list(ssm.measurement.rotation_euler_deg),
        },
        "process_noise": _noise_to_dict(ssm.process_noise),
        "meas_noise": _noise_to_dict(ssm.meas_noise),
    }


def ssm_from_dict(d: dict) -> SsmSpec:
    n_x, n_z = int(d["n_x"]), int(d["n_z"])
    tr = d["transition"]
    ms = d.get("measurement", {})
    euler = ms.get("rotation_euler_deg")
    return SsmSpec(
        transition=TransitionSpec(
            kind=tr.get("kind", "lorenz_taylor"),
            delta=float(tr.get("delta", 0.02)),
            taylor_order=tr.get("taylor_order", "exact"),
            matrix=None if tr.get("matrix") is None else np.asarray(tr["matrix"]),
        ),
        measurement=MeasurementSpec(
            kind=ms.get("kind", "identity"),
            rotation_deg=float(ms.get("rotation_deg", 0.0)),
            rotation_euler_deg=None if euler is None else tuple(euler),
        ),
        process_noise=_noise_from_dict(d["process_noise"], n_x),
        meas_noise=_noise_from_dict(d["meas_noise"], n_z),
        n_x=n_x,
        n_z=n_z,
    )


def save_ssm(ssm: SsmSpec, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump({"ssm": ssm_to_dict(ssm)}, fh, sort_keys=False)


def load_ssm(path) -> SsmSpec:
    with open(path) as fh:
        return ssm_from_dict(yaml.safe_load(fh)["ssm"])


def trajectory_to_csv(traj: Trajectory) -> str:
    """Columnar text: header then one row per step.

    Row t=0 carries the initial state with empty measurement cells; row t>=1
    carries states[t] and measurements[t-1].
    """
    n_x = traj.states.shape[1]
    n_z = traj.measurements.shape[1]
    cols = (["t"] + [f"x_{i+1}" for i in range(n_x)]
            + [f"z_{i+1}" for i in range(n_z)])
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    fmt = lambda v: repr(float(v))
    buf.write("0," + ",".join(fmt(v) for v in traj.states[0])
              + "," * n_z + "\n")
    for t in range(1, traj.states.shape[0]):
        row = [str(t)]
        row += [fmt(v) for v in traj.states[t]]
        row += [fmt(v) for v in traj.measurements[t - 1]]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def trajectory_from_csv(text: str) -> Trajectory:
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split(",")
    n_x = sum(1 for c in header if c.startswith("x_"))
    n_z = sum(1 for c in header if c.startswith("z_"))
    T = len(lines) - 2
    states = np.zeros((T + 1, n_x))
    measurements = np.zeros((T, n_z))
    for ln in lines[1:]:
        parts = ln.split(",")
        t = int(parts[0])
        states[t] = [float(v) for v in parts[1 : 1 + n_x]]
        if t >= 1:
            measurements[t - 1] = [float(v) for v in parts[1 + n_x :]]
    return Trajectory(states=states, measurements=measurements)


def save_trajectories(trajs: list[Trajectory], path) -> None:
    """Write several trajectories to one file, blocks separated by '# trajectory i'."""
    with open(path, "w") as fh:
        for i, tr in enumerate(trajs):
            fh.write(f"# trajectory {i}\n")
            fh.write(trajectory_to_csv(tr))


def load_trajectories(path) -> list[Trajectory]:
    with open(path) as fh:
        text = fh.read()
    blocks = [b.strip() for b in text.split("# trajectory")[1:]]
    out = []
    for b in blocks:
        body = b.split("\n", 1)[1]
        out.append(trajectory_from_csv(body))
    return out
