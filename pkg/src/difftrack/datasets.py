"""Dataset construction: trajectory windowing, splits, and odometry ingestion.

Lorenz datasets are simulated; the planar-robot dataset is ingested from raw
ground-truth and odometry sensor files (comma-separated, documented columns:
timestamp,x,y for ground truth; timestamp,vx,vy for odometry), resampled to
5 Hz, integrated into relative-position measurements, and cut into fixed-length
trajectories. A synthetic session generator with the same file schema stands
in when no real recording is available.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .diffusion import Normalization
from .ssm import (
    SsmSpec,
    Trajectory,
    sample_attractor_state,
    save_trajectories,
    load_trajectories,
    simulate_trajectory,
    ssm_from_dict,
    ssm_to_dict,
)

SPLITS = ("train", "val", "test")


@dataclass(eq=False)
class WindowDataset:
    """Materialized training windows: tau0 (N,H,n), mask (N,H), cond (N,L,n)."""

    tau0: np.ndarray
    mask: np.ndarray
    cond: np.ndarray
    scenario_ids: list = field(default_factory=list)

    def __len__(self):
        return self.tau0.shape[0]


@dataclass(eq=False)
class DatasetManifest:
    counts: dict                 # split -> number of windows
    trajectory_counts: dict      # split -> number of trajectories
    ssm: dict | None             # SsmSpec echo (None for ingested data)
    norm_mean: list
    norm_std: list
    seed: int
    horizon: int                 # window length H
    cond_length: int
    stride: int = 1
    unused_trajectories: int = 0
    notes: dict = field(default_factory=dict)

    def normalization(self) -> Normalization:
        return Normalization(mean=np.asarray(self.norm_mean),
                             std=np.asarray(self.norm_std))


def split_indices(n: int, ratios, seed: int) -> dict:
    """Deterministic disjoint index split; positive ratios must stay non-empty."""
    if n == 0:
        raise ValueError("nothing to split")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    perm = np.random.default_rng(seed).permutation(n)
    counts = [int(round(r * n)) for r in ratios]
    counts[0] = n - sum(counts[1:])
    out = {}
    start = 0
    for name, c, r in zip(SPLITS, counts, ratios):
        if r > 0 and c == 0:
            raise ValueError(f"split {name!r} is empty at ratio {r}")
        out[name] = np.sort(perm[start : start + c])
        start += c
    return out


def split_and_serialize(trajectories: list, ratios, seed: int,
                        out_dir) -> dict:
    """Shuffle deterministically, write one trajectory file per split.

    Returns the split -> indices mapping. Splitting happens at trajectory
    granularity so no test trajectory leaks into training windows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    idx = split_indices(len(trajectories), ratios, seed)
    for name in SPLITS:
        save_trajectories([trajectories[i] for i in idx[name]],
                          out_dir / f"{name}.csv")
    return idx


def compute_normalization(trajectories: list) -> Normalization:
    """Shared per-dimension statistics pooled over states and measurements."""
    states = np.concatenate([t.states for t in trajectories])
    meas = np.concatenate([t.measurements for t in trajectories])
    pooled = np.concatenate([states, meas])
    std = pooled.std(axis=0)
    std[std == 0] = 1.0
    return Normalization(mean=pooled.mean(axis=0), std=std)


def windows_from_trajectories(trajectories: list, horizon: int,
                              cond_length: int, norm: Normalization,
                              stride: int = 1,
                              scenario_id: str = "") -> WindowDataset:
    """Emit one window per time index t = 1, 1+stride, ... per trajectory.

    The window holds (z_1 .. z_{t-1}, x_t) right-aligned (at most horizon-1
    trailing measurements) and the condition window z_{t-L+1:t}, left-padded
    with the earliest measurement at cold start. Everything is normalized.
    """
    taus, masks, conds, ids = [], [], [], []
    H, L = horizon, cond_length
    for ti, traj in enumerate(trajectories):
        zs = norm.normalize(traj.measurements)
        xs = norm.normalize(traj.states)
        T = traj.horizon
        for t in range(1, T + 1, stride):
            m = min(t - 1, H - 1)
            slots = np.zeros((H, zs.shape[1]))
            mask = np.zeros(H)
            if m > 0:
                slots[H - 1 - m : H - 1] = zs[t - 1 - m : t - 1]
            slots[H - 1] = xs[t]
            mask[H - 1 - m :] = 1.0
            if t >= L:
                cond = zs[t - L : t]
            else:
                pad = np.repeat(zs[:1], L - t, axis=0)
                cond = np.concatenate([pad, zs[:t]])
            taus.append(slots)
            masks.append(mask)
            conds.append(cond)
            ids.append(f"{scenario_id}:{ti}:{t}")
    return WindowDataset(tau0=np.array(taus), mask=np.array(masks),
                         cond=np.array(conds), scenario_ids=ids)


def save_manifest(manifest: DatasetManifest, out_dir) -> None:
    d = {
        "counts": manifest.counts,
        "trajectory_counts": manifest.trajectory_counts,
        "ssm": manifest.ssm,
        "norm_mean": [float(v) for v in manifest.norm_mean],
        "norm_std": [float(v) for v in manifest.norm_std],
        "seed": int(manifest.seed),
        "horizon": int(manifest.horizon),
        "cond_length": int(manifest.cond_length),
        "stride": int(manifest.stride),
        "unused_trajectories": int(manifest.unused_trajectories),
        "notes": manifest.notes,
    }
    with open(Path(out_dir) / "manifest.yaml", "w") as fh:
        yaml.safe_dump(d, fh, sort_keys=False)


def load_manifest(out_dir) -> DatasetManifest:
    with open(Path(out_dir) / "manifest.yaml") as fh:
        d = yaml.safe_load(fh)
    return DatasetManifest(**d)


def build_lorenz_dataset(ssm: SsmSpec, n_trajectories: int, horizon_T: int,
                         cond_length: int, window: int,
                         rng: np.random.Generator, out_dir,
                         ratios=(0.9, 0.05, 0.05), stride: int = 1,
                         seed: int | None = None) -> DatasetManifest:
    """Simulate, split by trajectory, and persist a windowed Lorenz dataset.

    Normalization statistics come from the training split only. seed defaults
    to a draw from rng and controls the split shuffle.
    """
    if horizon_T < cond_length:
        raise ValueError("need horizon_T >= cond_length")
    out_dir = Path(out_dir)
    seed = int(rng.integers(2 ** 31)) if seed is None else int(seed)
    trajs = []
    for _ in range(n_trajectories):
        x0 = sample_attractor_state(rng)
        trajs.append(simulate_trajectory(ssm, x0, horizon_T, rng))
    idx = split_and_serialize(trajs, ratios, seed, out_dir)
    norm = compute_normalization([trajs[i] for i in idx["train"]])
    counts = {}
    for name in SPLITS:
        per_traj = len(range(1, horizon_T + 1, stride))
        counts[name] = per_traj * len(idx[name])
    manifest = DatasetManifest(
        counts=counts,
        trajectory_counts={name: len(idx[name]) for name in SPLITS},
        ssm=ssm_to_dict(ssm),
        norm_mean=norm.mean.tolist(),
        norm_std=norm.std.tolist(),
        seed=seed,
        horizon=window,
        cond_length=cond_length,
        stride=stride,
        notes={"kind": "lorenz", "trajectory_horizon": horizon_T},
    )
    save_manifest(manifest, out_dir)
    return manifest


def load_split(out_dir, split: str) -> list:
    return load_trajectories(Path(out_dir) / f"{split}.csv")


def load_windows(out_dir, split: str) -> WindowDataset:
    manifest = load_manifest(out_dir)
    trajs = load_split(out_dir, split)
    return windows_from_trajectories(
        trajs, manifest.horizon, manifest.cond_length,
        manifest.normalization(), manifest.stride, scenario_id=split,
    )


def dataset_ssm(out_dir) -> SsmSpec:
    manifest = load_manifest(out_dir)
    if manifest.ssm is None:
        raise ValueError("dataset has no SSM echo")
    return ssm_from_dict(manifest.ssm)


# --- odometry session ingestion ----------------------------------------------

RESAMPLE_HZ = 5.0
RAW_POINTS = 20_000
GRID_STEPS = 1000
TRAJ_STEPS = 40          # grid points per trajectory (39 transitions)
SPLIT_TRAJS = (17, 3, 3)  # train/val/test; the remainder is left unused


def _read_sensor_csv(path, columns) -> np.ndarray:
    """Parse a comma-separated sensor file with a header row."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        missing = [c for c in columns if c not in header]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        order = [header.index(c) for c in columns]
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) < len(header):
                continue
            rows.append([float(parts[i]) for i in order])
    data = np.asarray(rows, dtype=np.float64)
    if data.shape[0] < 2:
        raise ValueError(f"{path}: not enough rows")
    if np.any(np.diff(data[:, 0]) < 0):
        raise ValueError(f"{path}: timestamps not monotone")
    return data


def _nearest_rows(timestamps: np.ndarray, grid: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(timestamps, grid)
    pos = np.clip(pos, 1, timestamps.size - 1)
    left = timestamps[pos - 1]
    right = timestamps[pos]
    return np.where(grid - left <= right - grid, pos - 1, pos)


def nclt_ingest(gt_path, odo_path, out_dir,
                seed: int = 0, cond_length: int = 5,
                window: int = 40) -> DatasetManifest:
    """Resample a raw session to 5 Hz and cut it into 40-step trajectories.

    State per grid point: planar position relative to each trajectory's first
    grid point plus velocity from ground-truth differencing. Measurement:
    odometry velocity and its running integral (dead-reckoned relative
    position) re-anchored per trajectory. 17/3/3 trajectories go to
    train/val/test; leftovers are recorded as unused.
    """
    out_dir = Path(out_dir)
    gt = _read_sensor_csv(gt_path, ["timestamp", "x", "y"])[:RAW_POINTS]
    odo = _read_sensor_csv(odo_path, ["timestamp", "vx", "vy"])[:RAW_POINTS]

    dt = 1.0 / RESAMPLE_HZ
    t0 = gt[0, 0]
    span = min(gt[-1, 0], odo[-1, 0]) - t0
    n_grid = int(np.floor(span * RESAMPLE_HZ)) + 1
    if n_grid < GRID_STEPS:
        raise ValueError(
            f"session too short: {n_grid} grid steps at {RESAMPLE_HZ} Hz, "
            f"need {GRID_STEPS}"
        )
    grid = t0 + np.arange(GRID_STEPS) / RESAMPLE_HZ
    pos = gt[_nearest_rows(gt[:, 0], grid), 1:3]
    vel_odo = odo[_nearest_rows(odo[:, 0], grid), 1:3]

    # ground-truth velocity by central differences on the grid
    vel_gt = np.gradient(pos, dt, axis=0)

    n_traj = GRID_STEPS // TRAJ_STEPS
    trajs = []
    for c in range(n_traj):
        j0 = c * TRAJ_STEPS
        sl = slice(j0, j0 + TRAJ_STEPS)
        p = pos[sl] - pos[j0]
        v = vel_gt[sl]
        vo = vel_odo[sl]
        states = np.concatenate([p, v], axis=1)           # (40, 4)
        relpos = np.cumsum(vo[1:] * dt, axis=0)           # integral up to t
        meas = np.concatenate([relpos, vo[1:]], axis=1)   # (39, 4)
        trajs.append(Trajectory(states=states, measurements=meas))

    n_train, n_val, n_test = SPLIT_TRAJS
    used = n_train + n_val + n_test
    if n_traj < used:
        raise ValueError(f"need {used} trajectories, got {n_traj}")
    perm = np.random.default_rng(seed).permutation(n_traj)
    idx = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val : used]),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        save_trajectories([trajs[i] for i in idx[name]],
                          out_dir / f"{name}.csv")
    unused = [trajs[i] for i in perm[used:]]
    if unused:
        save_trajectories(unused, out_dir / "unused.csv")
    norm = compute_normalization([trajs[i] for i in idx["train"]])
    per_traj = TRAJ_STEPS - 1
    manifest = DatasetManifest(
        counts={name: per_traj * len(idx[name]) for name in SPLITS},
        trajectory_counts={name: len(idx[name]) for name in SPLITS},
        ssm=None,
        norm_mean=norm.mean.tolist(),
        norm_std=norm.std.tolist(),
        seed=seed,
        horizon=window,
        cond_length=cond_length,
        stride=1,
        unused_trajectories=n_traj - used,
        notes={
            "kind": "nclt",
            "resample_hz": RESAMPLE_HZ,
            "grid_steps": GRID_STEPS,
            "trajectory_grid_points": TRAJ_STEPS,
            "preprocessing": "nearest-timestamp resampling; ground-truth "
                             "velocity by central differences; odometry "
                             "velocity integrated (rectangle rule) into "
                             "per-trajectory relative positions",
        },
    )
    save_manifest(manifest, out_dir)
    return manifest


def synthetic_nclt_session(out_dir, rng: np.random.Generator,
                           duration_s: float = 210.0,
                           raw_hz: float = 100.0,
                           odo_scale_error: float = 0.04,
                           odo_bias_walk: float = 0.002,
                           odo_noise: float = 0.04) -> tuple:
    """Write a synthetic planar-robot session in the raw file schema.

    Stands in for a real recording when none is available: a smooth
    wandering trajectory with odometry corrupted by a per-session scale
    error, a slow bias random walk, and white noise (so dead reckoning
    drifts). Returns (gt_path, odo_path).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = int(duration_s * raw_hz)
    dt = 1.0 / raw_hz
    t = np.arange(n) * dt
    heading = np.cumsum(rng.normal(0.0, 0.15 * np.sqrt(dt), n))
    speed = np.clip(1.0 + np.cumsum(rng.normal(0.0, 0.05 * np.sqrt(dt), n)),
                    0.3, 2.0)
    vel = np.stack([speed * np.cos(heading), speed * np.sin(heading)], axis=1)
    pos = np.cumsum(vel * dt, axis=0)

    bias = np.cumsum(rng.normal(0.0, odo_bias_walk * np.sqrt(dt), (n, 2)),
                     axis=0)
    odo = vel * (1.0 + odo_scale_error) + bias + \
        rng.normal(0.0, odo_noise, (n, 2))

    gt_path = out_dir / "ground_truth.csv"
    odo_path = out_dir / "odometry.csv"
    with open(gt_path, "w") as fh:
        fh.write("timestamp,x,y\n")
        for i in range(n):
            fh.write(f"{t[i]!r},{pos[i,0]!r},{pos[i,1]!r}\n")
    with open(odo_path, "w") as fh:
        fh.write("timestamp,vx,vy\n")
        for i in range(n):
            fh.write(f"{t[i]!r},{odo[i,0]!r},{odo[i,1]!r}\n")
    return gt_path, odo_path
