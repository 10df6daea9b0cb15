"""Temporal U-Net denoiser: predicts the clean trajectory window directly.

The network consumes a noisy window (plus its padding mask as an extra input
channel), a sinusoidal embedding of the diffusion step, and an embedding of
the recent-measurement conditioning window (replaced by a learned null token
when the condition is dropped). Residual temporal blocks with kernel-size
convolutions capture dependencies along the window; average pooling and
nearest-neighbour upsampling move between resolution levels.

Training minimizes the window reconstruction error plus a dynamics-consistency
penalty comparing the state-evolution map applied to the true and predicted
final states.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import DiffusionSchedule, Normalization, q_sample_array
from .ssm import TransitionSpec, apply_transition

CHECKPOINT_MAGIC = b"DTCKPT01"


@dataclass(frozen=True)
class NetConfig:
    horizon: int = 40
    width: int = 3
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    kernel_size: int = 5
    time_embed_dim: int = 128
    cond_embed_dim: int = 64
    cond_length: int = 5

    def __post_init__(self):
        if not self.horizon >= self.cond_length >= 1:
            raise ValueError("need horizon >= cond_length >= 1")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        down = 2 ** (len(self.channel_multipliers) - 1)
        if self.horizon % down != 0:
            raise ValueError(f"horizon must be divisible by {down}")

    @property
    def dims(self) -> list:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def embed_dim(self) -> int:
        return self.time_embed_dim + self.cond_embed_dim


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    cond_dropout_p: float = 0.25
    dynamic_loss_weight: float = 1.0
    dynamic_loss_on_all_slots: bool = False
    grad_clip: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout_p <= 1.0:
            raise ValueError("cond_dropout_p must lie in [0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


def _conv_init(rng, c_out, c_in, k, gain=1.0):
    std = gain * np.sqrt(2.0 / (c_in * k))
    return rng.standard_normal((c_out, c_in, k)) * std


def _affine_init(rng, d_in, d_out, gain=1.0):
    std = gain * np.sqrt(2.0 / d_in)
    return rng.standard_normal((d_in, d_out)) * std


def init_params(cfg: NetConfig, rng: np.random.Generator) -> dict:
    """All learnable tensors, keyed by name."""
    p = {}
    k = cfg.kernel_size
    ed = cfg.embed_dim

    def conv(name, c_in, c_out, ksize=k, gain=1.0):
        p[f"{name}.w"] = ad.parameter(_conv_init(rng, c_out, c_in, ksize, gain))
        p[f"{name}.b"] = ad.parameter(np.zeros(c_out))

    def aff(name, d_in, d_out, gain=1.0):
        p[f"{name}.w"] = ad.parameter(_affine_init(rng, d_in, d_out, gain))
        p[f"{name}.b"] = ad.parameter(np.zeros(d_out))

    def res(name, c_in, c_out):
        conv(f"{name}.conv1", c_in, c_out)
        conv(f"{name}.conv2", c_out, c_out)
        aff(f"{name}.emb", ed, c_out)
        if c_in != c_out:
            conv(f"{name}.skip", c_in, c_out, ksize=1)

    aff("temb.l1", cfg.base_channels, cfg.time_embed_dim)
    aff("temb.l2", cfg.time_embed_dim, cfg.time_embed_dim)
    aff("cemb.l1", cfg.cond_length * cfg.width, cfg.cond_embed_dim)
    aff("cemb.l2", cfg.cond_embed_dim, cfg.cond_embed_dim)
    p["null_token"] = ad.parameter(0.02 * rng.standard_normal(cfg.cond_embed_dim))

    dims = cfg.dims
    conv("init", cfg.width + 1, dims[0])
    c_prev = dims[0]
    for i, c in enumerate(dims):
        res(f"down{i}a", c_prev, c)
        res(f"down{i}b", c, c)
        c_prev = c
    res("mida", c_prev, c_prev)
    res("midb", c_prev, c_prev)
    for i in reversed(range(len(dims) - 1)):
        res(f"up{i}a", dims[i + 1] + dims[i], dims[i])
        res(f"up{i}b", dims[i], dims[i])
    conv("final.conv1", dims[0], dims[0])
    conv("final.conv2", dims[0], cfg.width, ksize=1, gain=0.01)
    return p


def parameter_count(cfg: NetConfig) -> int:
    """Total learnable scalars; depends only on the configuration."""
    params = init_params(cfg, np.random.default_rng(0))
    return sum(int(t.data.size) for t in params.values())


def _sinusoidal(k_arr: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(k_arr, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _as_param_tensors(params: dict) -> dict:
    return {
        name: (v if isinstance(v, Tensor) else ad.constant(v))
        for name, v in params.items()
    }


def _res_block(p, name, h, emb, B):
    y = ad.mish(ad.conv1d(h, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"]))
    proj = ad.affine(ad.mish(emb), p[f"{name}.emb.w"], p[f"{name}.emb.b"])
    c = proj.data.shape[1]
    y = ad.add(y, ad.reshape(proj, (B, c, 1)))
    y = ad.mish(ad.conv1d(y, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"]))
    if f"{name}.skip.w" in p:
        h = ad.conv1d(h, p[f"{name}.skip.w"], p[f"{name}.skip.b"])
    return ad.add(y, h)


def _forward_graph(p: dict, cfg: NetConfig, tau: np.ndarray, mask: np.ndarray,
                   cond: np.ndarray | None, k, null_rows=None) -> Tensor:
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim != 3 or tau.shape[1] != cfg.horizon or tau.shape[2] != cfg.width:
        raise ValueError(f"expected window shape (B, {cfg.horizon}, {cfg.width})")
    B = tau.shape[0]
    k_arr = np.full(B, k, dtype=np.float64) if np.ndim(k) == 0 else \
        np.asarray(k, dtype=np.float64)

    temb = _sinusoidal(k_arr, cfg.base_channels)
    temb = ad.affine(ad.constant(temb), p["temb.l1.w"], p["temb.l1.b"])
    temb = ad.affine(ad.mish(temb), p["temb.l2.w"], p["temb.l2.b"])

    if cond is None:
        cemb = ad.mul(ad.reshape(p["null_token"], (1, cfg.cond_embed_dim)),
                      np.ones((B, 1)))
    else:
        cond = np.asarray(cond, dtype=np.float64)
        if cond.shape != (B, cfg.cond_length, cfg.width):
            raise ValueError(
                f"expected condition shape (B, {cfg.cond_length}, {cfg.width})"
            )
        flat = ad.constant(cond.reshape(B, -1))
        cemb = ad.affine(flat, p["cemb.l1.w"], p["cemb.l1.b"])
        cemb = ad.affine(ad.mish(cemb), p["cemb.l2.w"], p["cemb.l2.b"])
        if null_rows is not None and np.any(null_rows):
            keep = (~np.asarray(null_rows, dtype=bool)).astype(np.float64)
            cemb = ad.add(
                ad.mul(cemb, keep[:, None]),
                ad.mul(ad.reshape(p["null_token"], (1, cfg.cond_embed_dim)),
                       (1.0 - keep)[:, None]),
            )
    emb = ad.concat([temb, cemb], axis=1)

    x = np.concatenate([tau.transpose(0, 2, 1), mask[:, None, :]], axis=1)
    h = ad.conv1d(ad.constant(x), p["init.w"], p["init.b"])

    dims = cfg.dims
    skips = []
    for i in range(len(dims)):
        h = _res_block(p, f"down{i}a", h, emb, B)
        h = _res_block(p, f"down{i}b", h, emb, B)
        if i < len(dims) - 1:
            skips.append(h)
            h = ad.avg_pool1d(h)
    h = _res_block(p, "mida", h, emb, B)
    h = _res_block(p, "midb", h, emb, B)
    for i in reversed(range(len(dims) - 1)):
        h = ad.upsample_nearest1d(h)
        h = ad.concat([h, skips.pop()], axis=1)
        h = _res_block(p, f"up{i}a", h, emb, B)
        h = _res_block(p, f"up{i}b", h, emb, B)
    h = ad.mish(ad.conv1d(h, p["final.conv1.w"], p["final.conv1.b"]))
    h = ad.conv1d(h, p["final.conv2.w"], p["final.conv2.b"])
    return ad.transpose(h, (0, 2, 1))  # (B, H, width)


def forward(params: dict, cfg: NetConfig, tau: np.ndarray, mask: np.ndarray,
            cond: np.ndarray | None, k, null_rows=None) -> np.ndarray:
    """Clean-window prediction; ndarray in, ndarray out (no gradient tape)."""
    p = {name: ad.constant(v.data if isinstance(v, Tensor) else v)
         for name, v in params.items()}
    return _forward_graph(p, cfg, tau, mask, cond, k, null_rows).data


@dataclass(eq=False)
class LossBatch:
    """One training minibatch; eps/k/drop are sampled by the caller so the
    loss itself is a deterministic function (finite-difference checkable)."""

    tau0: np.ndarray          # (B, H, n) clean windows, normalized
    mask: np.ndarray          # (B, H)
    cond: np.ndarray          # (B, L, n)
    k: np.ndarray             # (B,) diffusion steps in [1, K]
    eps: np.ndarray           # (B, H, n) standard normal draw
    drop: np.ndarray          # (B,) bool, condition -> null token


def _dynamics_mse(pred: Tensor, true_raw: np.ndarray,
                  transition: TransitionSpec, norm: Normalization,
                  weights: np.ndarray | None = None,
                  fd_step: float = 1e-6) -> Tensor:
    """Mean squared gap between f(true) and f(predicted), measured in
    normalized units. pred holds normalized states (M, n).

    The backward pass chains through f with central finite differences,
    matching the numerical-Jacobian convention used by the EKF.
    """
    std, mean = norm.std, norm.mean
    x_hat = pred.data * std + mean
    f_hat = apply_transition(transition, x_hat)
    f_true = apply_transition(transition, true_raw)
    w = np.ones(pred.data.shape[:1]) if weights is None else weights
    d = (f_hat - f_true) / std
    denom = w.sum() * pred.data.shape[1]
    val = ((d * d) * w[:, None]).sum() / denom

    def bw(g):
        coeff = 2.0 * d * w[:, None] / std / denom
        grad_raw = np.zeros_like(x_hat)
        n = x_hat.shape[1]
        for i in range(n):
            e = np.zeros(n)
            e[i] = fd_step
            fp = apply_transition(transition, x_hat + e)
            fm = apply_transition(transition, x_hat - e)
            grad_raw[:, i] = (coeff * (fp - fm) / (2.0 * fd_step)).sum(axis=1)
        return (g * grad_raw * std,)

    return Tensor(val, parents=(pred,), bw=bw)


def loss(params: dict, cfg: NetConfig, batch: LossBatch,
         sched: DiffusionSchedule, transition: TransitionSpec | None = None,
         norm: Normalization | None = None, dynamic_loss_weight: float = 1.0,
         dynamic_loss_on_all_slots: bool = False):
    """Total training loss on one minibatch.

    Returns (total Tensor, reconstruction float, dynamics float). The window
    term is the masked MSE between the clean window and its prediction from
    the noised input; the dynamics term compares f at the final-state slot of
    the true and predicted windows (optionally at every unmasked slot).
    """
    p = _as_param_tensors(params)
    tau_k = q_sample_array(batch.tau0, batch.mask, batch.k, batch.eps, sched)
    pred = _forward_graph(p, cfg, tau_k, batch.mask, batch.cond, batch.k,
                          null_rows=batch.drop)
    l_tau0 = ad.weighted_mse(pred, batch.tau0, batch.mask[:, :, None])

    if transition is not None and dynamic_loss_weight != 0.0:
        norm = norm or Normalization.identity(cfg.width)
        B, H, n = batch.tau0.shape
        if dynamic_loss_on_all_slots:
            flat_pred = ad.reshape(pred, (B * H, n))
            true_raw = norm.denormalize(batch.tau0.reshape(B * H, n))
            l_dyn = _dynamics_mse(flat_pred, true_raw, transition, norm,
                                  weights=batch.mask.reshape(B * H))
        else:
            state_pred = ad.reshape(
                ad.slice_axis(pred, 1, H - 1, H), (B, n)
            )
            true_raw = norm.denormalize(batch.tau0[:, H - 1])
            l_dyn = _dynamics_mse(state_pred, true_raw, transition, norm)
        total = ad.add(l_tau0, ad.mul(l_dyn, dynamic_loss_weight))
        l_dyn_val = float(l_dyn.data)
    else:
        total = l_tau0
        l_dyn_val = 0.0
    if not np.isfinite(total.data):
        raise RuntimeError("training diverged")
    return total, float(l_tau0.data), l_dyn_val


def train(dataset, cfg: NetConfig, train_cfg: TrainConfig,
          sched: DiffusionSchedule, rng: np.random.Generator,
          transition: TransitionSpec | None = None,
          norm: Normalization | None = None, out_dir=None,
          initial_params: dict | None = None, log_fn=None,
          checkpoint_meta: dict | None = None):
    """Adam training over shuffled minibatches.

    dataset must expose float arrays tau0 (N,H,n), mask (N,H), cond (N,L,n).
    Returns (params, history) where history has one record per epoch. A
    checkpoint and the loss history are rewritten after every epoch when
    out_dir is given.
    """
    params = initial_params if initial_params is not None else \
        init_params(cfg, rng)
    opt = ad.AdamState(params)
    N = dataset.tau0.shape[0]
    if N == 0:
        raise ValueError("dataset is empty")
    B = min(train_cfg.batch_size, N)
    history = []
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(N)
        tot_sum = t0_sum = dyn_sum = 0.0
        n_batches = 0
        for start in range(0, N - B + 1, B):
            idx = perm[start : start + B]
            batch = LossBatch(
                tau0=dataset.tau0[idx],
                mask=dataset.mask[idx],
                cond=dataset.cond[idx],
                k=rng.integers(1, sched.K + 1, size=B),
                eps=rng.standard_normal((B,) + dataset.tau0.shape[1:]),
                drop=rng.random(B) < train_cfg.cond_dropout_p,
            )
            ad.zero_gradients(params)
            total, l0, ld = loss(
                params, cfg, batch, sched, transition, norm,
                train_cfg.dynamic_loss_weight,
                train_cfg.dynamic_loss_on_all_slots,
            )
            total.backward()
            ad.clip_gradients(params, train_cfg.grad_clip)
            ad.adam_step(params, opt, train_cfg.learning_rate,
                         train_cfg.adam_beta1, train_cfg.adam_beta2,
                         train_cfg.adam_eps)
            tot_sum += float(total.data)
            t0_sum += l0
            dyn_sum += ld
            n_batches += 1
        rec = {
            "epoch": epoch,
            "loss": tot_sum / n_batches,
            "loss_tau0": t0_sum / n_batches,
            "loss_dynamic": dyn_sum / n_batches,
        }
        history.append(rec)
        if log_fn is not None:
            log_fn(f"epoch {epoch}: loss {rec['loss']:.6f} "
                   f"(tau0 {rec['loss_tau0']:.6f}, dyn {rec['loss_dynamic']:.6f})")
        if out_dir is not None:
            from pathlib import Path
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out / "checkpoint.bin", params, cfg,
                            meta=checkpoint_meta)
            with open(out / "loss_history.txt", "w") as fh:
                for r in history:
                    fh.write(f"{r['epoch']} {r['loss']!r}\n")
    return params, history


# --- checkpoint container ----------------------------------------------------

def _cfg_to_dict(cfg: NetConfig) -> dict:
    return {
        "horizon": cfg.horizon,
        "width": cfg.width,
        "base_channels": cfg.base_channels,
        "channel_multipliers": list(cfg.channel_multipliers),
        "kernel_size": cfg.kernel_size,
        "time_embed_dim": cfg.time_embed_dim,
        "cond_embed_dim": cfg.cond_embed_dim,
        "cond_length": cfg.cond_length,
    }


def _cfg_from_dict(d: dict) -> NetConfig:
    d = dict(d)
    d["channel_multipliers"] = tuple(d["channel_multipliers"])
    return NetConfig(**d)


def save_checkpoint(path, params: dict, cfg: NetConfig,
                    meta: dict | None = None) -> None:
    """Binary container: magic, u64 header length, JSON header (version,
    config echo, tensor table, metadata, payload checksum), then row-major
    float64 tensor data."""
    names = sorted(params.keys())
    arrays = [np.ascontiguousarray(
        params[n].data if isinstance(params[n], Tensor) else params[n],
        dtype=np.float64) for n in names]
    payload = b"".join(a.tobytes() for a in arrays)
    header = {
        "version": 1,
        "net_config": _cfg_to_dict(cfg),
        "tensors": [{"name": n, "shape": list(a.shape)}
                    for n, a in zip(names, arrays)],
        "meta": meta or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path):
    """Returns (params dict of ndarrays, NetConfig, meta dict)."""
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ValueError("checkpoint checksum mismatch")
    params = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size,
                            offset=offset).reshape(shape).copy()
        params[entry["name"]] = arr
        offset += size * 8
    return params, _cfg_from_dict(header["net_config"]), header.get("meta", {})
