"""Minimal reverse-mode automatic differentiation over numpy arrays.

Covers exactly the operator set the trajectory denoiser needs: convolution,
affine maps, Mish activation, elementwise arithmetic, concatenation,
pooling/upsampling, slicing, and weighted mean-square reduction. Gradient
correctness is defined by the central finite-difference checks in the test
suite, not by parity with any external library.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "matmul",
    "affine",
    "conv1d",
    "mish",
    "concat",
    "avg_pool1d",
    "upsample_nearest1d",
    "slice_axis",
    "reshape",
    "transpose",
    "weighted_mse",
    "AdamState",
    "adam_step",
    "clip_gradients",
]


class Tensor:
    """Node in the computation tape: an ndarray plus backward bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False, parents=(), bw=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        # Constants reached only through non-differentiable paths carry no tape.
        self._parents = tuple(parents) if self.requires_grad else ()
        self._bw = bw if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen and p.requires_grad:
                        stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bw is None:
                continue
            gs = node._bw(node.grad)
            for p, g in zip(node._parents, gs):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcast axes so grad matches the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out_data, parents=(a, b), bw=bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor(out_data, parents=(a, b), bw=bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor(out_data, parents=(a, b), bw=bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, parents=(a, b), bw=bw)


def affine(x, w, b) -> Tensor:
    """x @ w + b with x (N, D), w (D, M), b (M,)."""
    return add(matmul(x, w), b)


def conv1d(x, w, b) -> Tensor:
    """Same-padded stride-1 1-D convolution.

    x: (B, C, L), w: (O, C, k) with k odd, b: (O,). Output (B, O, L).
    Implemented by im2col + one matmul; the column matrix is cached for
    the weight gradient and scattered back for the input gradient.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    B, C, L = x.data.shape
    O, C2, k = w.data.shape
    if C2 != C:
        raise ValueError(f"conv1d channel mismatch: input {C}, kernel {C2}")
    if k % 2 != 1:
        raise ValueError("conv1d requires an odd kernel size")
    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p)))
    s0, s1, s2 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(B, L, C, k), strides=(s0, s2, s1, s2)
    ).reshape(B * L, C * k)
    cols = np.ascontiguousarray(cols)
    w2 = w.data.reshape(O, C * k).T  # (C*k, O)
    out = (cols @ w2).reshape(B, L, O).transpose(0, 2, 1) + b.data[None, :, None]

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(B * L, O)
        gw = (cols.T @ g2).T.reshape(O, C, k)
        gb = g.sum(axis=(0, 2))
        dcols = (g2 @ w2.T).reshape(B, L, C, k)
        gxp = np.zeros((B, C, L + 2 * p))
        for j in range(k):
            gxp[:, :, j : j + L] += dcols[:, :, :, j].transpose(0, 2, 1)
        return gxp[:, :, p : p + L], gw, gb

    return Tensor(out, parents=(x, w, b), bw=bw)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def mish(x) -> Tensor:
    """x * tanh(softplus(x))."""
    x = _as_tensor(x)
    t = np.tanh(_softplus(x.data))
    if x.requires_grad:
        sig = _sigmoid(x.data)

        def bw(g):
            return (g * (t + x.data * (1.0 - t * t) * sig),)

        return Tensor(x.data * t, parents=(x,), bw=bw)
    return Tensor(x.data * t)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        parents=tuple(tensors),
        bw=bw,
    )


def avg_pool1d(x) -> Tensor:
    """Average pooling by a factor of 2 over the last axis (length must be even)."""
    x = _as_tensor(x)
    B, C, L = x.data.shape
    if L % 2 != 0:
        raise ValueError("avg_pool1d requires an even length")
    out = 0.5 * (x.data[:, :, ::2] + x.data[:, :, 1::2])

    def bw(g):
        gx = np.repeat(g, 2, axis=2)
        gx *= 0.5
        return (gx,)

    return Tensor(out, parents=(x,), bw=bw)


def upsample_nearest1d(x) -> Tensor:
    """Nearest-neighbour upsampling by a factor of 2 over the last axis."""
    x = _as_tensor(x)
    B, C, L = x.data.shape

    def bw(g):
        return (g.reshape(B, C, L, 2).sum(axis=3),)

    return Tensor(np.repeat(x.data, 2, axis=2), parents=(x,), bw=bw)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return Tensor(x.data[idx], parents=(x,), bw=bw)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        return (g.reshape(x.data.shape),)

    return Tensor(x.data.reshape(shape), parents=(x,), bw=bw)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return Tensor(x.data.transpose(axes), parents=(x,), bw=bw)


def weighted_mse(pred, target: np.ndarray, weight: np.ndarray) -> Tensor:
    """sum(weight * (pred - target)^2) / sum(weight), weights held constant."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    weight = np.broadcast_to(
        np.asarray(weight, dtype=np.float64), pred.data.shape
    )
    denom = weight.sum()
    if denom <= 0:
        raise ValueError("weighted_mse needs positive total weight")
    diff = pred.data - target
    out = (weight * diff * diff).sum() / denom

    def bw(g):
        return (g * 2.0 * weight * diff / denom,)

    return Tensor(out, parents=(pred,), bw=bw)


class AdamState:
    """First/second moment buffers keyed like the parameter dict."""

    def __init__(self, params: dict):
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def clip_gradients(params: dict, max_norm: float) -> float:
    """Scale all gradients so the global l2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def adam_step(params: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def zero_gradients(params: dict):
    for p in params.values():
        p.grad = None
