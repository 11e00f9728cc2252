"""Dense-tensor numerics for the fixed encoder graphs.

All arrays are numpy, default float32, layout ``(C, H, W)`` for single images
and ``(N, C, H, W)`` for batches. Convolution uses the cross-correlation
convention (no kernel flip). Every backward here is the exact analytic
gradient of its forward map; ``grad_check`` verifies that against central
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage


class ShapeError(ValueError):
    pass


@dataclass
class ConvLayerParams:
    kernels: np.ndarray  # (K, C, kh, kw)
    bias: np.ndarray  # (K,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        kh, kw = self.kernels.shape[2], self.kernels.shape[3]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def _as_batch(x: np.ndarray):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected 3D or 4D input, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # xp: padded (N, C, Hp, Wp) -> (N, Ho, Wo, C*kh*kw)
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = v.shape[:4]
    return np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)


def conv2d(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """Cross-correlation of ``x`` (C,H,W or N,C,H,W) with ``params`` plus bias."""
    xb, squeeze = _as_batch(x)
    k, c, kh, kw = params.kernels.shape
    if xb.shape[1] != c:
        raise ShapeError(f"input has {xb.shape[1]} channels, kernels expect {c}")
    s, p = params.stride, params.padding
    h, w = xb.shape[2], xb.shape[3]
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"non-positive output extent {ho}x{wo}")
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
    cols = _im2col(xp, kh, kw, s)
    wmat = params.kernels.reshape(k, c * kh * kw)
    out = cols @ wmat.T + params.bias
    out = out.transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    return out[0] if squeeze else out


def conv2d_backward(x: np.ndarray, params: ConvLayerParams, grad_out: np.ndarray):
    """Gradients of ``conv2d`` wrt input, kernels and bias."""
    xb, squeeze = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    k, c, kh, kw = params.kernels.shape
    s, p = params.stride, params.padding
    n, _, h, w = xb.shape
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if gb.shape != (n, k, ho, wo):
        raise ShapeError(f"grad_out shape {gb.shape}, expected {(n, k, ho, wo)}")
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
    cols = _im2col(xp, kh, kw, s)  # (N, Ho, Wo, C*kh*kw)
    gmat = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
    wmat = params.kernels.reshape(k, c * kh * kw)

    grad_kernels = (gmat.T @ cols.reshape(n * ho * wo, -1)).reshape(params.kernels.shape)
    grad_bias = gmat.sum(axis=0)
    dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)

    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
    if squeeze:
        dx = dx[0]
    return dx.astype(x.dtype, copy=False), grad_kernels.astype(x.dtype, copy=False), grad_bias.astype(x.dtype, copy=False)


def batchnorm(x: np.ndarray, params: BatchNormParams, mode: str, update_stats: bool = True):
    """Per-channel normalization over batch and spatial dims.

    Returns (output, cache); the cache feeds ``batchnorm_backward``. In train
    mode batch moments are used and running stats updated in place (unless
    ``update_stats`` is False); eval mode uses the running stats.
    """
    if x.ndim != 4:
        raise ShapeError("batchnorm expects (N, C, H, W)")
    n, c, h, w = x.shape
    if mode == "train" and n * h * w < 2:
        raise ShapeError("train-mode batchnorm needs at least 2 samples per channel")
    axes = (0, 2, 3)
    g = params.gamma.reshape(1, c, 1, 1)
    b = params.beta.reshape(1, c, 1, 1)
    if mode == "train":
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        if update_stats:
            m = params.momentum
            params.running_mean[:] = (1 - m) * params.running_mean + m * mean
            params.running_var[:] = (1 - m) * params.running_var + m * var
    elif mode == "eval":
        mean = params.running_mean.astype(np.float64)
        var = params.running_var.astype(np.float64)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = (1.0 / np.sqrt(var + params.eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype).reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = xhat * g + b
    cache = (xhat, inv, mode)
    return out.astype(x.dtype, copy=False), cache


def batchnorm_backward(grad_out: np.ndarray, params: BatchNormParams, cache):
    xhat, inv, mode = cache
    n, c, h, w = grad_out.shape
    axes = (0, 2, 3)
    g = params.gamma.reshape(1, c, 1, 1)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    dxhat = grad_out * g
    if mode == "eval":
        dx = dxhat * inv.reshape(1, c, 1, 1)
    else:
        m = n * h * w
        dx = (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        ) * inv.reshape(1, c, 1, 1)
    return (
        dx.astype(grad_out.dtype, copy=False),
        grad_gamma.astype(params.gamma.dtype, copy=False),
        grad_beta.astype(params.beta.dtype, copy=False),
    )


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def l2_normalize_locations(f: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Divide each spatial location's channel vector by max(norm, eps)."""
    norms = np.sqrt((f.astype(np.float64) ** 2).sum(axis=-3, keepdims=True))
    return (f / np.maximum(norms, eps)).astype(f.dtype, copy=False)


def l2_normalize_backward(grad_out: np.ndarray, f: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    f64 = f.astype(np.float64)
    g64 = grad_out.astype(np.float64)
    norms = np.sqrt((f64 ** 2).sum(axis=-3, keepdims=True))
    denom = np.maximum(norms, eps)
    y = f64 / denom
    # Below eps the map is linear (scale by 1/eps); above it is the usual
    # projection of the gradient off the radial direction.
    proj = g64 - y * (y * g64).sum(axis=-3, keepdims=True)
    dx = np.where(norms > eps, proj / denom, g64 / eps)
    return dx.astype(grad_out.dtype, copy=False)


# ---------------------------------------------------------------------------
# Layer objects: thin stateful wrappers used to assemble the encoder and the
# refinement regressor. Each holds params/grads and caches its forward input.
# ---------------------------------------------------------------------------


class Layer:
    def params(self):
        return []

    def grads(self):
        return []

    def zero_grads(self):
        for g in self.grads():
            g[1][...] = 0

    def cast(self, dtype):
        pass


class ConvLayer(Layer):
    def __init__(self, c_in, c_out, k, stride=1, rng=None, dtype=np.float32):
        fan_in = c_in * k * k
        scale = np.sqrt(2.0 / fan_in)
        if rng is None:
            rng = np.random.default_rng(0)
        self.name = f"conv{c_in}x{c_out}k{k}s{stride}"
        self.p = ConvLayerParams(
            kernels=(rng.standard_normal((c_out, c_in, k, k)) * scale).astype(dtype),
            bias=np.zeros(c_out, dtype=dtype),
            stride=stride,
            padding=(k - 1) // 2,
        )
        self.gk = np.zeros_like(self.p.kernels)
        self.gb = np.zeros_like(self.p.bias)
        self._x = None

    def forward(self, x, mode="train"):
        self._x = x
        return conv2d(x, self.p)

    def backward(self, dy):
        dx, dk, db = conv2d_backward(self._x, self.p, dy)
        self.gk += dk
        self.gb += db
        return dx

    def params(self):
        return [("kernels", self.p.kernels), ("bias", self.p.bias)]

    def grads(self):
        return [("kernels", self.gk), ("bias", self.gb)]

    def cast(self, dtype):
        self.p.kernels = self.p.kernels.astype(dtype)
        self.p.bias = self.p.bias.astype(dtype)
        self.gk = np.zeros_like(self.p.kernels)
        self.gb = np.zeros_like(self.p.bias)


class SmoothLayer(Layer):
    """Fixed Gaussian low-pass over the spatial axes; no learned parameters.

    The truncated kernel is symmetric and padding is zero, so the operator is
    self-adjoint: the backward pass applies the same filter to the gradient.
    """

    def __init__(self, sigma=1.0):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)

    def _blur(self, x):
        return ndimage.gaussian_filter(
            x, sigma=(0.0, 0.0, self.sigma, self.sigma), mode="constant")

    def forward(self, x, mode="train"):
        return self._blur(x)

    def backward(self, dy):
        return self._blur(dy)


class ReLULayer(Layer):
    def forward(self, x, mode="train"):
        self._x = x
        return relu(x)

    def backward(self, dy):
        return relu_backward(dy, self._x)


class BatchNormLayer(Layer):
    def __init__(self, channels, dtype=np.float32):
        self.p = BatchNormParams.fresh(channels, dtype=dtype)
        self.gg = np.zeros_like(self.p.gamma)
        self.gb = np.zeros_like(self.p.beta)
        self._cache = None
        self.update_stats = True

    def forward(self, x, mode="train"):
        out, self._cache = batchnorm(x, self.p, mode, update_stats=self.update_stats)
        return out

    def backward(self, dy):
        dx, dg, db = batchnorm_backward(dy, self.p, self._cache)
        self.gg += dg
        self.gb += db
        return dx

    def params(self):
        return [("gamma", self.p.gamma), ("beta", self.p.beta)]

    def grads(self):
        return [("gamma", self.gg), ("beta", self.gb)]

    def stats(self):
        return [("running_mean", self.p.running_mean), ("running_var", self.p.running_var)]

    def cast(self, dtype):
        self.p.gamma = self.p.gamma.astype(dtype)
        self.p.beta = self.p.beta.astype(dtype)
        self.p.running_mean = self.p.running_mean.astype(dtype)
        self.p.running_var = self.p.running_var.astype(dtype)
        self.gg = np.zeros_like(self.p.gamma)
        self.gb = np.zeros_like(self.p.beta)


class LinearLayer(Layer):
    def __init__(self, d_in, d_out, rng=None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        scale = np.sqrt(2.0 / d_in)
        self.w = (rng.standard_normal((d_out, d_in)) * scale).astype(dtype)
        self.b = np.zeros(d_out, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def forward(self, x, mode="train"):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dy):
        self.gw += dy.T @ self._x
        self.gb += dy.sum(axis=0)
        return (dy @ self.w).astype(dy.dtype, copy=False)

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def grads(self):
        return [("gw", self.gw), ("gb", self.gb)]

    def cast(self, dtype):
        self.w = self.w.astype(dtype)
        self.b = self.b.astype(dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = layers

    def forward(self, x, mode="train"):
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def params(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"{i}.{n}", a) for n, a in layer.params())
        return out

    def grads(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"{i}.{n}", a) for n, a in layer.grads())
        return out

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def cast(self, dtype):
        for layer in self.layers:
            layer.cast(dtype)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check(fragment, x: np.ndarray, h: float = 1e-3, mode: str = "train",
               max_coords: int = 24, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fragment`` is any object with ``forward(x, mode)``, ``backward(dy)``,
    ``params()``, ``grads()`` and ``zero_grads()``. A fixed random projection
    turns the output into a scalar. Differencing runs in float64 (the analytic
    path is dtype-generic) so roundoff does not swamp the h^2 truncation term.
    Running statistics are frozen during the check.
    """
    rng = np.random.default_rng(seed)
    fragment.cast(np.float64)
    for layer in getattr(fragment, "layers", [fragment]):
        if isinstance(layer, BatchNormLayer):
            layer.update_stats = False
    x64 = x.astype(np.float64)

    y = fragment.forward(x64, mode)
    u = rng.standard_normal(y.shape)

    fragment.zero_grads()
    dx = fragment.backward(u.copy())
    analytic = [("input", dx)] + [(n, g.copy()) for n, g in fragment.grads()]
    tensors = [("input", x64)] + [(n, a) for n, a in fragment.params()]

    def loss():
        return float((fragment.forward(x64, mode) * u).sum())

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        lp = loss()
        flat[i] = orig - step
        lm = loss()
        flat[i] = orig
        return (lp - lm) / (2 * step)

    worst = 0.0
    for (name, arr), (_, g) in zip(tensors, analytic):
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        n_coords = min(max_coords, flat.size)
        idx = rng.choice(flat.size, size=n_coords, replace=False)
        for i in idx:
            # A step that straddles an activation kink measures a chord, not
            # the local derivative, so shrink the step until the difference
            # confirms the analytic value (a wrong analytic gradient is
            # confirmed at no step size).
            a = gflat[i]
            step = h
            err = np.inf
            for _ in range(6):
                numeric = central(flat, i, step)
                err = min(err, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
                if err <= 1e-6:
                    break
                step /= 8
            worst = max(worst, err)

    fragment.cast(np.float32)
    for layer in getattr(fragment, "layers", [fragment]):
        if isinstance(layer, BatchNormLayer):
            layer.update_stats = True
    return worst
