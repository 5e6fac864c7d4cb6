"""Forward and backward kernels for every layer of the network.

Each layer is a pair of functions: `<name>(input, params, ...)` returning
`(output, cache)` and `<name>_backward(grad_output, cache)` returning the
input gradient (plus a dict of parameter gradients for weight layers).
Backward passes are hand-derived and validated against central finite
differences in the test suite.

Conventions fixed here:

* convolution is cross-correlation (no kernel flip); weights are laid out
  (kh, kw, c_in, c_out)
* max-pool ties route the whole gradient to the first maximum in row-major
  window scan order
* relu's subgradient at exactly 0 is 0
* dropout is inverted: kept activations scale by 1/(1-rate) at train time,
  eval is the identity
* batchnorm normalizes over (N, H, W) with biased variance; running stats
  update as r <- (1-m)*r + m*batch_stat
* cross-channel normalization divides by (k + (alpha/depth) * sum x^2)^beta
  over a centered channel window of `depth`, clipped at the edges
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DegenerateVarianceError,
    InvalidArgumentError,
    LabelError,
    ShapeError,
)
from .tensor import Rng

TRAIN = "train"
EVAL = "eval"


def _check_mode(mode: str) -> str:
    if mode not in (TRAIN, EVAL):
        raise InvalidArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode


# ---------------------------------------------------------------------------
# parameter records
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    weights: np.ndarray  # (kh, kw, c_in, c_out)
    bias: np.ndarray  # (c_out,)
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError("conv weights must be (kh, kw, c_in, c_out)")
        kh, kw, _, c_out = self.weights.shape
        if kh < 1 or kw < 1:
            raise ShapeError("kernel extent must be >= 1")
        if self.stride < 1:
            raise InvalidArgumentError("stride must be >= 1")
        if self.pad < 0:
            raise InvalidArgumentError("pad must be >= 0")
        if self.bias.shape != (c_out,):
            raise ShapeError("bias length must equal c_out")


@dataclass
class LRNParams:
    depth: int = 5
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.depth < 1 or self.depth % 2 == 0:
            raise InvalidArgumentError("depth must be an odd positive integer")
        if self.k <= 0:
            raise InvalidArgumentError("k must be > 0")
        if self.beta <= 0:
            raise InvalidArgumentError("beta must be > 0")


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    stat_momentum: float = 0.1

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == c == self.running_mean.shape == self.running_var.shape):
            raise ShapeError("all batchnorm vectors must share the channel count")
        if np.any(self.running_var < 0):
            raise InvalidArgumentError("running variance must be >= 0")
        if self.epsilon <= 0:
            raise InvalidArgumentError("epsilon must be > 0")
        if not 0.0 < self.stat_momentum < 1.0:
            raise InvalidArgumentError("stat_momentum must lie in (0, 1)")

    @classmethod
    def identity(cls, channels: int, epsilon: float = 1e-5, stat_momentum: float = 0.1,
                 dtype=np.float32) -> "BNParams":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            epsilon=epsilon,
            stat_momentum=stat_momentum,
        )


@dataclass
class FCParams:
    weights: np.ndarray  # (in_features, out_features)
    bias: np.ndarray  # (out_features,)

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ShapeError("fc weights must be (in_features, out_features)")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError("fc bias length must equal out_features")
        if not np.all(np.isfinite(self.weights)) or not np.all(np.isfinite(self.bias)):
            raise InvalidArgumentError("fc parameters must be finite")


@dataclass
class DropoutConfig:
    rate: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise InvalidArgumentError(f"dropout rate must lie in [0, 1), got {self.rate}")


@dataclass
class PoolConfig:
    window: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise InvalidArgumentError("pool window and stride must be >= 1")


# ---------------------------------------------------------------------------
# shape functions (total: no data required)
# ---------------------------------------------------------------------------


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple:
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if h + 2 * pad < kh or w + 2 * pad < kw or oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{w}")
    return oh, ow


def pool_output_hw(h: int, w: int, window: int, stride: int) -> tuple:
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    return (h - window) // stride + 1, (w - window) // stride + 1


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(n, hp, wp, c) -> (n*oh*ow, kh*kw*c) patch matrix, row-major (dy, dx, k)."""
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (n, oh, ow, c, kh, kw)
    n, oh, ow = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3)  # (n, oh, ow, kh, kw, c)
    return np.ascontiguousarray(cols).reshape(n * oh * ow, -1)


def conv2d(x: np.ndarray, p: ConvParams):
    """Cross-correlation with bias.  Returns (output, cache)."""
    n, h, w, c = x.shape
    kh, kw, c_in, c_out = p.weights.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, kernel expects {c_in}")
    oh, ow = conv_output_hw(h, w, kh, kw, p.stride, p.pad)
    if p.pad:
        padded = np.pad(x, ((0, 0), (p.pad, p.pad), (p.pad, p.pad), (0, 0)))
    else:
        padded = x
    cols = _im2col(padded, kh, kw, p.stride)
    wmat = p.weights.reshape(kh * kw * c_in, c_out)
    out = cols @ wmat + p.bias
    out = out.reshape(n, oh, ow, c_out)
    cache = {"cols": cols, "wmat": wmat, "p": p, "x_shape": x.shape,
             "padded_shape": padded.shape, "out_hw": (oh, ow)}
    return out, cache


def conv2d_backward(gout: np.ndarray, cache: dict):
    p: ConvParams = cache["p"]
    kh, kw, c_in, c_out = p.weights.shape
    n, h, w, _ = cache["x_shape"]
    oh, ow = cache["out_hw"]
    gmat = gout.reshape(n * oh * ow, c_out)
    gw = (cache["cols"].T @ gmat).reshape(kh, kw, c_in, c_out)
    gb = gmat.sum(axis=0)
    gcols = (gmat @ cache["wmat"].T).reshape(n, oh, ow, kh, kw, c_in)
    gpad = np.zeros(cache["padded_shape"], dtype=gout.dtype)
    s = p.stride
    for dy in range(kh):
        for dx in range(kw):
            gpad[:, dy:dy + oh * s:s, dx:dx + ow * s:s, :] += gcols[:, :, :, dy, dx, :]
    gin = gpad[:, p.pad:p.pad + h, p.pad:p.pad + w, :]
    return np.ascontiguousarray(gin), {"weights": gw, "bias": gb}


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------


def maxpool(x: np.ndarray, window: int = 2, stride: int = 2):
    n, h, w, c = x.shape
    oh, ow = pool_output_hw(h, w, window, stride)
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (n, oh, ow, c, window, window)
    flat = np.ascontiguousarray(win).reshape(n, oh, ow, c, window * window)
    out = flat.max(axis=-1)
    argmax = flat.argmax(axis=-1)  # first max in (dy, dx) row-major scan
    cache = {"argmax": argmax, "x_shape": x.shape, "window": window,
             "stride": stride, "out_hw": (oh, ow)}
    return out, cache


def maxpool_backward(gout: np.ndarray, cache: dict) -> np.ndarray:
    n, h, w, c = cache["x_shape"]
    oh, ow = cache["out_hw"]
    window, stride = cache["window"], cache["stride"]
    dy, dx = np.divmod(cache["argmax"], window)
    ni = np.arange(n)[:, None, None, None]
    oy = np.arange(oh)[None, :, None, None]
    ox = np.arange(ow)[None, None, :, None]
    ci = np.arange(c)[None, None, None, :]
    gin = np.zeros(cache["x_shape"], dtype=gout.dtype)
    np.add.at(gin, (np.broadcast_to(ni, gout.shape), oy * stride + dy,
                    ox * stride + dx, np.broadcast_to(ci, gout.shape)), gout)
    return gin


# ---------------------------------------------------------------------------
# cross-channel (local response) normalization
# ---------------------------------------------------------------------------


def _channel_window_sum(t: np.ndarray, depth: int) -> np.ndarray:
    """Sum over a centered channel window of `depth`, clipped at the edges."""
    half = (depth - 1) // 2
    if half == 0:
        return t
    padded = np.pad(t, ((0, 0), (0, 0), (0, 0), (half, half)))
    win = np.lib.stride_tricks.sliding_window_view(padded, depth, axis=3)
    return win.sum(axis=-1)


def lrn(x: np.ndarray, p: LRNParams):
    ssum = _channel_window_sum(x * x, p.depth)
    scale = p.k + (p.alpha / p.depth) * ssum
    out = x * scale ** np.asarray(-p.beta, dtype=x.dtype)
    cache = {"x": x, "scale": scale, "p": p}
    return out, cache


def lrn_backward(gout: np.ndarray, cache: dict) -> np.ndarray:
    x, scale, p = cache["x"], cache["scale"], cache["p"]
    beta = np.asarray(p.beta, dtype=x.dtype)
    t = gout * x * scale ** (-beta - 1)
    tw = _channel_window_sum(t, p.depth)
    return gout * scale ** (-beta) - (2.0 * p.alpha * p.beta / p.depth) * x * tw


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------


def relu(x: np.ndarray):
    out = np.maximum(x, 0)
    return out, {"mask": x > 0}


def relu_backward(gout: np.ndarray, cache: dict) -> np.ndarray:
    return gout * cache["mask"]


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------


def fully_connected(x: np.ndarray, p: FCParams):
    n = x.shape[0]
    in_features = p.weights.shape[0]
    if x.size // n != in_features:
        raise ShapeError(
            f"flattened feature count {x.size // n} != in_features {in_features}")
    x2 = np.ascontiguousarray(x).reshape(n, in_features)
    out = (x2 @ p.weights + p.bias).reshape(n, 1, 1, -1)
    return out, {"x2": x2, "x_shape": x.shape, "p": p}


def fully_connected_backward(gout: np.ndarray, cache: dict):
    p: FCParams = cache["p"]
    n = gout.shape[0]
    g2 = gout.reshape(n, -1)
    gw = cache["x2"].T @ g2
    gb = g2.sum(axis=0)
    gin = (g2 @ p.weights.T).reshape(cache["x_shape"])
    return gin, {"weights": gw, "bias": gb}


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def dropout(x: np.ndarray, cfg: DropoutConfig, mode: str = TRAIN,
            seed: Optional[int] = None):
    """Inverted dropout; the mask is fully determined by `seed`."""
    _check_mode(mode)
    if mode == EVAL or cfg.rate == 0.0:
        return x, {"mask": None}
    if seed is None:
        raise InvalidArgumentError("train-mode dropout requires a seed")
    u = Rng(seed).uniforms(x.size).reshape(x.shape)
    mask = (u >= cfg.rate).astype(x.dtype) / np.asarray(1.0 - cfg.rate, dtype=x.dtype)
    return x * mask, {"mask": mask}


def dropout_backward(gout: np.ndarray, cache: dict) -> np.ndarray:
    if cache["mask"] is None:
        return gout
    return gout * cache["mask"]


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batchnorm(x: np.ndarray, p: BNParams, mode: str = TRAIN):
    """Per-channel normalization over (N, H, W).

    Train mode uses batch statistics and folds them into the running
    stats; eval mode reads the running stats and touches nothing.
    """
    _check_mode(mode)
    if x.shape[3] != p.gamma.shape[0]:
        raise ShapeError(f"input has {x.shape[3]} channels, batchnorm expects "
                         f"{p.gamma.shape[0]}")
    if mode == EVAL:
        inv_std = 1.0 / np.sqrt(p.running_var + np.asarray(p.epsilon, dtype=x.dtype))
        out = p.gamma * (x - p.running_mean) * inv_std + p.beta
        return out, {"mode": EVAL}
    m = x.shape[0] * x.shape[1] * x.shape[2]
    if m < 2:
        raise DegenerateVarianceError(
            "train-mode batchnorm needs at least 2 elements per channel")
    mu = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    inv_std = 1.0 / np.sqrt(var + np.asarray(p.epsilon, dtype=x.dtype))
    xhat = (x - mu) * inv_std
    out = p.gamma * xhat + p.beta
    sm = p.stat_momentum
    p.running_mean = ((1.0 - sm) * p.running_mean + sm * mu).astype(x.dtype)
    p.running_var = ((1.0 - sm) * p.running_var + sm * var).astype(x.dtype)
    cache = {"mode": TRAIN, "xhat": xhat, "inv_std": inv_std, "gamma": p.gamma, "m": m}
    return out, cache


def batchnorm_backward(gout: np.ndarray, cache: dict):
    if cache["mode"] == EVAL:
        raise InvalidArgumentError("backward through eval-mode batchnorm is undefined")
    xhat, inv_std, m = cache["xhat"], cache["inv_std"], cache["m"]
    gbeta = gout.sum(axis=(0, 1, 2))
    ggamma = (gout * xhat).sum(axis=(0, 1, 2))
    gxhat = gout * cache["gamma"]
    gin = (inv_std / m) * (m * gxhat
                           - gxhat.sum(axis=(0, 1, 2))
                           - xhat * (gxhat * xhat).sum(axis=(0, 1, 2)))
    return gin, {"gamma": ggamma, "beta": gbeta}


# ---------------------------------------------------------------------------
# softmax cross-entropy (loss boundary; the network itself emits raw logits)
# ---------------------------------------------------------------------------


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch.  Returns (loss, probs)."""
    n, h, w, k = logits.shape
    if h != 1 or w != 1:
        raise ShapeError(f"logits must be (n, 1, 1, K), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have length {n}, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    z = logits.reshape(n, k)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    sums = e.sum(axis=1, keepdims=True)
    probs = e / sums
    # log-sum-exp form: stays finite even where probs underflow
    loss = float(np.mean(np.log(sums[:, 0]) - z[np.arange(n), labels]))
    return loss, probs.reshape(n, 1, 1, k)


def softmax_xent_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean loss w.r.t. the logits: (probs - onehot)/n."""
    n, _, _, k = probs.shape
    grad = probs.reshape(n, k).copy()
    grad[np.arange(n), np.asarray(labels)] -= 1.0
    return (grad / n).reshape(n, 1, 1, k)
