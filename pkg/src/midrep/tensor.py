"""Dense numeric kernels: convolution, pooling, PReLU, LRN, affine, dropout, softmax.

Tensors are plain :class:`numpy.ndarray` objects in channel-major layout.
Feature-map kernels accept a single map ``(C, H, W)`` or a batch
``(N, C, H, W)``; vector kernels accept ``(M,)`` or ``(N, M)``.  Every kernel
keeps the dtype of its input, so the same code serves the standard 32-bit
path and the 64-bit verification path used by gradient checks.

Each differentiable kernel has a ``*_forward`` variant returning
``(output, cache)``; :func:`backward` consumes that cache.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError, StateError

STANDARD = "standard-32bit"
VERIFICATION = "verification-64bit"
PRECISION_DTYPES = {STANDARD: np.float32, VERIFICATION: np.float64}

CHECK_FINITE = os.environ.get("MIDREP_CHECK_FINITE", "") == "1"


def precision_dtype(mode: str) -> type:
    try:
        return PRECISION_DTYPES[mode]
    except KeyError:
        raise ArgumentError(f"unknown precision mode {mode!r}") from None


def as_tensor(data, mode: str = STANDARD) -> np.ndarray:
    """Return a contiguous array in the dtype of ``mode``; validates extents."""
    arr = np.ascontiguousarray(data, dtype=precision_dtype(mode))
    if arr.ndim == 0 or any(e < 1 for e in arr.shape):
        raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


def _finite(out: np.ndarray, what: str) -> np.ndarray:
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{what} produced non-finite values")
    return out


def _maps(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


@dataclass(frozen=True)
class ConvParams:
    kernel: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-D, got {self.kernel.shape}")
        o, _, kh, kw = self.kernel.shape
        if kh != kw:
            raise ShapeError(f"conv kernel must be square, got {kh}x{kw}")
        if self.bias.shape != (o,):
            raise ShapeError(f"conv bias shape {self.bias.shape} != ({o},)")
        if self.stride < 1 or self.padding < 0:
            raise ArgumentError("stride must be >= 1 and padding >= 0")


@dataclass(frozen=True)
class PreluParams:
    slopes: np.ndarray  # (channels,)


@dataclass(frozen=True)
class LrnParams:
    n: int = 5
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise ArgumentError(f"LRN window must be a positive odd integer, got {self.n}")
        if self.k <= 0 or self.alpha < 0 or self.beta <= 0:
            raise ArgumentError("LRN requires k > 0, alpha >= 0, beta > 0")


def conv_output_side(side: int, kernel: int, stride: int, padding: int) -> int:
    return (side + 2 * padding - kernel) // stride + 1


def pool_output_side(side: int, window: int, stride: int) -> int:
    return (side - window) // stride + 1


# --------------------------------------------------------------------------
# convolution


def conv2d_forward(x: np.ndarray, params: ConvParams):
    xb, squeeze = _maps(x)
    n, c, h, w = xb.shape
    o, ci, k, _ = params.kernel.shape
    if c != ci:
        raise ShapeError(f"conv input has {c} channels, kernel expects {ci}")
    s, p = params.stride, params.padding
    oh, ow = conv_output_side(h, k, s, p), conv_output_side(w, k, s, p)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv output extent non-positive for input {h}x{w}, kernel {k}")
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
    cols = np.empty((n, c, k, k, oh, ow), dtype=xb.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
    out = np.tensordot(cols, params.kernel, axes=([1, 2, 3], [1, 2, 3]))  # (n, oh, ow, o)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + params.bias[:, None, None]
    out = out.astype(xb.dtype, copy=False)
    cache = {"kind": "conv", "cols": cols, "params": params, "in_shape": xb.shape, "squeeze": squeeze}
    return _finite(out[0] if squeeze else out, "conv2d"), cache


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    return conv2d_forward(x, params)[0]


def _conv_backward(cache, dout):
    params = cache["params"]
    cols = cache["cols"]
    n, c, h, w = cache["in_shape"]
    k, s, p = params.kernel.shape[2], params.stride, params.padding
    dout = dout[None] if cache["squeeze"] else dout
    oh, ow = dout.shape[2:]
    dkernel = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 4, 5]))
    dbias = dout.sum(axis=(0, 2, 3))
    dcols = np.tensordot(params.kernel, dout, axes=([0], [1]))  # (c, k, k, n, oh, ow)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcols[:, i, j].transpose(1, 0, 2, 3)
    dx = dxp[:, :, p : p + h, p : p + w]
    dx = dx[0] if cache["squeeze"] else dx
    return dx, {"kernel": dkernel.astype(dout.dtype, copy=False), "bias": dbias}


# --------------------------------------------------------------------------
# pooling


def pool2d_forward(x: np.ndarray, mode: str, window: int, stride: int):
    if mode not in ("max", "average"):
        raise ArgumentError(f"pool mode must be 'max' or 'average', got {mode!r}")
    if window < 1 or stride < 1:
        raise ArgumentError("pool window and stride must be >= 1")
    xb, squeeze = _maps(x)
    n, c, h, w = xb.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds spatial extent {h}x{w}")
    oh, ow = pool_output_side(h, window, stride), pool_output_side(w, window, stride)
    views = [
        xb[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
        for i in range(window)
        for j in range(window)
    ]
    cache = {"kind": "pool", "mode": mode, "window": window, "stride": stride,
             "in_shape": xb.shape, "squeeze": squeeze}
    if mode == "max":
        stack = np.stack(views, axis=2)  # (n, c, window*window, oh, ow), row-major scan
        arg = stack.argmax(axis=2)  # first maximal element wins ties
        out = np.take_along_axis(stack, arg[:, :, None], axis=2)[:, :, 0]
        cache["argmax"] = arg
    else:
        out = np.zeros((n, c, oh, ow), dtype=xb.dtype)
        for v in views:
            out += v
        out /= window * window
    return (out[0] if squeeze else out), cache


def pool2d(x: np.ndarray, mode: str, window: int, stride: int) -> np.ndarray:
    return pool2d_forward(x, mode, window, stride)[0]


def _pool_backward(cache, dout):
    dout = dout[None] if cache["squeeze"] else dout
    k, s = cache["window"], cache["stride"]
    dx = np.zeros(cache["in_shape"], dtype=dout.dtype)
    oh, ow = dout.shape[2:]
    if cache["mode"] == "max":
        arg = cache["argmax"]
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, :, i : i + s * oh : s, j : j + s * ow : s] += np.where(arg == idx, dout, 0)
    else:
        share = dout / (k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * oh : s, j : j + s * ow : s] += share
    return (dx[0] if cache["squeeze"] else dx), {}


# --------------------------------------------------------------------------
# PReLU


def _channel_shape(x: np.ndarray) -> tuple[int, tuple[int, ...]]:
    """Channel axis and broadcast shape for a slope vector."""
    if x.ndim in (1, 3):
        axis = 0
    elif x.ndim in (2, 4):
        axis = 1
    else:
        raise ShapeError(f"PReLU expects 1-4 dims, got shape {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return axis, tuple(shape)


def prelu_forward(x: np.ndarray, params: PreluParams):
    axis, bshape = _channel_shape(x)
    if params.slopes.shape != (x.shape[axis],):
        raise ShapeError(f"{params.slopes.shape[0]} slopes for {x.shape[axis]} channels")
    slopes = params.slopes.reshape(bshape)
    out = np.where(x >= 0, x, slopes * x).astype(x.dtype, copy=False)
    return out, {"kind": "prelu", "x": x, "params": params}


def prelu(x: np.ndarray, params: PreluParams) -> np.ndarray:
    return prelu_forward(x, params)[0]


def _prelu_backward(cache, dout):
    x = cache["x"]
    axis, bshape = _channel_shape(x)
    neg = x < 0
    dx = np.where(neg, cache["params"].slopes.reshape(bshape) * dout, dout)
    reduce_axes = tuple(a for a in range(x.ndim) if a != axis)
    dslopes = np.where(neg, dout * x, 0).sum(axis=reduce_axes)
    return dx, {"slopes": dslopes}


# --------------------------------------------------------------------------
# local response normalization (across channels)


def _channel_window_sum(a: np.ndarray, n: int) -> np.ndarray:
    half = n // 2
    c = a.shape[1]
    padded = np.pad(a, ((0, 0), (half, half), (0, 0), (0, 0)))
    total = np.zeros_like(a)
    for d in range(n):
        total += padded[:, d : d + c]
    return total


def lrn_forward(x: np.ndarray, params: LrnParams):
    xb, squeeze = _maps(x)
    scale = params.k + (params.alpha / params.n) * _channel_window_sum(xb * xb, params.n)
    out = xb * scale ** (-params.beta)
    cache = {"kind": "lrn", "x": xb, "scale": scale, "params": params, "squeeze": squeeze}
    return (out[0] if squeeze else out), cache


def lrn(x: np.ndarray, params: LrnParams) -> np.ndarray:
    return lrn_forward(x, params)[0]


def _lrn_backward(cache, dout):
    p = cache["params"]
    x, scale = cache["x"], cache["scale"]
    dout = dout[None] if cache["squeeze"] else dout
    inner = dout * x * scale ** (-p.beta - 1)
    dx = dout * scale ** (-p.beta) - (2 * p.alpha * p.beta / p.n) * x * _channel_window_sum(inner, p.n)
    return (dx[0] if cache["squeeze"] else dx), {}


# --------------------------------------------------------------------------
# affine


def affine_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    if x.ndim not in (1, 2):
        raise ShapeError(f"affine input must be (N,) or (B, N), got {x.shape}")
    m, nin = weights.shape
    if x.shape[-1] != nin:
        raise ShapeError(f"affine input length {x.shape[-1]} != weight columns {nin}")
    if bias.shape != (m,):
        raise ShapeError(f"affine bias shape {bias.shape} != ({m},)")
    out = (x @ weights.T + bias).astype(x.dtype, copy=False)
    return _finite(out, "affine"), {"kind": "affine", "x": x, "weights": weights}


def affine(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return affine_forward(x, weights, bias)[0]


def _affine_backward(cache, dout):
    x, wts = cache["x"], cache["weights"]
    dx = dout @ wts
    if x.ndim == 1:
        dw, db = np.outer(dout, x), dout.copy()
    else:
        dw, db = dout.T @ x, dout.sum(axis=0)
    return dx, {"weights": dw, "bias": db}


# --------------------------------------------------------------------------
# dropout


def dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator | None, mode: str = "infer"):
    if not 0 <= rate < 1:
        raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ArgumentError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0:
        return x, {"kind": "dropout", "mask": None}
    if rng is None:
        raise ArgumentError("train-mode dropout needs a seeded generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, {"kind": "dropout", "mask": mask}


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None = None, mode: str = "infer") -> np.ndarray:
    return dropout_forward(x, rate, rng, mode)[0]


def _dropout_backward(cache, dout):
    mask = cache["mask"]
    return (dout if mask is None else dout * mask), {}


# --------------------------------------------------------------------------
# loss


def softmax_xent(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of one logit vector against an integer class label."""
    k = logits.shape[-1]
    if logits.ndim != 1:
        raise ShapeError(f"expected flat logits, got {logits.shape}")
    if not 0 <= label < k:
        raise ArgumentError(f"label {label} outside [0, {k})")
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    loss = float(log_z - shifted[label])
    grad = np.exp(shifted - log_z)
    grad[label] -= 1
    return loss, grad


def softmax_xent_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch; gradient is already divided by the batch size."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= k):
        raise ArgumentError(f"labels outside [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, labels] -= 1
    return loss, grad / n


# --------------------------------------------------------------------------

_BACKWARD = {
    "conv": _conv_backward,
    "pool": _pool_backward,
    "prelu": _prelu_backward,
    "lrn": _lrn_backward,
    "affine": _affine_backward,
    "dropout": _dropout_backward,
}


def backward(layer_kind: str, cache: dict | None, upstream: np.ndarray):
    """Analytic gradients for one layer: ``(input_grad, {param_name: grad})``."""
    if cache is None:
        raise StateError(f"no cached forward state for {layer_kind!r}; run forward with caching")
    if cache.get("kind") != layer_kind:
        raise StateError(f"cache holds {cache.get('kind')!r} state, not {layer_kind!r}")
    try:
        fn = _BACKWARD[layer_kind]
    except KeyError:
        raise ArgumentError(f"unknown layer kind {layer_kind!r}") from None
    return fn(cache, upstream)
