"""Differentiable layer primitives on NHWC arrays.

Every activation tensor is a plain ``numpy.ndarray`` of shape
``(batch, height, width, channels)``.  Forward functions are pure; backward
functions take the forward inputs (or outputs, where cheaper) together with
the upstream gradient and return gradients for every argument.  The compute
dtype follows the input: float32 for training, float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateBatchError

Padding = Tuple[int, int, int, int]  # top, bottom, left, right


def check_nhwc(x: np.ndarray, name: str = "input") -> Tuple[int, int, int, int]:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        shape = getattr(x, "shape", None)
        raise ContractError(f"{name} must be a 4-D (batch, height, width, channels) array, got shape {shape}")
    return x.shape


def same_padding(kh: int, kw: int) -> Padding:
    """Stride-1 padding that preserves spatial size; odd remainder goes bottom/right."""
    pv, ph = kh - 1, kw - 1
    return (pv // 2, pv - pv // 2, ph // 2, ph - ph // 2)


@dataclass
class ConvParams:
    kernels: np.ndarray  # (out_channels, kh, kw, in_channels)
    bias: np.ndarray
    stride: int = 1
    padding: Padding = (0, 0, 0, 0)
    trainable: bool = True
    kernels_grad: Optional[np.ndarray] = field(default=None, repr=False)
    bias_grad: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kernels.ndim != 4:
            raise ContractError(f"kernels must be (out, kh, kw, in), got shape {self.kernels.shape}")
        out, kh, kw, _ = self.kernels.shape
        if kh < 1 or kw < 1:
            raise ContractError(f"kernel extent must be >= 1, got {kh}x{kw}")
        if self.bias.shape != (out,):
            raise ContractError(f"bias length {self.bias.shape} does not match out_channels={out}")
        if self.stride < 1:
            raise ContractError(f"stride must be positive, got {self.stride}")
        if len(self.padding) != 4 or min(self.padding) < 0:
            raise ContractError(f"padding must be 4 non-negative ints, got {self.padding}")
        self.padding = tuple(int(p) for p in self.padding)

    @classmethod
    def same(cls, kernels: np.ndarray, bias: np.ndarray, trainable: bool = True) -> "ConvParams":
        _, kh, kw, _ = kernels.shape
        return cls(kernels, bias, 1, same_padding(kh, kw), trainable)

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[3]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.99
    gamma_grad: Optional[np.ndarray] = field(default=None, repr=False)
    beta_grad: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ContractError(f"{name} has shape {getattr(self, name).shape}, expected {c}")
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.momentum < 1:
            raise ContractError(f"momentum must lie in (0, 1), got {self.momentum}")
        if np.any(self.running_var < 0):
            raise ContractError("running_var must be non-negative")

    @classmethod
    def init(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormParams":
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype), **kw,
        )


@dataclass
class DenseParams:
    weights: np.ndarray  # (in_features, out_features)
    bias: np.ndarray
    weights_grad: Optional[np.ndarray] = field(default=None, repr=False)
    bias_grad: Optional[np.ndarray] = field(default=None, repr=False)


# ---------------------------------------------------------------- convolution

def _conv_geometry(x: np.ndarray, p: ConvParams):
    n, h, w, c = check_nhwc(x)
    out, kh, kw, cin = p.kernels.shape
    if c != cin:
        raise ContractError(f"input has {c} channels but kernels expect {cin}")
    top, bottom, left, right = p.padding
    hp, wp = h + top + bottom, w + left + right
    if hp < kh or wp < kw:
        raise ContractError(f"padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    oh = (hp - kh) // p.stride + 1
    ow = (wp - kw) // p.stride + 1
    return n, h, w, c, out, kh, kw, oh, ow


def _pad(x: np.ndarray, padding: Padding) -> np.ndarray:
    top, bottom, left, right = padding
    if not any(padding):
        return x
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))


def im2col(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Patch matrix of shape (batch*oh*ow, kh*kw*in_channels), (kh, kw, c) ordered."""
    n, _, _, c, _, kh, kw, oh, ow = _conv_geometry(x, p)
    win = sliding_window_view(_pad(x, p.padding), (kh, kw), axis=(1, 2))
    s = p.stride
    win = win[:, :s * (oh - 1) + 1:s, :s * (ow - 1) + 1:s]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, kh * kw * c)


def conv2d_forward(x: np.ndarray, p: ConvParams, cols: Optional[np.ndarray] = None) -> np.ndarray:
    """Multi-channel cross-correlation plus bias."""
    n, _, _, _, out, _, _, oh, ow = _conv_geometry(x, p)
    if cols is None:
        cols = im2col(x, p)
    y = cols @ p.kernels.reshape(out, -1).T
    y += p.bias
    return y.reshape(n, oh, ow, out)


def conv2d_backward(
    x: np.ndarray,
    p: ConvParams,
    dout: np.ndarray,
    cols: Optional[np.ndarray] = None,
    need_input_grad: bool = True,
):
    """Return ``(dx, dkernels, dbias)``.

    ``dkernels``/``dbias`` are None for non-trainable params, ``dx`` is None
    when ``need_input_grad`` is false.
    """
    n, h, w, c, out, kh, kw, oh, ow = _conv_geometry(x, p)
    if dout.shape != (n, oh, ow, out):
        raise ContractError(f"upstream gradient shape {dout.shape} != conv output shape {(n, oh, ow, out)}")
    g = dout.reshape(-1, out)
    dk = db = None
    if p.trainable:
        if cols is None:
            cols = im2col(x, p)
        dk = (g.T @ cols).reshape(p.kernels.shape)
        db = g.sum(axis=0)
    dx = None
    if need_input_grad:
        top, bottom, left, right = p.padding
        back_pad = (kh - 1 - top, kh - 1 - bottom, kw - 1 - left, kw - 1 - right)
        if p.stride == 1 and min(back_pad) >= 0:
            # correlation of the re-padded upstream gradient with the flipped,
            # in/out-swapped kernels
            flipped = np.ascontiguousarray(p.kernels[:, ::-1, ::-1, :].transpose(3, 1, 2, 0))
            back = ConvParams(flipped, np.zeros(c, dout.dtype), 1, back_pad)
            dx = (im2col(dout, back) @ flipped.reshape(c, -1).T).reshape(n, h, w, c)
        else:
            s = p.stride
            dcols = (g @ p.kernels.reshape(out, -1)).reshape(n, oh, ow, kh, kw, c)
            dxp = np.zeros((n, h + top + bottom, w + left + right, c), dtype=dcols.dtype)
            for dy in range(kh):
                for dx_ in range(kw):
                    dxp[:, dy:dy + s * (oh - 1) + 1:s, dx_:dx_ + s * (ow - 1) + 1:s, :] += dcols[:, :, :, dy, dx_, :]
            dx = dxp[:, top:top + h, left:left + w, :]
    return dx, dk, db


# ---------------------------------------------------------- batch normalization

def _bn_stats(x: np.ndarray):
    mu = x.mean(axis=(0, 1, 2))
    var = ((x - mu) ** 2).mean(axis=(0, 1, 2))
    return mu, var


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, training: bool) -> np.ndarray:
    """Per-channel normalization over batch and spatial positions.

    Training mode uses (and folds into the running averages) the batch
    statistics; inference mode uses the running averages.
    """
    n, _, _, c = check_nhwc(x)
    if c != p.gamma.shape[0]:
        raise ContractError(f"input has {c} channels, batch norm has {p.gamma.shape[0]}")
    if training:
        if n < 2:
            raise DegenerateBatchError(f"batch norm in training mode needs batch >= 2, got {n}")
        mu, var = _bn_stats(x)
        m = p.momentum
        p.running_mean = (m * p.running_mean + (1 - m) * mu).astype(p.running_mean.dtype)
        p.running_var = (m * p.running_var + (1 - m) * var).astype(p.running_var.dtype)
    else:
        mu, var = p.running_mean, p.running_var
    inv = 1.0 / np.sqrt(var + p.epsilon)
    scale = (p.gamma * inv).astype(x.dtype)
    shift = (p.beta - mu * p.gamma * inv).astype(x.dtype)
    return x * scale + shift


def batchnorm_backward(x: np.ndarray, p: BatchNormParams, dout: np.ndarray):
    """Training-mode gradients ``(dx, dgamma, dbeta)``."""
    n, h, w, c = check_nhwc(x)
    if dout.shape != x.shape:
        raise ContractError(f"upstream gradient shape {dout.shape} != input shape {x.shape}")
    if n < 2:
        raise DegenerateBatchError(f"batch norm in training mode needs batch >= 2, got {n}")
    m = n * h * w
    mu, var = _bn_stats(x)
    inv = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x - mu) * inv
    dbeta = dout.sum(axis=(0, 1, 2))
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dx = (p.gamma * inv / m) * (m * dout - dbeta - xhat * dgamma)
    return dx.astype(x.dtype, copy=False), dgamma, dbeta


# ------------------------------------------------------------------ activations

def tanh_forward(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """``y`` is the forward *output*."""
    return dout * (1 - y * y)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(y: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * (y > 0)


# ---------------------------------------------------------------------- pooling

def pool_output_size(size: int, window: int = 3, stride: int = 2) -> int:
    return (size - window) // stride + 1


def _pool_slices(x: np.ndarray, window: int, stride: int):
    n, h, w, c = check_nhwc(x)
    if h < window or w < window:
        raise ContractError(f"spatial dims {h}x{w} smaller than pooling window {window}")
    oh, ow = pool_output_size(h, window, stride), pool_output_size(w, window, stride)
    return [
        (slice(None), slice(dy, dy + stride * (oh - 1) + 1, stride), slice(dx, dx + stride * (ow - 1) + 1, stride))
        for dy in range(window)
        for dx in range(window)
    ]


def maxpool_forward(x: np.ndarray, window: int = 3, stride: int = 2) -> np.ndarray:
    sl = _pool_slices(x, window, stride)
    out = x[sl[0]].copy()
    for s in sl[1:]:
        np.maximum(out, x[s], out=out)
    return out


def maxpool_argmax(x: np.ndarray, window: int = 3, stride: int = 2) -> np.ndarray:
    """Row-major index within its window of the first maximal element."""
    sl = _pool_slices(x, window, stride)
    best = x[sl[0]].copy()
    idx = np.zeros(best.shape, dtype=np.int8)
    for k, s in enumerate(sl[1:], start=1):
        greater = x[s] > best
        best[greater] = x[s][greater]
        idx[greater] = k
    return idx


def maxpool_backward(
    x: np.ndarray, dout: np.ndarray, window: int = 3, stride: int = 2, out: Optional[np.ndarray] = None
) -> np.ndarray:
    """Route each upstream value to the first maximal element (row-major) of its window."""
    sl = _pool_slices(x, window, stride)
    if out is None:
        out = maxpool_forward(x, window, stride)
    if dout.shape != out.shape:
        raise ContractError(f"upstream gradient shape {dout.shape} != pool output shape {out.shape}")
    dx = np.zeros(x.shape, dtype=dout.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    for s in sl:
        hit = x[s] == out
        hit &= ~taken
        taken |= hit
        dx[s] += np.where(hit, dout, 0)
    return dx


def global_average_pool(x: np.ndarray) -> np.ndarray:
    check_nhwc(x)
    return x.mean(axis=(1, 2), keepdims=True)


def global_average_pool_backward(x_shape, dout: np.ndarray) -> np.ndarray:
    n, h, w, c = x_shape
    return np.broadcast_to(dout / (h * w), (n, h, w, c)).copy()


# ----------------------------------------------------------------- dense / head

def dense_forward(x: np.ndarray, p: DenseParams) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.weights.shape[0]:
        raise ContractError(f"dense input shape {x.shape} incompatible with weights {p.weights.shape}")
    return x @ p.weights + p.bias


def dense_backward(x: np.ndarray, p: DenseParams, dout: np.ndarray):
    return dout @ p.weights.T, x.T @ dout, dout.sum(axis=0)


def sigmoid(z):
    z = np.asarray(z)
    # exp of a non-positive argument only, so neither branch overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


def softmax(z, axis: int = -1):
    z = np.asarray(z)
    if z.shape[axis] < 2:
        raise ContractError(f"softmax needs at least 2 entries along axis {axis}, got {z.shape[axis]}")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------- concatenation

def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sa, sb = check_nhwc(a, "a"), check_nhwc(b, "b")
    if sa[:3] != sb[:3]:
        raise ContractError(f"cannot concatenate channels of {sa} and {sb}: batch/spatial dims differ")
    return np.concatenate([a, b], axis=3)


def split_channels(x: np.ndarray, first: int):
    """Inverse of :func:`concat_channels`; also its backward pass."""
    return x[..., :first], x[..., first:]
