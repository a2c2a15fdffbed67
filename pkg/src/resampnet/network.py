"""Dual-stream residual CNN for resampling detection.

Topology (default 256x256 input, widths for ``width_divisor=1``)::

    image -> fixed high-pass noise layer -> horizontal residual / vertical residual
    H1..H4, V1..V4: conv(5x5|3x3|5x5|3x3, 64) + BN + act + maxpool 3/2
    I1: 1x1 conv over concat(H1, V1) + BN + act           (127x127x64)
    I2..I4: conv(5x5|5x5|3x3, 64) + BN + act + maxpool    (-> 15x15x64)
    H5, V5: conv 3x3x128 over concat(H4|V4, I4) + BN + act + GAP
    head: dense(concat(GAP(H5), GAP(V5)) -> logits)

Ablations switch the noise filters (low/high/none), the active streams and
the activation function.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import layers as L
from .errors import ConfigError, ContractError

STREAMS = ("dual-interleaved", "dual-no-interleave", "horizontal-only", "vertical-only")
ACTIVATIONS = ("tanh", "relu")
NOISE_ORDERS = ("low", "high", "none")

# (kernel size, width multiplier of the base width 64)
STREAM_CONVS = [(5, 1), (3, 1), (5, 1), (3, 1), (3, 2)]
INTERLEAVED_CONVS = [(1, 1), (5, 1), (5, 1), (3, 1)]

LOW_ORDER = np.array([1.0, -2.0, 1.0])
HIGH_ORDER = np.array([1.0, -4.0, 6.0, -4.0, 1.0])

MIN_INPUT_SIZE = 31  # smallest size surviving four 3x3/2 max pools


@dataclass(frozen=True)
class NoiseFilterBank:
    horizontal: np.ndarray  # (1, k)
    vertical: np.ndarray  # (k, 1)
    order: str

    def __post_init__(self):
        if not np.array_equal(self.vertical, self.horizontal.T):
            raise ConfigError("vertical noise kernel must be the transpose of the horizontal one")
        if self.horizontal.sum() != 0:
            raise ConfigError("noise kernels must sum to zero")

    @classmethod
    def of(cls, order: str) -> "NoiseFilterBank":
        taps = {"low": LOW_ORDER, "high": HIGH_ORDER}.get(order)
        if taps is None:
            raise ConfigError(f"no filter bank for noise order {order!r}")
        row = taps.reshape(1, -1)
        return cls(row, row.T.copy(), order)

    def conv_params(self, dtype=np.float32) -> Tuple[L.ConvParams, L.ConvParams]:
        k = self.horizontal.shape[1]
        half = (k - 1) // 2
        h = L.ConvParams(
            self.horizontal.reshape(1, 1, k, 1).astype(dtype), np.zeros(1, dtype),
            padding=(0, 0, half, half), trainable=False,
        )
        v = L.ConvParams(
            self.vertical.reshape(1, k, 1, 1).astype(dtype), np.zeros(1, dtype),
            padding=(half, half, 0, 0), trainable=False,
        )
        return h, v


def noise_extract(image: np.ndarray, bank: NoiseFilterBank) -> Tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical high-pass residuals, same spatial size as ``image``."""
    _, _, _, c = L.check_nhwc(image, "image")
    if c != 1:
        raise ContractError(f"noise extraction needs a single-channel image, got {c} channels")
    hp, vp = bank.conv_params(image.dtype)
    return L.conv2d_forward(image, hp), L.conv2d_forward(image, vp)


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 256
    num_classes: int = 2
    streams: str = "dual-interleaved"
    activation: str = "tanh"
    noise_layer: str = "low"
    width_divisor: int = 1

    def __post_init__(self):
        if self.streams not in STREAMS:
            raise ConfigError(f"streams must be one of {STREAMS}, got {self.streams!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.noise_layer not in NOISE_ORDERS:
            raise ConfigError(f"noise_layer must be one of {NOISE_ORDERS}, got {self.noise_layer!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size < MIN_INPUT_SIZE:
            raise ConfigError(f"input_size must be >= {MIN_INPUT_SIZE}, got {self.input_size}")
        if self.width_divisor < 1 or 64 % self.width_divisor:
            raise ConfigError(f"width_divisor must divide 64, got {self.width_divisor}")

    @property
    def horizontal(self) -> bool:
        return self.streams != "vertical-only"

    @property
    def vertical(self) -> bool:
        return self.streams != "horizontal-only"

    @property
    def interleaved(self) -> bool:
        return self.streams == "dual-interleaved"

    @property
    def sigmoid_head(self) -> bool:
        return self.num_classes == 2

    @property
    def base_width(self) -> int:
        return 64 // self.width_divisor

    @property
    def feature_dim(self) -> int:
        return 2 * self.base_width * (int(self.horizontal) + int(self.vertical))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        interleave = d.pop("interleave", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        if interleave is not None:
            streams = d.get("streams", "dual-interleaved")
            single = streams in ("horizontal-only", "vertical-only")
            if interleave and single:
                raise ConfigError(f"the interleaved stream needs both streams, got streams={streams!r}")
            if not single:
                d["streams"] = "dual-interleaved" if interleave else "dual-no-interleave"
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class ConvBlock:
    """conv -> batch norm -> activation -> optional pooling ('max' or 'gap')."""

    def __init__(self, name: str, conv: L.ConvParams, bn: L.BatchNormParams, activation: str, pool: Optional[str]):
        self.name = name
        self.conv = conv
        self.bn = bn
        self.activation = activation
        self.pool = pool
        self._cache = None

    def forward(self, x: np.ndarray, training: bool, trace: Optional[dict] = None) -> np.ndarray:
        cols = L.im2col(x, self.conv)
        z = L.conv2d_forward(x, self.conv, cols)
        if trace is not None:
            trace[self.name] = z.shape[1:]
        b = L.batchnorm_forward(z, self.bn, training)
        a = L.tanh_forward(b) if self.activation == "tanh" else L.relu_forward(b)
        if self.pool == "max":
            out = L.maxpool_forward(a)
            pooled = out
        elif self.pool == "gap":
            out = L.global_average_pool(a)
        else:
            out = a
        if self.pool != "max":
            pooled = None
        self._cache = (x, cols, z, a, pooled) if training else None
        return out

    def selection_pattern(self) -> bytes:
        """Max-pool winners and ReLU signs of the last training forward.

        Two forwards with equal patterns lie on the same smooth piece of the
        network function.
        """
        _, _, _, a, pooled = self._cache
        parts = []
        if self.activation == "relu":
            parts.append(np.packbits(a > 0).tobytes())
        if pooled is not None:
            parts.append(L.maxpool_argmax(a).tobytes())
        return b"".join(parts)

    def backward(self, dout: np.ndarray, need_input_grad: bool = True) -> Optional[np.ndarray]:
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward without a training-mode forward")
        x, cols, z, a, pooled = self._cache
        if self.pool == "max":
            da = L.maxpool_backward(a, dout, out=pooled)
        elif self.pool == "gap":
            da = L.global_average_pool_backward(a.shape, dout)
        else:
            da = dout
        db = L.tanh_backward(a, da) if self.activation == "tanh" else L.relu_backward(a, da)
        dz, self.bn.gamma_grad, self.bn.beta_grad = L.batchnorm_backward(z, self.bn, db)
        dx, self.conv.kernels_grad, self.conv.bias_grad = L.conv2d_backward(
            x, self.conv, dz, cols, need_input_grad=need_input_grad
        )
        self._cache = None
        return dx


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _conv_block(rng, name, k, cin, cout, activation, pool, dtype) -> ConvBlock:
    kernels = xavier_uniform(rng, (cout, k, k, cin), k * k * cin, k * k * cout, dtype)
    conv = L.ConvParams.same(kernels, np.zeros(cout, dtype))
    return ConvBlock(name, conv, L.BatchNormParams.init(cout, dtype), activation, pool)


class NetworkGraph:
    """Parameters and the fixed forward/backward schedule of one network."""

    def __init__(self, config: NetworkConfig, blocks: Dict[str, ConvBlock], head: L.DenseParams,
                 noise: Optional[Tuple[L.ConvParams, L.ConvParams]]):
        self.config = config
        self.blocks = blocks
        self.head = head
        self.noise = noise
        self._cache = None

    # -- parameter registry -------------------------------------------------

    def named_arrays(self) -> Iterator[Tuple[str, object, str]]:
        """Yield ``(name, owner, attribute)`` for every stored array in a stable order."""
        if self.noise is not None:
            yield "noise.h.kernels", self.noise[0], "kernels"
            yield "noise.v.kernels", self.noise[1], "kernels"
        for bname, block in self.blocks.items():
            yield f"{bname}.conv.kernels", block.conv, "kernels"
            yield f"{bname}.conv.bias", block.conv, "bias"
            yield f"{bname}.bn.gamma", block.bn, "gamma"
            yield f"{bname}.bn.beta", block.bn, "beta"
            yield f"{bname}.bn.running_mean", block.bn, "running_mean"
            yield f"{bname}.bn.running_var", block.bn, "running_var"
        yield "head.weights", self.head, "weights"
        yield "head.bias", self.head, "bias"

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(owner, attr) for name, owner, attr in self.named_arrays()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, owner, attr in self.named_arrays():
            cur = getattr(owner, attr)
            new = state[name]
            if new.shape != cur.shape:
                raise ContractError(f"{name}: shape {new.shape} does not match {cur.shape}")
            setattr(owner, attr, np.array(new, dtype=cur.dtype))

    def trainable(self) -> Iterator[Tuple[str, object, str, bool]]:
        """Yield ``(name, owner, attribute, decays)`` for learned parameters.

        ``decays`` marks conv/dense weights, the only ones under weight decay.
        """
        for bname, block in self.blocks.items():
            yield f"{bname}.conv.kernels", block.conv, "kernels", True
            yield f"{bname}.conv.bias", block.conv, "bias", False
            yield f"{bname}.bn.gamma", block.bn, "gamma", False
            yield f"{bname}.bn.beta", block.bn, "beta", False
        yield "head.weights", self.head, "weights", True
        yield "head.bias", self.head, "bias", False

    def parameter_count(self) -> int:
        return sum(getattr(o, a).size for _, o, a, _ in self.trainable())

    def astype(self, dtype) -> "NetworkGraph":
        """Cast every stored array in place; returns self."""
        for _, owner, attr in self.named_arrays():
            setattr(owner, attr, getattr(owner, attr).astype(dtype))
        return self

    @property
    def dtype(self):
        return self.head.weights.dtype

    # -- forward / backward ------------------------------------------------

    def features(self, x: np.ndarray, training: bool = False, trace: Optional[dict] = None) -> np.ndarray:
        """Penultimate feature vector: concatenated GAP outputs of the active streams."""
        cfg = self.config
        n, h, w, c = L.check_nhwc(x, "batch")
        if (h, w, c) != (cfg.input_size, cfg.input_size, 1):
            raise ContractError(
                f"batch has spatial/channel dims {(h, w, c)}, network expects {(cfg.input_size, cfg.input_size, 1)}"
            )
        x = x.astype(self.dtype, copy=False)
        if self.noise is not None:
            hin = L.conv2d_forward(x, self.noise[0]) if cfg.horizontal else None
            vin = L.conv2d_forward(x, self.noise[1]) if cfg.vertical else None
        else:
            hin = vin = x
        if trace is not None:
            trace["noise"] = x.shape[1:]
        streams = [s for s, on in (("h", cfg.horizontal), ("v", cfg.vertical)) if on]
        cur = {"h": hin, "v": vin}
        b = self.blocks
        for s in streams:
            cur[s] = b[f"{s}1"].forward(cur[s], training, trace)
        inter = None
        if cfg.interleaved:
            inter = L.concat_channels(cur["h"], cur["v"])
            for i in range(1, 5):
                inter = b[f"i{i}"].forward(inter, training, trace)
        for s in streams:
            for g in range(2, 5):
                cur[s] = b[f"{s}{g}"].forward(cur[s], training, trace)
            g5_in = L.concat_channels(cur[s], inter) if inter is not None else cur[s]
            cur[s] = b[f"{s}5"].forward(g5_in, training, trace)
        feats = [cur[s].reshape(n, -1) for s in streams]
        f = np.concatenate(feats, axis=1) if len(feats) > 1 else feats[0]
        if trace is not None:
            trace["features"] = f.shape[1:]
        return f

    def forward(self, x: np.ndarray, training: bool = False, trace: Optional[dict] = None) -> np.ndarray:
        """Logits of shape (batch, 1) for the sigmoid head or (batch, K) for softmax."""
        f = self.features(x, training, trace)
        logits = L.dense_forward(f, self.head)
        self._cache = f if training else None
        return logits

    def selection_pattern(self) -> bytes:
        return b"|".join(b.selection_pattern() for b in self.blocks.values())

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode class probabilities, shape (batch, num_classes)."""
        z = self.forward(x, training=False)
        if self.config.sigmoid_head:
            p = L.sigmoid(z[:, 0])
            return np.stack([1 - p, p], axis=1)
        return L.softmax(z, axis=1)

    def backward(self, dlogits: np.ndarray) -> None:
        """Fill every trainable ``*_grad`` attribute from the logits gradient."""
        if self._cache is None:
            raise RuntimeError("backward without a training-mode forward")
        cfg = self.config
        f = self._cache
        df, self.head.weights_grad, self.head.bias_grad = L.dense_backward(f, self.head, dlogits)
        n = f.shape[0]
        streams = [s for s, on in (("h", cfg.horizontal), ("v", cfg.vertical)) if on]
        width5 = 2 * cfg.base_width
        b = self.blocks
        dinter = None
        d1 = {}
        for k, s in enumerate(streams):
            d = df[:, k * width5:(k + 1) * width5].reshape(n, 1, 1, width5)
            d = b[f"{s}5"].backward(d)
            if cfg.interleaved:
                d, di = L.split_channels(d, cfg.base_width)
                dinter = di if dinter is None else dinter + di
            for g in range(4, 1, -1):
                d = b[f"{s}{g}"].backward(d)
            d1[s] = d
        if cfg.interleaved:
            for i in range(4, 0, -1):
                dinter = b[f"i{i}"].backward(dinter)
            dh, dv = L.split_channels(dinter, cfg.base_width)
            d1["h"] = d1["h"] + dh
            d1["v"] = d1["v"] + dv
        for s in streams:
            # input of group 1 is the fixed noise residual: no gradient needed
            b[f"{s}1"].backward(d1[s], need_input_grad=False)
        self._cache = None


def build_network(config: NetworkConfig = NetworkConfig(), seed: int = 0, dtype=np.float32) -> NetworkGraph:
    """Construct the network with Xavier-uniform weights drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    w = config.base_width
    act = config.activation
    blocks: Dict[str, ConvBlock] = {}
    for s, on in (("h", config.horizontal), ("v", config.vertical)):
        if not on:
            continue
        cin = 1
        for g, (k, mult) in enumerate(STREAM_CONVS, start=1):
            if g == 5 and config.interleaved:
                cin += w
            pool = "gap" if g == 5 else "max"
            blocks[f"{s}{g}"] = _conv_block(rng, f"{s}{g}", k, cin, w * mult, act, pool, dtype)
            cin = w * mult
    if config.interleaved:
        cin = 2 * w
        for i, (k, mult) in enumerate(INTERLEAVED_CONVS, start=1):
            pool = None if i == 1 else "max"
            blocks[f"i{i}"] = _conv_block(rng, f"i{i}", k, cin, w * mult, act, pool, dtype)
            cin = w * mult
    fdim = config.feature_dim
    k = 1 if config.sigmoid_head else config.num_classes
    head = L.DenseParams(xavier_uniform(rng, (fdim, k), fdim, k, dtype), np.zeros(k, dtype))
    noise = None
    if config.noise_layer != "none":
        noise = NoiseFilterBank.of(config.noise_layer).conv_params(dtype)
    return NetworkGraph(config, blocks, head, noise)


def layer_shapes(config: NetworkConfig) -> Dict[str, Tuple[int, int, int]]:
    """Conv output dims of every block, traced through one inference pass."""
    net = build_network(config, seed=0)
    trace: dict = {}
    net.features(np.zeros((1, config.input_size, config.input_size, 1), np.float32), trace=trace)
    return trace
