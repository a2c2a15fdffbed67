"""SGD training with plateau learning-rate decay, evaluation and patch heatmaps."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import imageops as ops
from .checkpoint import save_checkpoint
from .dataset import DatasetManifest, make_splicing_patches
from .errors import ConfigError, ContractError, DivergenceError
from .imageops import ImageBuffer
from .losses import loss_and_grad
from .network import NetworkGraph

log = logging.getLogger(__name__)

_CFG_KEYS = {
    "batchSize": "batch_size",
    "momentum": "momentum",
    "weightDecay": "weight_decay",
    "initialLR": "initial_lr",
    "plateauPatience": "plateau_patience",
    "lrDivisor": "lr_divisor",
    "maxEpochs": "max_epochs",
    "seed": "seed",
    "bnRecalibrationBatches": "bn_recalibration_batches",
    "stopAtTrainAccuracy": "stop_at_train_accuracy",
}


@dataclass
class TrainConfig:
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-5
    initial_lr: float = 0.01
    plateau_patience: int = 3
    lr_divisor: float = 10.0
    max_epochs: int = 30
    seed: int = 0
    # batches of training data used to re-estimate batch-norm population
    # statistics after each epoch; 0 keeps the plain running averages
    bn_recalibration_batches: int = 8
    # stop early once inference-mode train accuracy reaches this value
    stop_at_train_accuracy: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batchSize must be >= 2 (batch norm), got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.initial_lr < 0:
            raise ConfigError("weightDecay and initialLR must be non-negative")
        if self.plateau_patience < 1 or self.lr_divisor <= 1 or self.max_epochs < 1:
            raise ConfigError("plateauPatience and maxEpochs must be >= 1, lrDivisor > 1")
        if self.bn_recalibration_batches < 0:
            raise ConfigError("bnRecalibrationBatches must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: d[v] for k, v in _CFG_KEYS.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(_CFG_KEYS)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**{_CFG_KEYS[k]: v for k, v in d.items()})


class PlateauSchedule:
    """Divide the learning rate once the validation loss has not reached a new
    strict minimum for ``patience`` consecutive epochs."""

    def __init__(self, lr: float, patience: int = 3, divisor: float = 10.0):
        self.lr = lr
        self.patience = patience
        self.divisor = divisor
        self.best = float("inf")
        self.stale = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; return True if it is a new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return True
        self.stale += 1
        if self.stale >= self.patience:
            self.lr /= self.divisor
            self.stale = 0
        return False


@dataclass
class TrainState:
    buffers: Dict[str, np.ndarray]
    lr: float
    best_val_loss: float = float("inf")
    epochs_since_improvement: int = 0
    epoch: int = 0
    step: int = 0
    history: List[dict] = field(default_factory=list)


def sgd_step(net: NetworkGraph, buffers: Dict[str, np.ndarray], lr: float, momentum: float, weight_decay: float):
    """buffer <- momentum*buffer + grad + wd*param ; param <- param - lr*buffer."""
    for name, owner, attr, decays in net.trainable():
        p = getattr(owner, attr)
        g = getattr(owner, f"{attr}_grad")
        buf = buffers[name]
        buf *= momentum
        buf += g
        if decays and weight_decay:
            buf += weight_decay * p
        p -= np.asarray(lr, p.dtype) * buf


def recalibrate_batchnorm(net: NetworkGraph, x: np.ndarray, batch_size: int) -> None:
    """Replace running statistics by the average of per-batch statistics over ``x``."""
    blocks = list(net.blocks.values())
    saved = [b.bn.momentum for b in blocks]
    try:
        for k, start in enumerate(range(0, len(x) - batch_size + 1, batch_size)):
            for b in blocks:
                b.bn.momentum = k / (k + 1)  # cumulative mean
            net.features(x[start:start + batch_size], training=True)
    finally:
        for b, m in zip(blocks, saved):
            b.bn.momentum = m
        for b in blocks:
            b._cache = None


def _batched_logits(net: NetworkGraph, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return np.concatenate([net.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def predict(net: NetworkGraph, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode class probabilities, shape (n, num_classes)."""
    return np.concatenate([net.probabilities(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def _loss_and_accuracy(net: NetworkGraph, x: np.ndarray, y: np.ndarray):
    logits = _batched_logits(net, x)
    loss, _ = loss_and_grad(logits, y, net.config.num_classes)
    if net.config.sigmoid_head:
        pred = (logits[:, 0] > 0).astype(int)
    else:
        pred = logits.argmax(axis=1)
    return loss, float(np.mean(pred == y))


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "lr")


def fit(
    net: NetworkGraph,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    out_dir=None,
) -> TrainState:
    """Train ``net`` in place on NHWC arrays in [0, 1].

    With ``out_dir`` set, writes ``history.csv`` (one row per epoch),
    ``best.dsrn`` on each validation improvement and ``final.dsrn`` at the end.
    """
    if len(x_train) < cfg.batch_size:
        raise ContractError(f"{len(x_train)} training samples, fewer than one batch of {cfg.batch_size}")
    if len(x_val) == 0:
        raise ContractError("validation split is empty")
    size = net.config.input_size
    for x in (x_train, x_val):
        if x.shape[1:] != (size, size, 1):
            raise ContractError(f"samples of shape {x.shape[1:]} do not fit a {size}x{size} network")
    y_train, y_val = np.asarray(y_train), np.asarray(y_val)
    x_train = x_train.astype(net.dtype, copy=False)
    x_val = x_val.astype(net.dtype, copy=False)

    state = TrainState({n: np.zeros_like(getattr(o, a)) for n, o, a, _ in net.trainable()}, cfg.initial_lr)
    schedule = PlateauSchedule(cfg.initial_lr, cfg.plateau_patience, cfg.lr_divisor)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "history.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(HISTORY_FIELDS)
    n_batches = len(x_train) // cfg.batch_size
    for epoch in range(1, cfg.max_epochs + 1):
        state.epoch = epoch
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(x_train))
        losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            logits = net.forward(x_train[idx], training=True)
            loss, dlogits = loss_and_grad(logits, y_train[idx], net.config.num_classes)
            state.step += 1
            if not np.isfinite(loss):
                raise DivergenceError(state.step, loss)
            net.backward(dlogits)
            sgd_step(net, state.buffers, state.lr, cfg.momentum, cfg.weight_decay)
            losses.append(loss)
        if cfg.bn_recalibration_batches:
            take = order[: cfg.bn_recalibration_batches * cfg.batch_size]
            recalibrate_batchnorm(net, x_train[np.sort(take)], cfg.batch_size)
        val_loss, val_acc = _loss_and_accuracy(net, x_val, y_val)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
               "val_acc": val_acc, "lr": state.lr}
        if cfg.stop_at_train_accuracy is not None:
            row["train_acc"] = _loss_and_accuracy(net, x_train, y_train)[1]
        state.history.append(row)
        log.info("epoch %d: train_loss %.4f val_loss %.4f val_acc %.4f lr %g",
                 epoch, row["train_loss"], val_loss, val_acc, state.lr)
        improved = schedule.step(val_loss)
        state.best_val_loss = schedule.best
        state.epochs_since_improvement = schedule.stale
        if out_dir is not None:
            with open(out_dir / "history.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] for k in HISTORY_FIELDS])
            if improved:
                save_checkpoint(net, out_dir / "best.dsrn")
        state.lr = schedule.lr
        if cfg.stop_at_train_accuracy is not None and row["train_acc"] >= cfg.stop_at_train_accuracy:
            break
    if out_dir is not None:
        save_checkpoint(net, out_dir / "final.dsrn")
    return state


def train(net: NetworkGraph, manifest: DatasetManifest, cfg: TrainConfig = TrainConfig(), out_dir=None) -> TrainState:
    """Train on the manifest's train split, validating on its val split."""
    if len(manifest.class_names) != net.config.num_classes:
        raise ContractError(
            f"manifest has {len(manifest.class_names)} classes, network head has {net.config.num_classes}"
        )
    x_train, y_train = manifest.arrays("train")
    x_val, y_val = manifest.arrays("val")
    return fit(net, x_train, y_train, x_val, y_val, cfg, out_dir)


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalReport:
    class_names: List[str]
    confusion: np.ndarray  # rows: true label, columns: predicted label

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else 0.0

    @property
    def per_class_accuracy(self) -> List[float]:
        rows = self.confusion.sum(axis=1)
        return [float(self.confusion[i, i] / r) if r else 0.0 for i, r in enumerate(rows)]

    @classmethod
    def from_predictions(cls, labels, predictions, class_names: Sequence[str]) -> "EvalReport":
        k = len(class_names)
        confusion = np.zeros((k, k), dtype=np.int64)
        np.add.at(confusion, (np.asarray(labels), np.asarray(predictions)), 1)
        return cls(list(class_names), confusion)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "total": self.total,
            "classNames": self.class_names,
            "confusion": self.confusion.tolist(),
            "perClassAccuracy": self.per_class_accuracy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def table(self) -> str:
        """Confusion matrix in percent of each true class, true labels on rows."""
        names = self.class_names
        width = max(6, *(len(n) for n in names)) + 1
        lines = ["Tru\\Pre".ljust(width) + "".join(n.rjust(width) for n in names)]
        rows = self.confusion.sum(axis=1)
        for i, name in enumerate(names):
            cells = [100.0 * c / rows[i] if rows[i] else 0.0 for c in self.confusion[i]]
            lines.append(name.ljust(width) + "".join(f"{c:{width}.2f}" for c in cells))
        lines.append(f"accuracy {100 * self.accuracy:.2f}% over {self.total} samples")
        return "\n".join(lines) + "\n"


def evaluate(net: NetworkGraph, manifest: DatasetManifest, split: str = "test") -> EvalReport:
    x, y = manifest.arrays(split)
    pred = predict(net, x.astype(net.dtype)).argmax(axis=1)
    return EvalReport.from_predictions(y, pred, manifest.class_names)


# ------------------------------------------------------------------- heatmaps

def _network_input(img: ImageBuffer, channel: str = "green") -> ImageBuffer:
    if img.channels == 3:
        img = ops.extract_channel(img, channel)
    return img


def heatmap(net: NetworkGraph, img: ImageBuffer, patch: Optional[int] = None, stride: Optional[int] = None,
            channel: str = "green") -> np.ndarray:
    """Per-pixel resampling probability in [0, 1], shape (H, W).

    Each patch's probability of the last class is placed at the patch centre;
    the grid of centres is bilinearly interpolated to every pixel (values
    beyond the outermost centres are held constant).
    """
    if net.config.num_classes != 2:
        raise ContractError("heatmaps need a binary resampled-vs-original network")
    patch = patch or net.config.input_size
    if patch != net.config.input_size:
        raise ContractError(f"patch {patch} differs from the network input size {net.config.input_size}")
    stride = stride or patch // 2
    gray = _network_input(img, channel)
    grid = make_splicing_patches(gray, patch, stride)
    x = np.stack([p.data for _, p in grid]).astype(np.float32)[..., None]
    if gray.depth == "u8":
        x /= 255.0
    probs = predict(net, x.astype(net.dtype))[:, 1].astype(np.float64)
    tops = sorted({t for (t, _), _ in grid})
    lefts = sorted({l for (_, l), _ in grid})
    values = probs.reshape(len(tops), len(lefts))
    cy = np.array(tops) + (patch - 1) / 2
    cx = np.array(lefts) + (patch - 1) / 2
    rows = np.stack([np.interp(np.arange(gray.width), cx, v) for v in values])
    full = np.stack([np.interp(np.arange(gray.height), cy, rows[:, j]) for j in range(gray.width)], axis=1)
    return np.clip(full, 0.0, 1.0)


def heatmap_image(prob: np.ndarray) -> ImageBuffer:
    """8-bit grayscale rendering of a probability map (255 = resampled)."""
    return ImageBuffer(ops.quantize_u8(np.asarray(prob) * 255.0))
