"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np


@dataclass
class GradcheckReport:
    tolerance: float
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    checked_entries: Dict[str, int] = field(default_factory=dict)
    skipped_kinks: Dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance and all(self.checked_entries.values())

    def failures(self) -> Dict[str, float]:
        return {k: v for k, v in self.max_rel_error.items() if not v < self.tolerance}

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "passed": self.passed,
            "worst": self.worst,
            "max_rel_error": dict(self.max_rel_error),
            "checked_entries": dict(self.checked_entries),
            "skipped_kinks": dict(self.skipped_kinks),
        }


def relative_error(analytic, numeric, floor: float = 1e-6):
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(
    loss: Callable[[], float],
    arrays: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
    pattern: Optional[Callable[[], bytes]] = None,
) -> GradcheckReport:
    """Compare analytic gradients with central differences.

    ``loss`` is re-evaluated after each in-place perturbation of an entry of
    ``arrays[name]``, so it must read those arrays by reference.  With
    ``max_entries`` set, entries are probed in seeded random order until that
    many have been compared.

    ``pattern``, if given, returns the piecewise-linear selection state
    (max-pool winners, ReLU signs) of the most recent ``loss`` call.  Entries
    whose +step or -step evaluation lands on a different piece than the
    unperturbed point straddle a kink, where central differences are not an
    estimate of the derivative; they are counted in ``skipped_kinks`` instead
    of being compared.  A kinked entry is first retried with steps ten and a
    hundred times smaller, since a shorter interval often fits inside the
    current piece.  Mismatches are reported, never raised.
    """
    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance)
    base = None
    if pattern is not None:
        loss()
        base = pattern()
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 arrays, {name} is {arr.dtype}")
        grad = np.asarray(analytic[name])
        if grad.shape != arr.shape:
            raise ValueError(f"gradient for {name} has shape {grad.shape}, expected {arr.shape}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"{name} must be contiguous to be perturbed in place")
        order = np.arange(flat.size) if max_entries is None else rng.permutation(flat.size)
        wanted = flat.size if max_entries is None else min(max_entries, flat.size)
        checked, numeric, skipped = [], [], 0
        for i in order:
            if len(checked) == wanted:
                break
            orig = flat[i]
            value = None
            for h in (step, step / 10, step / 100):
                flat[i] = orig + h
                up = loss()
                kinked = base is not None and pattern() != base
                flat[i] = orig - h
                down = loss()
                kinked = kinked or (base is not None and pattern() != base)
                flat[i] = orig
                if not kinked:
                    value = (up - down) / (2 * h)
                    break
            if value is None:
                skipped += 1
                continue
            checked.append(i)
            numeric.append(value)
        idx = np.array(checked, dtype=np.intp)
        err = relative_error(grad.reshape(-1)[idx], numeric, floor)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.checked_entries[name] = int(idx.size)
        report.skipped_kinks[name] = skipped
    return report


def check_layers(seed: int = 0, tolerance: float = 1e-4) -> Dict[str, GradcheckReport]:
    """Gradient check every layer primitive on small random float64 inputs."""
    from . import layers as L

    rng = np.random.default_rng(seed)
    reports: Dict[str, GradcheckReport] = {}

    x = rng.standard_normal((2, 6, 6, 2))
    conv = L.ConvParams.same(rng.standard_normal((3, 3, 3, 2)), rng.standard_normal(3))
    probe = rng.standard_normal((2, 6, 6, 3))
    dx, dk, db = L.conv2d_backward(x, conv, probe)
    reports["conv2d"] = gradcheck(
        lambda: float((L.conv2d_forward(x, conv) * probe).sum()),
        {"input": x, "kernels": conv.kernels, "bias": conv.bias},
        {"input": dx, "kernels": dk, "bias": db}, tolerance,
    )

    bn = L.BatchNormParams.init(3, np.float64)
    bn.gamma[:] = rng.uniform(0.5, 2, 3)
    bn.beta[:] = rng.standard_normal(3)
    xb = rng.standard_normal((3, 4, 4, 3))
    probe = rng.standard_normal(xb.shape)
    dx, dg, dbeta = L.batchnorm_backward(xb, bn, probe)
    reports["batchnorm"] = gradcheck(
        lambda: float((L.batchnorm_forward(xb, bn, True) * probe).sum()),
        {"input": xb, "gamma": bn.gamma, "beta": bn.beta},
        {"input": dx, "gamma": dg, "beta": dbeta}, tolerance,
    )

    xt = rng.standard_normal((2, 4, 4, 2))
    probe = rng.standard_normal(xt.shape)
    reports["tanh"] = gradcheck(
        lambda: float((L.tanh_forward(xt) * probe).sum()),
        {"input": xt}, {"input": L.tanh_backward(L.tanh_forward(xt), probe)}, tolerance,
    )

    xp = rng.standard_normal((2, 7, 7, 2))
    probe = rng.standard_normal((2, 3, 3, 2))
    reports["maxpool"] = gradcheck(
        lambda: float((L.maxpool_forward(xp) * probe).sum()),
        {"input": xp}, {"input": L.maxpool_backward(xp, probe)}, tolerance,
    )

    xg = rng.standard_normal((2, 5, 5, 3))
    probe = rng.standard_normal((2, 1, 1, 3))
    reports["global_average_pool"] = gradcheck(
        lambda: float((L.global_average_pool(xg) * probe).sum()),
        {"input": xg}, {"input": L.global_average_pool_backward(xg.shape, probe)}, tolerance,
    )

    xd = rng.standard_normal((3, 5))
    dense = L.DenseParams(rng.standard_normal((5, 2)), rng.standard_normal(2))
    probe = rng.standard_normal((3, 2))
    dx, dw, dbias = L.dense_backward(xd, dense, probe)
    reports["dense"] = gradcheck(
        lambda: float((L.dense_forward(xd, dense) * probe).sum()),
        {"input": xd, "weights": dense.weights, "bias": dense.bias},
        {"input": dx, "weights": dw, "bias": dbias}, tolerance,
    )

    a, b = rng.standard_normal((2, 3, 3, 2)), rng.standard_normal((2, 3, 3, 1))
    probe = rng.standard_normal((2, 3, 3, 3))
    da, db_ = L.split_channels(probe, 2)
    reports["concat_channels"] = gradcheck(
        lambda: float((L.concat_channels(a, b) * probe).sum()),
        {"a": a, "b": b}, {"a": da, "b": db_}, tolerance,
    )
    return reports


def check_network(
    config=None,
    seed: int = 0,
    batch: int = 2,
    tolerance: float = 1e-4,
    max_entries: Optional[int] = 6,
) -> GradcheckReport:
    """End-to-end gradient check of a (by default width-reduced) network in float64.

    The loss is the training loss of the network's head on random labels, so
    the check covers the loss gradient as well as every layer.
    """
    from .losses import loss_and_grad
    from .network import NetworkConfig, build_network

    if config is None:
        config = NetworkConfig(input_size=64, width_divisor=8)
    net = build_network(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(0, 1, (batch, config.input_size, config.input_size, 1))
    labels = rng.integers(0, config.num_classes, batch)

    def loss() -> float:
        return loss_and_grad(net.forward(x, training=True), labels, config.num_classes)[0]

    _, dlogits = loss_and_grad(net.forward(x, training=True), labels, config.num_classes)
    net.backward(dlogits)
    arrays, grads = {}, {}
    for name, owner, attr, _ in net.trainable():
        arrays[name] = getattr(owner, attr)
        grads[name] = getattr(owner, f"{attr}_grad")
    return gradcheck(loss, arrays, grads, tolerance, max_entries=max_entries, seed=seed, pattern=net.selection_pattern)
