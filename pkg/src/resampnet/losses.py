"""Classification losses on raw logits, averaged over the batch."""

import numpy as np

from .layers import sigmoid, softmax


def loss_and_grad(logits: np.ndarray, labels: np.ndarray, num_classes: int):
    """Return ``(mean loss, dloss/dlogits)``.

    Binary cross-entropy for a single-logit sigmoid head (``num_classes == 2``),
    categorical cross-entropy for a softmax head otherwise.
    """
    labels = np.asarray(labels)
    n = logits.shape[0]
    if num_classes == 2:
        z = logits[:, 0].astype(np.float64)
        y = labels.astype(np.float64)
        # log(1 + e^z) - y z, written to stay finite for large |z|
        losses = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        grad = ((sigmoid(z) - y) / n).reshape(n, 1)
    else:
        z = logits.astype(np.float64)
        shifted = z - z.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        losses = -logp[np.arange(n), labels]
        grad = softmax(z, axis=1)
        grad[np.arange(n), labels] -= 1
        grad /= n
    return float(losses.mean()), grad.astype(logits.dtype)


def cross_entropy(prob_true: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy given the probability assigned to the true class."""
    return -np.log(prob_true)
