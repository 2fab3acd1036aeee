"""Softmax, cross-entropy and logit-normalization losses with analytic
gradients with respect to the logits.

Losses accept a single logit vector with an integer label (returning
the per-sample loss and gradient) or a batch `(n, K)` with a label
vector (returning the mean loss and the gradient of the mean).
"""

from typing import Tuple, Union

import numpy as np
import scipy.special

from mcvos.utils import DataError, DimensionMismatch

LabelsT = Union[int, np.ndarray]

ZERO_LOGIT_NORM = 1e-12


class LabelOutOfRange(DataError):
    """Raised when a label is not a valid class index."""


class ZeroLogitVector(DataError):
    """Raised when logit normalization meets a (near-)zero logit vector."""


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, computed with max-subtraction."""
    return scipy.special.softmax(np.asarray(logits, dtype=np.float64), axis=-1)


def _batch(logits: np.ndarray, labels: LabelsT) -> Tuple[np.ndarray, np.ndarray, bool]:
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (logits.shape[0],):
        raise DimensionMismatch(f'Got {labels.shape[0]} labels for {logits.shape[0]} logit rows')
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise LabelOutOfRange(f'Labels must lie in [0, {logits.shape[1]})')
    return logits, labels.astype(np.int64), single


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row losses and per-row gradients."""
    log_probs = scipy.special.log_softmax(logits, axis=-1)
    rows = np.arange(logits.shape[0])
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return -log_probs[rows, labels], grad


def cross_entropy_loss(logits: np.ndarray, labels: LabelsT) -> Tuple[float, np.ndarray]:
    """`-log softmax(logits)[label]` and its gradient `softmax - onehot`.

    Raises:
        LabelOutOfRange: A label is not in `[0, K)`.

    """
    logits, labels, single = _batch(logits, labels)
    losses, grad = _cross_entropy(logits, labels)
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / logits.shape[0]


def logit_norm_loss(logits: np.ndarray, labels: LabelsT, tau: float) -> Tuple[float, np.ndarray]:
    """Cross-entropy on `logits / (tau · ‖logits‖)`, with the gradient
    taken through the normalization.

    The loss is invariant to positive rescaling of the logits.

    Raises:
        LabelOutOfRange: A label is not in `[0, K)`.
        ZeroLogitVector: A logit vector has norm below 1e-12.

    """
    if tau <= 0:
        raise ValueError(f'Logit normalization temperature must be positive, got {tau}')
    logits, labels, single = _batch(logits, labels)
    norms = np.linalg.norm(logits, axis=1, keepdims=True)
    if np.any(norms < ZERO_LOGIT_NORM):
        raise ZeroLogitVector('Cannot normalize a logit vector with zero norm')
    losses, grad_normalized = _cross_entropy(logits / (tau * norms), labels)
    # Jacobian of f / (τ‖f‖) is (I - f fᵀ / ‖f‖²) / (τ‖f‖).
    radial = np.sum(grad_normalized * logits, axis=1, keepdims=True) * logits / norms**2
    grad = (grad_normalized - radial) / (tau * norms)
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / logits.shape[0]
