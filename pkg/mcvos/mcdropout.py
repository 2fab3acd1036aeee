"""Monte Carlo Dropout inference and the aleatoric uncertainty metrics
computed from T stochastic passes: mean prediction, entropy, mutual
information, expected KL divergence, predictive variance and energy
statistics, plus the combined MI + energy detection score."""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from mcvos.mlp import MlpModel, forward, softmax
from mcvos.numerics import RngStream
from mcvos.utils import DataError, DimensionMismatch, logger
from mcvos.vos import DEFAULT_CONVENTION, ENERGY_CONVENTIONS, energies

PROBABILITY_FLOOR = 1e-12
"""Probabilities are raised to at least this value before any logarithm."""

SIMPLEX_TOLERANCE = 1e-9


class DegenerateBatch(DataError):
    """Raised when a score component is constant across a batch, so
    min-max scaling is undefined."""


@dataclass(frozen=True, eq=False)
class McSamples:
    """Softmax outputs and energies of T passes over K classes, for one
    input (shapes `(T, K)` and `(T,)`) or a batch (leading axes)."""

    probs: np.ndarray
    """Probabilities of shape `(..., T, K)`."""

    energies: np.ndarray
    """Energies of shape `(..., T)`."""

    def __post_init__(self):
        if self.probs.ndim < 2 or self.probs.shape[-2] < 1:
            raise DimensionMismatch(f'McSamples need at least one pass, got probabilities of shape {self.probs.shape}')
        if self.energies.shape != self.probs.shape[:-1]:
            raise DimensionMismatch(f'Energies of shape {self.energies.shape} do not match probabilities {self.probs.shape}')
        if (np.any(self.probs < -SIMPLEX_TOLERANCE)
                or np.any(np.abs(self.probs.sum(axis=-1) - 1.0) > SIMPLEX_TOLERANCE)):
            raise DataError('McSamples probability rows must lie on the simplex')

    @property
    def passes(self) -> int:
        return self.probs.shape[-2]

    @property
    def class_count(self) -> int:
        return self.probs.shape[-1]


@dataclass(frozen=True, eq=False)
class McSummary:
    """Per-input aggregates of MC samples; each field carries the samples'
    leading axes."""

    mean_probs: np.ndarray
    predicted: np.ndarray
    entropy: np.ndarray
    """Entropy of the mean prediction, `H(p̂)`."""

    mi: np.ndarray
    """Mutual information `H(p̂) - mean_t H(p_t)`."""

    ekl: np.ndarray
    """Expected KL divergence `mean_t KL(p̂ ‖ p_t)`."""

    variance: np.ndarray
    """Predictive variance averaged over classes."""

    class_variance: np.ndarray
    """Predictive variance per class, shape `(..., K)`."""

    energy_mean: np.ndarray
    energy_var: np.ndarray

    @property
    def confidence(self) -> np.ndarray:
        return np.max(self.mean_probs, axis=-1)


def samples_from_logits(logits: np.ndarray) -> McSamples:
    """Builds MC samples from logits of shape `(..., T, K)`."""
    logits = np.asarray(logits, dtype=np.float64)
    return McSamples(probs=softmax(logits), energies=energies(logits))


def mc_pass(model: MlpModel, x: np.ndarray, rng: RngStream) -> np.ndarray:
    """Logits of one stochastic pass over `x`."""
    return forward(model, x, rng).logits


def stack_passes(pass_logits: Tuple[np.ndarray, ...], single: bool) -> McSamples:
    """Stacks per-pass logits `(n, K)` in pass order into MC samples of
    shape `(n, T, K)`, or `(T, K)` for a single input."""
    logits = np.stack(pass_logits, axis=1)
    return samples_from_logits(logits[0] if single else logits)


def mc_infer(model: MlpModel, x: np.ndarray, passes: int, rng: RngStream) -> McSamples:
    """Runs `passes` stochastic forward passes over `x` (shape `(d,)` or
    `(n, d)`), pass `t` drawing its dropout masks from `rng.child(t)`.

    [`McDropoutRunner`][mcvos.core.McDropoutRunner] produces identical
    samples with the passes spread over worker processes.

    """
    if passes < 1:
        raise ValueError(f'MC inference needs at least one pass, got {passes}')
    x = np.asarray(x, dtype=np.float64)
    pass_logits = tuple(mc_pass(model, np.atleast_2d(x), rng.child(t)) for t in range(passes))
    return stack_passes(pass_logits, single=x.ndim == 1)


def deterministic_samples(model: MlpModel, x: np.ndarray) -> McSamples:
    """Single-pass samples from the deterministic forward."""
    x = np.asarray(x, dtype=np.float64)
    logits = forward(model, np.atleast_2d(x)).logits
    return stack_passes((logits,), single=x.ndim == 1)


def _entropy(probs: np.ndarray) -> np.ndarray:
    return -np.sum(probs * np.log(np.maximum(probs, PROBABILITY_FLOOR)), axis=-1)


def summarize(s: McSamples) -> McSummary:
    """Aggregates the T passes of each input."""
    probs = s.probs
    mean_probs = probs.mean(axis=-2)
    entropy = _entropy(mean_probs)
    expected_entropy = _entropy(probs).mean(axis=-1)
    log_mean = np.log(np.maximum(mean_probs, PROBABILITY_FLOOR))
    log_probs = np.log(np.maximum(probs, PROBABILITY_FLOOR))
    ekl = np.sum(mean_probs[..., None, :] * (log_mean[..., None, :] - log_probs), axis=-1).mean(axis=-1)
    class_variance = np.mean((probs - mean_probs[..., None, :])**2, axis=-2)
    return McSummary(
        mean_probs=mean_probs,
        predicted=np.argmax(mean_probs, axis=-1),
        entropy=entropy,
        mi=entropy - expected_entropy,
        ekl=ekl,
        variance=class_variance.mean(axis=-1),
        class_variance=class_variance,
        energy_mean=s.energies.mean(axis=-1),
        energy_var=s.energies.var(axis=-1),
    )


def epistemic_score(energy: np.ndarray, convention: str = DEFAULT_CONVENTION) -> np.ndarray:
    """Energy-based ID score (higher ⇒ more ID-like) consistent with the
    scaled-energy convention the model was trained under: `-|E|` for
    `ratio`, `|E|` for `inverse`."""
    if convention not in ENERGY_CONVENTIONS:
        raise ValueError(f'Unknown energy convention "{convention}"')
    magnitude = np.abs(np.asarray(energy, dtype=np.float64))
    return -magnitude if convention == 'ratio' else magnitude


def min_max_scale(values: np.ndarray) -> np.ndarray:
    """Scales values linearly onto `[0, 1]`.

    Raises:
        DegenerateBatch: All values are equal.

    """
    values = np.asarray(values, dtype=np.float64)
    low, high = np.min(values), np.max(values)
    if not high > low:
        raise DegenerateBatch(f'Cannot min-max scale a constant batch (value {low})')
    return (values - low) / (high - low)


def combined_score(summary: McSummary, weights: Tuple[float, float] = (0.5, 0.5), *,
                   convention: str = DEFAULT_CONVENTION) -> np.ndarray:
    """Weighted sum of the min-max scaled negated MI and the min-max scaled
    epistemic score of a batch; higher ⇒ more ID-like, so passes that
    disagree lower the score.

    A component that is constant over the batch is logged and contributes
    zero.

    Args:
        summary: Batch summary.
        weights: `(w_MI, w_E)`.
        convention: Energy convention of the model.

    """
    w_mi, w_energy = weights
    if not (np.isfinite(w_mi) and np.isfinite(w_energy)):
        raise ValueError(f'Combined-score weights must be finite, got {weights}')
    score = np.zeros(np.shape(summary.mi))
    components = (('MI', w_mi, -summary.mi),
                  ('energy', w_energy, epistemic_score(summary.energy_mean, convention)))
    for name, weight, values in components:
        if weight == 0:
            continue
        try:
            score = score + weight * min_max_scale(values)
        except DegenerateBatch as ex:
            logger.warning(f'Dropping the {name} component of the combined score: {ex}')
    return score
