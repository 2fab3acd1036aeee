"""Virtual outlier synthesis: class-conditional Gaussians over
penultimate features, low-likelihood outlier sampling, energy scoring,
scaled energies against running class means, and the binary
cross-entropy uncertainty loss that separates ID samples from virtual
outliers."""

from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.special

from mcvos.mlp.core import Layer
from mcvos.mlp.losses import softmax
from mcvos.numerics import GaussianParams, RngStream, logsumexp
from mcvos.utils import DataError, DimensionMismatch

ENERGY_CONVENTIONS = ('ratio', 'inverse')

DEFAULT_CONVENTION = 'inverse'
"""Training raises ID energy magnitudes above those of virtual outliers, and
evaluation scores `|E|` as the ID score."""


class InsufficientSamples(DataError):
    """Raised when a class has too few banked features to fit a Gaussian."""

    def __init__(self, message: str, *, class_id: int):
        super().__init__(message)
        self.class_id = class_id


class EmptyBatch(DataError):
    """Raised when the uncertainty loss is given no ID or no OOD samples."""


@dataclass(frozen=True)
class VosConfig:
    """Settings of virtual outlier synthesis."""

    bank_capacity: int = 1000
    """Features retained per class; the oldest are overwritten first."""

    candidates: int = 10000
    """Candidates drawn from a class Gaussian per outlier draw (N_cand)."""

    outliers_per_class: Optional[int] = None
    """Outliers drawn per class present in a batch. When `None`, each class
    receives as many outliers as it has samples in the batch."""

    momentum: float = 0.9
    """Momentum m of the running class energy means."""

    energy_floor: float = 1e-6
    """Smallest energy magnitude used in scaled energies."""

    warmup_epochs: int = 10
    """Epochs trained before the uncertainty loss is applied."""

    convention: str = DEFAULT_CONVENTION
    """`inverse` scores `log(|E| / |μ|)`, so ID samples are trained towards
    larger energy magnitudes than virtual outliers; `ratio` scores its
    negation `log(|μ| / |E|)`."""

    def __post_init__(self):
        if self.bank_capacity < 1 or self.candidates < 1 or self.warmup_epochs < 0:
            raise ValueError(('Cannot instantiate VosConfig with '
                              f'bank_capacity={self.bank_capacity}, candidates={self.candidates} '
                              f'and warmup_epochs={self.warmup_epochs}'))
        if self.outliers_per_class is not None and not 1 <= self.outliers_per_class <= self.candidates:
            raise ValueError(f'outliers_per_class must lie in [1, {self.candidates}], got {self.outliers_per_class}')
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f'Running-mean momentum must lie in [0, 1), got {self.momentum}')
        if self.energy_floor <= 0:
            raise ValueError(f'Energy floor must be positive, got {self.energy_floor}')
        if self.convention not in ENERGY_CONVENTIONS:
            raise ValueError(f'Unknown energy convention "{self.convention}", expected one of {ENERGY_CONVENTIONS}')


@dataclass(frozen=True)
class EnergyScore:
    value: float
    """Free energy `-logsumexp(logits)`."""

    class_id: int
    """Class whose running mean scales this energy."""


def energies(logits: np.ndarray) -> np.ndarray:
    """Free energies `-logsumexp` over the last axis of `logits`."""
    return -np.asarray(logsumexp(np.asarray(logits, dtype=np.float64), axis=-1))


def energy(logits: np.ndarray, class_id: Optional[int] = None) -> EnergyScore:
    """Free energy of one logit vector.

    Args:
        logits: K-vector of logits.
        class_id: Class attributed to the sample; defaults to the argmax
            of `logits`.

    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] == 0:
        raise DimensionMismatch(f'Expected a non-empty logit vector, got shape {logits.shape}')
    return EnergyScore(
        value=float(energies(logits)),
        class_id=int(np.argmax(logits)) if class_id is None else int(class_id),
    )


def scaled_energy(e: Union[float, np.ndarray], mu: Union[float, np.ndarray], *,
                  floor: float = 1e-6, convention: str = 'ratio') -> Union[float, np.ndarray]:
    """Scaled energy `ES = log(|μ| / max(|E|, floor))` of energies relative
    to their class's running mean, taken on magnitudes.

    `|μ|` is floored in the same way. Under the `inverse` convention the
    sign of ES is flipped.

    """
    ratio = (np.log(np.maximum(np.abs(mu), floor))
             - np.log(np.maximum(np.abs(e), floor)))
    if convention == 'inverse':
        ratio = -ratio
    elif convention != 'ratio':
        raise ValueError(f'Unknown energy convention "{convention}"')
    return float(ratio) if np.ndim(ratio) == 0 else ratio


def scaled_energy_gradient(e: np.ndarray, *, floor: float = 1e-6, convention: str = 'ratio') -> np.ndarray:
    """Derivative of [`scaled_energy()`][mcvos.vos.scaled_energy] with
    respect to the energy; zero where the floor is in force."""
    e = np.asarray(e, dtype=np.float64)
    magnitude = np.abs(e)
    safe = np.where(magnitude > floor, magnitude, 1.0)
    grad = np.where(magnitude > floor, -np.sign(e) / safe, 0.0)
    return -grad if convention == 'inverse' else grad


def uncertainty_loss(id_scaled: np.ndarray,
                     ood_scaled: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Binary cross-entropy with `sigmoid(ES)` as the probability of being
    ID: targets are 1 for ID samples and 0 for virtual outliers, and the
    loss is the mean over all samples.

    Returns:
        The loss and its gradients with respect to each ID and each OOD
        scaled energy.

    Raises:
        EmptyBatch: Either population is empty.

    """
    id_scaled = np.atleast_1d(np.asarray(id_scaled, dtype=np.float64))
    ood_scaled = np.atleast_1d(np.asarray(ood_scaled, dtype=np.float64))
    if id_scaled.shape[0] == 0 or ood_scaled.shape[0] == 0:
        raise EmptyBatch(('Uncertainty loss needs ID and OOD samples, got '
                          f'{id_scaled.shape[0]} and {ood_scaled.shape[0]}'))
    count = id_scaled.shape[0] + ood_scaled.shape[0]
    # -log σ(s) = log(1 + e^-s) and -log(1 - σ(s)) = log(1 + e^s)
    loss = (np.sum(np.logaddexp(0.0, -id_scaled)) + np.sum(np.logaddexp(0.0, ood_scaled))) / count
    id_grad = (scipy.special.expit(id_scaled) - 1.0) / count
    ood_grad = scipy.special.expit(ood_scaled) / count
    return float(loss), id_grad, ood_grad


class FeatureBank:
    """Per-class ring buffers of penultimate feature vectors."""

    def __init__(self, class_count: int, dim: int, capacity: int = 1000):
        if class_count < 1 or dim < 1 or capacity < 1:
            raise ValueError(('Cannot instantiate FeatureBank with '
                              f'class_count={class_count}, dim={dim} and capacity={capacity}'))
        self.class_count = class_count
        self.dim = dim
        self.capacity = capacity
        self._buffer = np.zeros((class_count, capacity, dim))
        self._written = np.zeros(class_count, dtype=np.int64)

    def add(self, features: np.ndarray, labels: np.ndarray) -> None:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(labels))
        if features.shape[1] != self.dim or labels.shape != (features.shape[0],):
            raise DimensionMismatch(f'Cannot bank features of shape {features.shape} with {labels.shape[0]} labels')
        for feature, label in zip(features, labels):
            self._buffer[label, self._written[label] % self.capacity] = feature
            self._written[label] += 1

    def count(self, class_id: int) -> int:
        return int(min(self._written[class_id], self.capacity))

    def features(self, class_id: int) -> np.ndarray:
        """Banked features of a class, as a `(count, dim)` matrix."""
        return self._buffer[class_id, :self.count(class_id)].copy()

    def unready_classes(self) -> List[int]:
        """Classes holding fewer than `dim + 1` features."""
        return [c for c in range(self.class_count) if self.count(c) < self.dim + 1]

    def ready(self) -> bool:
        """Whether every class holds enough features to fit a Gaussian."""
        return not self.unready_classes()


def fit_class_gaussians(bank: FeatureBank) -> Tuple[GaussianParams, ...]:
    """Fits one Gaussian per class: the sample mean and the regularized
    maximum-likelihood covariance of its banked features.

    Raises:
        InsufficientSamples: A class has fewer than `dim + 1` features.

    """
    gaussians = []
    for c in range(bank.class_count):
        if bank.count(c) < bank.dim + 1:
            raise InsufficientSamples((f'Class {c} has {bank.count(c)} banked features; '
                                       f'at least {bank.dim + 1} are needed'), class_id=c)
        features = bank.features(c)
        mean = features.mean(axis=0)
        centred = features - mean
        covariance = centred.T @ centred / features.shape[0]
        gaussians.append(GaussianParams.from_moments(mean, covariance, regularize=True))
    return tuple(gaussians)


def sample_virtual_outliers(g: GaussianParams, count: int, candidates: int, rng: RngStream) -> np.ndarray:
    """Draws `candidates` points from `g` and returns the `count` with the
    lowest log density, as a `(count, d)` matrix.

    Candidates are drawn as `μ + L z`; since `log N(μ + L z) = const - ½‖z‖²`
    the lowest densities are the largest `‖z‖²`.

    """
    if not 1 <= count <= candidates:
        raise ValueError(f'Outlier count must lie in [1, {candidates}], got {count}')
    z = rng.generator.standard_normal((candidates, g.dim))
    radius_sq = np.sum(z * z, axis=1)
    tail = np.argsort(-radius_sq, kind='stable')[:count]
    return g.mean + z[tail] @ g.chol.T


def update_running_energy_mean(state: 'VosState', class_id: int, e: float,
                               momentum: Optional[float] = None) -> float:
    """Updates and returns `μ_{c,ID} ← m · μ + (1 - m) · E`; the first
    observation of a class sets `μ = E`.

    `momentum` defaults to the state's configured momentum.

    """
    m = state.config.momentum if momentum is None else momentum
    if not 0.0 <= m < 1.0:
        raise ValueError(f'Running-mean momentum must lie in [0, 1), got {m}')
    current = state.running_means[class_id]
    updated = float(e) if np.isnan(current) else m * current + (1.0 - m) * float(e)
    state.running_means[class_id] = updated
    return updated


@dataclass(frozen=True, eq=False)
class UncertaintyStep:
    """Result of one batch of the uncertainty loss."""

    loss: float
    dlogits: np.ndarray
    """Gradient with respect to the batch's logits, shape `(n, K)`."""

    outlier_gradient: Layer
    """Gradient with respect to the final layer through the outliers'
    logits."""

    outlier_count: int


class VosState:
    """Mutable virtual-outlier state maintained during training: the
    feature bank, class Gaussians and running class energy means."""

    def __init__(self, class_count: int, feature_dim: int, config: Optional[VosConfig] = None):
        self.config = VosConfig() if config is None else config
        self.class_count = class_count
        self.feature_dim = feature_dim
        self.bank = FeatureBank(class_count, feature_dim, self.config.bank_capacity)
        self.running_means = np.full(class_count, np.nan)
        self.gaussians: Optional[Tuple[GaussianParams, ...]] = None

    @property
    def fitted(self) -> bool:
        return self.gaussians is not None

    def active(self, epoch: int) -> bool:
        """Whether the uncertainty loss applies during `epoch`."""
        return self.fitted and epoch >= self.config.warmup_epochs

    def refit_due(self, epoch: int) -> bool:
        """Whether the Gaussians are refitted after `epoch`."""
        return epoch + 1 >= self.config.warmup_epochs and self.bank.ready()

    def refit(self) -> None:
        self.gaussians = fit_class_gaussians(self.bank)

    def observe(self, features: np.ndarray, labels: np.ndarray, logits: np.ndarray) -> None:
        """Banks a batch's features and folds its energies into the running
        mean of each sample's ground-truth class, in batch order."""
        self.bank.add(features, labels)
        for label, e in zip(labels, energies(logits)):
            update_running_energy_mean(self, int(label), float(e))

    def scaled(self, e: np.ndarray, class_ids: np.ndarray) -> np.ndarray:
        return np.asarray(scaled_energy(e, self.running_means[class_ids],
                                        floor=self.config.energy_floor, convention=self.config.convention))

    def uncertainty_step(self, last_layer: Layer, features: np.ndarray, logits: np.ndarray,
                         labels: np.ndarray, rng: RngStream) -> UncertaintyStep:
        """Draws virtual outliers for the classes of a batch, scores the
        batch and the outliers, and returns the uncertainty loss with its
        gradients.

        Outlier logits come from passing the outlier features through
        `last_layer` only.

        """
        if self.gaussians is None:
            raise DataError('Cannot draw virtual outliers before the class Gaussians are fitted')
        if features.shape[1] != self.feature_dim:
            raise DimensionMismatch(f'Expected features of dimension {self.feature_dim}, got {features.shape[1]}')
        floor, convention = self.config.energy_floor, self.config.convention
        classes, counts = np.unique(labels, return_counts=True)
        outliers, outlier_classes = [], []
        for c, n in zip(classes, counts):
            count = int(n) if self.config.outliers_per_class is None else self.config.outliers_per_class
            outliers.append(sample_virtual_outliers(self.gaussians[c], count, self.config.candidates, rng))
            outlier_classes.append(np.full(count, c))
        outlier_features = np.vstack(outliers)
        outlier_classes_arr = np.concatenate(outlier_classes)
        outlier_logits = outlier_features @ last_layer.weight + last_layer.bias

        id_energies = energies(logits)
        ood_energies = energies(outlier_logits)
        loss, id_grad, ood_grad = uncertainty_loss(self.scaled(id_energies, labels),
                                                   self.scaled(ood_energies, outlier_classes_arr))
        # dE/dlogits = -softmax(logits)
        id_dlogits = -(id_grad * scaled_energy_gradient(id_energies, floor=floor, convention=convention)
                       )[:, None] * softmax(logits)
        ood_dlogits = -(ood_grad * scaled_energy_gradient(ood_energies, floor=floor, convention=convention)
                        )[:, None] * softmax(outlier_logits)
        return UncertaintyStep(
            loss=loss,
            dlogits=id_dlogits,
            outlier_gradient=Layer(weight=outlier_features.T @ ood_dlogits, bias=ood_dlogits.sum(axis=0)),
            outlier_count=outlier_features.shape[0],
        )
