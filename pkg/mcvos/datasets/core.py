"""Labeled feature datasets, synthetic cluster generation and
stratified splitting."""

from dataclasses import dataclass
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from mcvos.numerics import GaussianParams, RngStream, mahalanobis_sq, sample_gaussian
from mcvos.utils import DataError, DimensionMismatch


class ClassTooSmall(DataError):
    """Raised when a class has too few samples to be split."""


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature vectors with integer class labels.

    `labels` is `None` for unlabeled populations (such as OOD feature
    sets), in which case `class_count` is 0.

    """

    features: np.ndarray
    """Matrix of shape `(n, d)`."""

    labels: Optional[np.ndarray]
    """Integer class ids of shape `(n,)`, each in `[0, class_count)`."""

    class_count: int
    """Number of classes C."""

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise DimensionMismatch(f'Dataset features must be a non-empty (n, d) matrix, got shape {self.features.shape}')
        if not np.all(np.isfinite(self.features)):
            raise DataError('Dataset features must all be finite')
        if self.labels is not None:
            if self.labels.shape != (self.features.shape[0],):
                raise DimensionMismatch((f'Dataset has {self.features.shape[0]} feature rows '
                                         f'but labels of shape {self.labels.shape}'))
            if np.any(self.labels < 0) or np.any(self.labels >= self.class_count):
                raise DataError(f'Dataset labels must lie in [0, {self.class_count})')

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, ids: np.ndarray) -> 'LabeledDataset':
        """Returns the dataset restricted to the given row indices."""
        return LabeledDataset(
            features=self.features[ids],
            labels=None if self.labels is None else self.labels[ids],
            class_count=self.class_count,
        )


@dataclass(frozen=True, eq=False)
class SplitIndices:
    """Disjoint train/test row indices covering a dataset."""

    train_ids: np.ndarray
    test_ids: np.ndarray


def default_cluster_means(radius: float = 4.0, count: int = 5) -> np.ndarray:
    """Cluster centres of the toy task: one at the origin and `count - 1`
    evenly spaced on a circle of the given radius."""
    angles = 2.0 * np.pi * np.arange(count - 1) / (count - 1)
    ring = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return np.vstack([np.zeros((1, 2)), ring])


def default_cluster_covariances(count: int = 5, dim: int = 2) -> np.ndarray:
    return np.stack([np.eye(dim)] * count)


def make_clusters(means: np.ndarray, covariances: np.ndarray, per_class: int,
                  rng: RngStream) -> LabeledDataset:
    """Draws `per_class` points from each Gaussian cluster `N(means[c],
    covariances[c])`, labelled `c`.

    Raises:
        ValueError: Fewer than two clusters or dimensions.
        NotPositiveDefinite: A cluster covariance is degenerate.

    """
    means = np.asarray(means, dtype=np.float64)
    covariances = np.asarray(covariances, dtype=np.float64)
    class_count, dim = means.shape
    if class_count < 2 or dim < 2:
        raise ValueError(f'Clusters need at least 2 classes and 2 dimensions, got {class_count} and {dim}')
    if covariances.shape != (class_count, dim, dim):
        raise DimensionMismatch(f'Expected covariances of shape {(class_count, dim, dim)}, got {covariances.shape}')
    features = []
    for c in range(class_count):
        g = GaussianParams.from_moments(means[c], covariances[c], regularize=False)
        features.append(sample_gaussian(g, per_class, rng))
    labels = np.repeat(np.arange(class_count), per_class)
    return LabeledDataset(features=np.vstack(features), labels=labels, class_count=class_count)


def make_background(count: int, means: np.ndarray, covariances: np.ndarray, *,
                    bounds: Sequence[Tuple[float, float]], rng: RngStream,
                    radius: float = 3.0, max_rounds: int = 1000) -> np.ndarray:
    """Draws `count` points uniformly within `bounds` (one `(low, high)`
    pair per dimension), rejecting points whose Mahalanobis distance to
    any cluster is below `radius`.

    Used as the held-out OOD population of the toy task.

    """
    low, high = np.asarray(bounds, dtype=np.float64).T
    gaussians = [GaussianParams.from_moments(m, c, regularize=False) for m, c in zip(means, covariances)]
    accepted = []
    accepted_count = 0
    for _ in range(max_rounds):
        candidates = rng.generator.uniform(low, high, size=(max(count, 64), low.shape[0]))
        outside = np.ones(candidates.shape[0], dtype=bool)
        for g in gaussians:
            outside &= mahalanobis_sq(candidates, g) >= radius**2
        accepted.append(candidates[outside])
        accepted_count += int(outside.sum())
        if accepted_count >= count:
            return np.vstack(accepted)[:count]
    raise DataError(f'Could not draw {count} background points outside all clusters within the given bounds')


def split(ds: LabeledDataset, fraction: float, rng: RngStream) -> SplitIndices:
    """Stratified split: within each class, `round(fraction · n_c)` rows
    (at least one, at most `n_c - 1`) go to the train side.

    Raises:
        ClassTooSmall: A class has fewer than two samples.

    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f'Split fraction must lie strictly between 0 and 1, got {fraction}')
    if ds.labels is None:
        raise ValueError('Cannot split an unlabeled dataset')
    train_ids, test_ids = [], []
    for c in range(ds.class_count):
        class_ids = np.flatnonzero(ds.labels == c)
        if class_ids.shape[0] < 2:
            raise ClassTooSmall(f'Class {c} has {class_ids.shape[0]} samples; at least 2 are needed to split')
        shuffled = rng.generator.permutation(class_ids)
        train_count = min(max(int(math.floor(fraction * shuffled.shape[0] + 0.5)), 1), shuffled.shape[0] - 1)
        train_ids.append(shuffled[:train_count])
        test_ids.append(shuffled[train_count:])
    return SplitIndices(
        train_ids=np.sort(np.concatenate(train_ids)),
        test_ids=np.sort(np.concatenate(test_ids)),
    )
