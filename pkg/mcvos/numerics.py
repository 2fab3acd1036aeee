"""Dense linear algebra, reproducible random streams and multivariate
Gaussian machinery shared by every other module.

Matrices and vectors are `numpy.ndarray` objects of `float64`; all
accumulations happen in double precision.
"""

from dataclasses import dataclass
import math
from typing import Optional, Union

import numpy as np
import scipy.linalg
import scipy.special

from mcvos.utils import DataError, DimensionMismatch

MAX_UINT64 = 2**64 - 1

COVARIANCE_REGULARIZATION = 1e-4
"""Ridge added before factorizing class covariances, as a fraction of
the mean diagonal entry (`trace / d`)."""

COVARIANCE_FLOOR = 1e-8
"""Smallest ridge ever added, so an all-zero covariance still factorizes."""


class NotPositiveDefinite(DataError):
    """Raised when a covariance matrix cannot be Cholesky-factorized."""


class RngStream:
    """A reproducible stream of random numbers identified by `(seed,
    stream_id)`.

    Backed by the counter-based Philox generator keyed on both numbers,
    so equal identifiers always yield equal sequences regardless of the
    process or thread that draws them. A stream is consumed as it is
    drawn from; use [`child()`][mcvos.numerics.RngStream.child] to
    derive independent sub-streams (e.g. one per MC pass).

    """

    def __init__(self, seed: int, stream_id: int = 0):
        """
        Args:
            seed: Unsigned 64-bit seed.
            stream_id: Unsigned 64-bit identifier of the stream under `seed`.
        """
        for name, value in (('seed', seed), ('stream_id', stream_id)):
            if not 0 <= int(value) <= MAX_UINT64:
                raise ValueError(f'RngStream {name} must be an unsigned 64-bit integer, got {value}')
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._generator: Optional[np.random.Generator] = None

    @property
    def generator(self) -> np.random.Generator:
        """The underlying `numpy.random.Generator`, created on first use."""
        if self._generator is None:
            key = np.array([self.seed, self.stream_id], dtype=np.uint64)
            self._generator = np.random.Generator(np.random.Philox(key=key))
        return self._generator

    def child(self, index: int) -> 'RngStream':
        """Returns a fresh stream derived from this stream's identity and
        `index`. Derivation does not consume any draws."""
        state = np.random.SeedSequence([self.seed, self.stream_id, int(index)]).generate_state(1, dtype=np.uint64)
        return RngStream(self.seed, int(state[0]))

    def __repr__(self):
        return f'{self.__class__.__name__}(seed={self.seed}, stream_id={self.stream_id})'


def regularize_covariance(covariance: np.ndarray) -> np.ndarray:
    """Symmetrizes `covariance` and adds the ridge `λI`, with
    `λ = max(1e-4 · trace / d, 1e-8)`."""
    covariance = np.asarray(covariance, dtype=np.float64)
    d = covariance.shape[0]
    ridge = max(COVARIANCE_REGULARIZATION * float(np.trace(covariance)) / d, COVARIANCE_FLOOR)
    return 0.5 * (covariance + covariance.T) + ridge * np.eye(d)


def cholesky(covariance: np.ndarray) -> np.ndarray:
    """Returns the lower-triangular factor `L` with `L @ L.T == covariance`.

    Raises:
        DimensionMismatch: `covariance` is not square.
        NotPositiveDefinite: `covariance` is not finite, not symmetric or
            has a non-positive pivot.

    """
    covariance = np.asarray(covariance, dtype=np.float64)
    if covariance.ndim != 2 or covariance.shape[0] != covariance.shape[1]:
        raise DimensionMismatch(f'Covariance must be a square matrix, got shape {covariance.shape}')
    if not np.all(np.isfinite(covariance)):
        raise NotPositiveDefinite('Covariance contains non-finite entries')
    scale = max(float(np.max(np.abs(covariance))), 1.0)
    if not np.allclose(covariance, covariance.T, rtol=0.0, atol=1e-12 * scale):
        raise NotPositiveDefinite('Covariance is not symmetric')
    try:
        return scipy.linalg.cholesky(covariance, lower=True)
    except np.linalg.LinAlgError as ex:
        raise NotPositiveDefinite(f'Covariance is not positive definite: {ex}') from None


@dataclass(frozen=True, eq=False)
class GaussianParams:
    """A multivariate Gaussian with its cached Cholesky factor."""

    mean: np.ndarray
    """Mean vector of length d."""

    covariance: np.ndarray
    """Symmetric d×d covariance matrix."""

    chol: np.ndarray
    """Lower-triangular factor of `covariance` with a positive diagonal."""

    def __post_init__(self):
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.covariance.shape != (d, d) or self.chol.shape != (d, d):
            raise DimensionMismatch(('Cannot instantiate GaussianParams with mean shape '
                                     f'{self.mean.shape}, covariance shape {self.covariance.shape} '
                                     f'and chol shape {self.chol.shape}'))
        if not np.all(np.diag(self.chol) > 0):
            raise NotPositiveDefinite('Cholesky factor must have a strictly positive diagonal')

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_moments(cls, mean: np.ndarray, covariance: np.ndarray, *,
                     regularize: bool = True) -> 'GaussianParams':
        """Builds a Gaussian from its mean and covariance, factorizing the
        (optionally [regularized][mcvos.numerics.regularize_covariance])
        covariance."""
        mean = np.asarray(mean, dtype=np.float64)
        covariance = np.asarray(covariance, dtype=np.float64)
        if regularize:
            covariance = regularize_covariance(covariance)
        return cls(mean=mean, covariance=covariance, chol=cholesky(covariance))


def _check_points(x: np.ndarray, g: GaussianParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != g.dim or x.ndim not in (1, 2):
        raise DimensionMismatch(f'Expected points of dimension {g.dim}, got shape {x.shape}')
    return x


def mahalanobis_sq(x: np.ndarray, g: GaussianParams) -> Union[float, np.ndarray]:
    """Squared Mahalanobis distance of point(s) `x` (shape `(d,)` or
    `(n, d)`) from the Gaussian's mean."""
    x = _check_points(x, g)
    diff = np.atleast_2d(x) - g.mean
    z = scipy.linalg.solve_triangular(g.chol, diff.T, lower=True)
    dist_sq = np.sum(z * z, axis=0)
    return float(dist_sq[0]) if x.ndim == 1 else dist_sq


def log_normalizer(g: GaussianParams) -> float:
    """Log of the Gaussian's normalizing constant, `-½(d·ln 2π + ln|Σ|)`."""
    log_det = 2.0 * float(np.sum(np.log(np.diag(g.chol))))
    return -0.5 * (g.dim * math.log(2.0 * math.pi) + log_det)


def gaussian_logpdf(x: np.ndarray, g: GaussianParams) -> Union[float, np.ndarray]:
    """Log density `log N(x; μ, Σ)` of point(s) `x` (shape `(d,)` or
    `(n, d)`).

    Raises:
        DimensionMismatch: The points do not have the Gaussian's dimension.

    """
    return log_normalizer(g) - 0.5 * mahalanobis_sq(x, g)


def sample_gaussian(g: GaussianParams, n: int, rng: RngStream) -> np.ndarray:
    """Draws `n` i.i.d. rows from `N(μ, Σ)` as an `(n, d)` matrix."""
    if n < 0:
        raise ValueError(f'Sample count must be non-negative, got {n}')
    z = rng.generator.standard_normal((n, g.dim))
    return g.mean + z @ g.chol.T


def logsumexp(v: np.ndarray, axis: int = -1) -> Union[float, np.ndarray]:
    """`log Σ exp(v_i)` along `axis`, computed with max-subtraction."""
    result = scipy.special.logsumexp(np.asarray(v, dtype=np.float64), axis=axis)
    return float(result) if np.ndim(result) == 0 else result
