"""OOD detection and calibration metrics: AUROC, AUPR with either
population as the positive class, FPR at a TPR level in both the
ID-positive and OOD-positive conventions, expected calibration error,
score histograms with quantile markers, and MI ratio reports.

Scores are oriented so that higher means more ID-like.
"""

from dataclasses import dataclass, fields, replace
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.stats

from mcvos.utils import DataError

POSITIVES = ('id', 'ood')

REPORT_COLUMNS = [
    'label', 'dataset',
    'fpr95_id', 'auroc', 'aupr_id', 'aupr_ood', 'fpr95_ood',
    'accuracy', 'ece', 'ratio_ft', 'ratio_ood_id',
]
"""Columns of a metric report table, one row per (label, OOD dataset)."""

METRIC_COLUMNS = REPORT_COLUMNS[2:]

AVERAGE_DATASET = 'Average'


class EmptyPopulation(DataError):
    """Raised when a metric needs a population that has no scores."""


class EmptyGroup(DataError):
    """Raised when an MI ratio group has no samples."""


@dataclass(frozen=True, eq=False)
class ScoredPopulations:
    """Detection scores of an ID and an OOD population."""

    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        for name in ('id_scores', 'ood_scores'):
            scores = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if not np.all(np.isfinite(scores)):
                raise DataError(f'ScoredPopulations {name} must all be finite')
            object.__setattr__(self, name, scores)

    def check_nonempty(self) -> None:
        if self.id_scores.shape[0] == 0 or self.ood_scores.shape[0] == 0:
            raise EmptyPopulation(('Metric needs nonempty ID and OOD populations, got '
                                   f'{self.id_scores.shape[0]} and {self.ood_scores.shape[0]} scores'))

    def oriented(self, positive: str) -> Tuple[np.ndarray, np.ndarray]:
        """Positive and negative scores, oriented so that higher means more
        like the positive population."""
        if positive == 'id':
            return self.id_scores, self.ood_scores
        if positive == 'ood':
            return -self.ood_scores, -self.id_scores
        raise ValueError(f'Unknown positive population "{positive}", expected one of {POSITIVES}')


def auroc(p: ScoredPopulations) -> float:
    """Probability that an ID sample scores above an OOD sample, with ties
    counting one half (the Mann-Whitney statistic from average ranks).

    Raises:
        EmptyPopulation: Either population is empty.

    """
    p.check_nonempty()
    n_id, n_ood = p.id_scores.shape[0], p.ood_scores.shape[0]
    ranks = scipy.stats.rankdata(np.concatenate([p.id_scores, p.ood_scores]))
    u_statistic = np.sum(ranks[:n_id]) - n_id * (n_id + 1) / 2.0
    return float(u_statistic / (n_id * n_ood))


def _threshold_sweep(positives: np.ndarray, negatives: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """True and false positive counts when classifying `score >= t`
    positive, for each distinct score `t` in descending order."""
    scores = np.concatenate([positives, negatives])
    is_positive = np.concatenate([np.ones(positives.shape[0]), np.zeros(negatives.shape[0])])
    order = np.argsort(-scores, kind='mergesort')
    scores, is_positive = scores[order], is_positive[order]
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    true_positives = np.cumsum(is_positive)[ends]
    false_positives = (ends + 1) - true_positives
    return true_positives, false_positives


def aupr(p: ScoredPopulations, positive: str = 'id') -> float:
    """Area under the precision-recall curve for the given positive
    population, sweeping every distinct score as a threshold and holding
    precision constant between achieved recalls.

    Raises:
        EmptyPopulation: Either population is empty.

    """
    p.check_nonempty()
    positives, negatives = p.oriented(positive)
    true_positives, false_positives = _threshold_sweep(positives, negatives)
    precision = true_positives / (true_positives + false_positives)
    recall = true_positives / positives.shape[0]
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


def fpr_at_tpr(p: ScoredPopulations, positive: str = 'id', level: float = 0.95) -> float:
    """False positive rate at the highest threshold at which at least
    `level` of the positive population is classified positive.

    With `positive='id'` a sample is classified ID when its score is at or
    above the threshold (FPR95_ID); with `positive='ood'` a sample is
    classified OOD when its score is at or below it (FPR95_OOD).

    Raises:
        EmptyPopulation: Either population is empty.

    """
    if not 0.0 < level <= 1.0:
        raise ValueError(f'TPR level must lie in (0, 1], got {level}')
    p.check_nonempty()
    positives, negatives = p.oriented(positive)
    needed = max(int(math.ceil(level * positives.shape[0] - 1e-9)), 1)
    threshold = np.sort(positives)[::-1][needed - 1]
    return float(np.mean(negatives >= threshold))


def calibration_error(confidences: np.ndarray, correct: np.ndarray, bins: int = 15) -> float:
    """Expected calibration error over `bins` equal-width confidence bins
    `(lo, hi]` (a confidence of exactly 0 falls in the first bin).

    Returns:
        `Σ_b (|b| / n) · |accuracy_b - mean confidence_b|`, or NaN for an
        empty input.

    """
    confidences = np.asarray(confidences, dtype=np.float64).ravel()
    correct = np.asarray(correct, dtype=np.float64).ravel()
    if confidences.shape != correct.shape:
        raise DataError(f'Got {confidences.shape[0]} confidences for {correct.shape[0]} outcomes')
    if np.any(confidences < 0.0) or np.any(confidences > 1.0):
        raise ValueError('Confidences must lie in [0, 1]')
    if bins < 1:
        raise ValueError(f'Calibration needs at least one bin, got {bins}')
    if confidences.shape[0] == 0:
        return math.nan
    bin_ids = np.clip(np.ceil(confidences * bins).astype(np.int64) - 1, 0, bins - 1)
    counts = np.bincount(bin_ids, minlength=bins)
    confidence_sums = np.bincount(bin_ids, weights=confidences, minlength=bins)
    correct_sums = np.bincount(bin_ids, weights=correct, minlength=bins)
    occupied = counts > 0
    gaps = np.abs(correct_sums[occupied] - confidence_sums[occupied]) / counts[occupied]
    return float(np.sum(counts[occupied] / confidences.shape[0] * gaps))


@dataclass(frozen=True, eq=False)
class HistogramReport:
    """Binned score counts of both populations with quantile markers."""

    edges: np.ndarray
    """`bins + 1` equal-width bin edges over the joint score range."""

    id_counts: np.ndarray
    ood_counts: np.ndarray
    id_quantile: float
    """5% quantile of the ID scores."""

    ood_quantile: float
    """95% quantile of the OOD scores."""

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'bin_low': self.edges[:-1],
            'bin_high': self.edges[1:],
            'id_count': self.id_counts,
            'ood_count': self.ood_counts,
        })


def histogram_report(p: ScoredPopulations, bins: int = 20) -> HistogramReport:
    """Histograms of both populations over their joint range (widened by
    ±0.5 when all scores are equal) and the linearly interpolated 5% ID
    and 95% OOD quantiles."""
    p.check_nonempty()
    if bins < 1:
        raise ValueError(f'Histogram needs at least one bin, got {bins}')
    joined = np.concatenate([p.id_scores, p.ood_scores])
    low, high = float(np.min(joined)), float(np.max(joined))
    if low == high:
        low, high = low - 0.5, high + 0.5
    id_counts, edges = np.histogram(p.id_scores, bins=bins, range=(low, high))
    ood_counts, _ = np.histogram(p.ood_scores, bins=bins, range=(low, high))
    return HistogramReport(
        edges=edges,
        id_counts=id_counts,
        ood_counts=ood_counts,
        id_quantile=float(np.quantile(p.id_scores, 0.05)),
        ood_quantile=float(np.quantile(p.ood_scores, 0.95)),
    )


@dataclass(frozen=True)
class MiRatios:
    ratio_ft: float
    """Mean MI of misclassified ID samples over that of correctly
    classified ones."""

    ratio_ood_id: float
    """Mean MI of OOD samples over that of all ID samples."""


def mi_ratio_report(id_correct_mi: np.ndarray, id_incorrect_mi: np.ndarray,
                    ood_mi: np.ndarray) -> MiRatios:
    """Ratios of mean mutual information between sample groups.

    A zero denominator yields an infinite (or NaN) ratio.

    Raises:
        EmptyGroup: Any group is empty.

    """
    groups = {
        'ID-correct': np.asarray(id_correct_mi, dtype=np.float64).ravel(),
        'ID-incorrect': np.asarray(id_incorrect_mi, dtype=np.float64).ravel(),
        'OOD': np.asarray(ood_mi, dtype=np.float64).ravel(),
    }
    for name, values in groups.items():
        if values.shape[0] == 0:
            raise EmptyGroup(f'MI ratio group {name} has no samples')
    all_id = np.concatenate([groups['ID-correct'], groups['ID-incorrect']])
    with np.errstate(divide='ignore', invalid='ignore'):
        return MiRatios(
            ratio_ft=float(np.float64(groups['ID-incorrect'].mean()) / groups['ID-correct'].mean()),
            ratio_ood_id=float(np.float64(groups['OOD'].mean()) / all_id.mean()),
        )


@dataclass(frozen=True, eq=False)
class MetricReport:
    """Metrics of one ID population against one OOD dataset."""

    label: str
    """Name of the evaluated model or run."""

    dataset: str
    """Name of the OOD dataset."""

    fpr95_id: float
    auroc: float
    aupr_id: float
    aupr_ood: float
    fpr95_ood: float
    accuracy: float
    """ID accuracy, or NaN when ID labels are unavailable."""

    ece: float
    ratio_ft: float = math.nan
    ratio_ood_id: float = math.nan
    histogram: Optional[HistogramReport] = None

    def to_dict(self) -> Dict[str, object]:
        return {field.name: getattr(self, field.name) for field in fields(self) if field.name != 'histogram'}


def build_report(p: ScoredPopulations, *, label: str = '', dataset: str = '',
                 id_labels: Optional[np.ndarray] = None,
                 id_predicted: Optional[np.ndarray] = None,
                 id_confidence: Optional[np.ndarray] = None,
                 id_mi: Optional[np.ndarray] = None,
                 ood_mi: Optional[np.ndarray] = None,
                 calibration_bins: int = 15,
                 histogram_bins: int = 20) -> MetricReport:
    """Computes every detection metric of `p` together with the ID
    accuracy, calibration error and MI ratios where their inputs are given.

    ID samples with a negative label are treated as unlabeled.

    """
    accuracy, ece, ratio_ft, ratio_ood_id = math.nan, math.nan, math.nan, math.nan
    if id_labels is not None and id_predicted is not None:
        id_labels = np.asarray(id_labels)
        labeled = id_labels >= 0
        correct = np.asarray(id_predicted)[labeled] == id_labels[labeled]
        if np.any(labeled):
            accuracy = float(np.mean(correct))
            if id_confidence is not None:
                ece = calibration_error(np.asarray(id_confidence)[labeled], correct, calibration_bins)
        if id_mi is not None and ood_mi is not None:
            labeled_mi = np.asarray(id_mi)[labeled]
            try:
                ratios = mi_ratio_report(labeled_mi[correct], labeled_mi[~correct], ood_mi)
            except EmptyGroup:
                pass
            else:
                ratio_ft, ratio_ood_id = ratios.ratio_ft, ratios.ratio_ood_id
    return MetricReport(
        label=label,
        dataset=dataset,
        fpr95_id=fpr_at_tpr(p, 'id'),
        auroc=auroc(p),
        aupr_id=aupr(p, 'id'),
        aupr_ood=aupr(p, 'ood'),
        fpr95_ood=fpr_at_tpr(p, 'ood'),
        accuracy=accuracy,
        ece=ece,
        ratio_ft=ratio_ft,
        ratio_ood_id=ratio_ood_id,
        histogram=histogram_report(p, histogram_bins),
    )


def average_reports(reports: Sequence[MetricReport], dataset: str = AVERAGE_DATASET) -> MetricReport:
    """Mean of each metric over reports of several OOD datasets."""
    if len(reports) == 0:
        raise ValueError('Cannot average an empty list of reports')
    means = {}
    for column in METRIC_COLUMNS:
        values = np.array([getattr(report, column) for report in reports], dtype=np.float64)
        known = values[~np.isnan(values)]
        means[column] = float(np.mean(known)) if known.shape[0] else math.nan
    return replace(reports[0], dataset=dataset, histogram=None, **means)


def reports_frame(reports: Sequence[MetricReport]) -> pd.DataFrame:
    """One row per report, columns as in `REPORT_COLUMNS`."""
    return pd.DataFrame([report.to_dict() for report in reports], columns=REPORT_COLUMNS)


def aggregate(frame: pd.DataFrame) -> pd.DataFrame:
    """Combines report rows sharing a (label, dataset) into mean and
    standard deviation (`<metric>_mean`, `<metric>_std`, population
    std) columns, keeping first-seen order."""
    grouped = frame.groupby(['label', 'dataset'], sort=False)[METRIC_COLUMNS]
    means = grouped.mean().add_suffix('_mean')
    stds = grouped.std(ddof=0).add_suffix('_std')
    columns: List[str] = []
    for column in METRIC_COLUMNS:
        columns.extend([f'{column}_mean', f'{column}_std'])
    combined = pd.concat([means, stds], axis=1)[columns].reset_index()
    combined.insert(2, 'runs', grouped.size().to_numpy())
    return combined


def format_reports(frame: pd.DataFrame) -> str:
    """Plain-text rendering of a report table. Columns ending in `_std`
    are folded into their `_mean` column as `mean ± std`."""
    text_frame = pd.DataFrame({column: frame[column] for column in frame.columns
                               if not column.endswith('_std')})
    for column in list(text_frame.columns):
        if column.endswith('_mean'):
            std_column = column[:-len('_mean')] + '_std'
            text_frame[column] = [f'{mean:.4f} ± {std:.4f}'
                                  for mean, std in zip(frame[column], frame[std_column])]
            text_frame = text_frame.rename(columns={column: column[:-len('_mean')]})
        elif column in METRIC_COLUMNS:
            text_frame[column] = [f'{value:.4f}' for value in frame[column]]
    return text_frame.to_string(index=False) + '\n'
