"""CSV ingestion and emission of feature datasets and logit dumps.

Two header-declared schemas are understood:

* features: `x0,...,x{d-1}[,label]`
* logits, long form: `sample_id,label,domain,t,k,value` with one logit
  per row, or wide form: `sample_id,label,l_<t>_<k>...,domain` with one
  sample per row.

`domain` is `id` or `ood`; the `label` cell of a logit row may be empty.
"""

from dataclasses import dataclass
import re
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from mcvos.utils import DataError, DimensionMismatch
from .core import LabeledDataset

DOMAINS = ('id', 'ood')

FEATURE_COLUMN_REGEX = re.compile(r'x(\d+)')
WIDE_LOGIT_COLUMN_REGEX = re.compile(r'l_(\d+)_(\d+)')


class ParseError(DataError):
    """Raised for a cell that cannot be parsed."""

    def __init__(self, message: str, *, line: int, column: str):
        super().__init__(f'Line {line}, column "{column}": {message}')
        self.line = line
        self.column = column


class SchemaError(DataError):
    """Raised when a CSV header lacks a column its schema requires."""

    def __init__(self, message: str, *, column: Optional[str] = None):
        super().__init__(message)
        self.column = column


class InconsistentShape(DataError):
    """Raised when rows of a file disagree on their shape."""


@dataclass(frozen=True, eq=False)
class LogitDump:
    """Externally produced logits: T stochastic passes over K classes for
    each sample, tagged as in- or out-of-distribution."""

    sample_ids: np.ndarray
    """String ids of shape `(n,)`."""

    labels: np.ndarray
    """Integer labels of shape `(n,)`; `-1` where the label is absent."""

    domains: np.ndarray
    """Domain tags of shape `(n,)`, each `'id'` or `'ood'`."""

    logits: np.ndarray
    """Logits of shape `(n, T, K)`."""

    def __post_init__(self):
        n = self.logits.shape[0]
        if self.logits.ndim != 3:
            raise DimensionMismatch(f'Logit dump logits must have shape (n, T, K), got {self.logits.shape}')
        if self.sample_ids.shape != (n,) or self.labels.shape != (n,) or self.domains.shape != (n,):
            raise DimensionMismatch('Logit dump columns must all have one entry per sample')
        if not set(np.unique(self.domains)) <= set(DOMAINS):
            raise DataError(f'Logit dump domains must be one of {DOMAINS}')

    @property
    def passes(self) -> int:
        return self.logits.shape[1]

    @property
    def class_count(self) -> int:
        return self.logits.shape[2]

    def select(self, domain: str) -> 'LogitDump':
        """Returns the rows tagged with the given domain."""
        mask = self.domains == domain
        return LogitDump(
            sample_ids=self.sample_ids[mask],
            labels=self.labels[mask],
            domains=self.domains[mask],
            logits=self.logits[mask],
        )


def _line(row_index: int) -> int:
    # Header is line 1.
    return row_index + 2


def _numeric_column(frame: pd.DataFrame, column: str, *, integer: bool = False,
                    allow_empty: bool = False) -> np.ndarray:
    """Parses a column of string cells, raising ParseError at the first
    cell that is not a (finite) number."""
    cells = frame[column].str.strip()
    values = pd.to_numeric(cells.where(cells != '', np.nan), errors='coerce').to_numpy(dtype=np.float64)
    empty = (cells == '').to_numpy()
    bad = ~np.isfinite(values) & ~(empty & allow_empty)
    if integer:
        bad |= np.isfinite(values) & (values != np.round(values))
    if np.any(bad):
        row_index = int(np.flatnonzero(bad)[0])
        kind = 'an integer' if integer else 'a number'
        raise ParseError(f'expected {kind}, got "{frame[column].iloc[row_index]}"',
                         line=_line(row_index), column=column)
    if integer:
        return np.where(np.isfinite(values), values, -1).astype(np.int64)
    return values


def _domain_column(frame: pd.DataFrame) -> np.ndarray:
    domains = frame['domain'].str.strip().str.lower().to_numpy()
    bad = ~np.isin(domains, DOMAINS)
    if np.any(bad):
        row_index = int(np.flatnonzero(bad)[0])
        raise ParseError(f'domain must be one of {DOMAINS}, got "{frame["domain"].iloc[row_index]}"',
                         line=_line(row_index), column='domain')
    return domains.astype(str)


def _label_column(frame: pd.DataFrame) -> np.ndarray:
    if 'label' not in frame.columns:
        return np.full(len(frame), -1, dtype=np.int64)
    labels = _numeric_column(frame, 'label', integer=True, allow_empty=True)
    if np.any(labels < -1):
        row_index = int(np.flatnonzero(labels < -1)[0])
        raise ParseError('label must be non-negative', line=_line(row_index), column='label')
    return labels


def _require_columns(frame: pd.DataFrame, columns: List[str], schema: str) -> None:
    for column in columns:
        if column not in frame.columns:
            raise SchemaError(f'{schema} file is missing the "{column}" column', column=column)


def _load_features(frame: pd.DataFrame, feature_columns: List[str]) -> LabeledDataset:
    indices = sorted(int(FEATURE_COLUMN_REGEX.fullmatch(column).group(1))  # type: ignore
                     for column in feature_columns)
    if indices != list(range(len(indices))):
        missing = sorted(set(range(max(indices) + 1)) - set(indices))
        raise SchemaError(f'Feature file is missing the "x{missing[0]}" column', column=f'x{missing[0]}')
    features = np.stack([_numeric_column(frame, f'x{i}') for i in indices], axis=1)
    if 'label' not in frame.columns:
        return LabeledDataset(features=features, labels=None, class_count=0)
    labels = _numeric_column(frame, 'label', integer=True)
    if np.any(labels < 0):
        row_index = int(np.flatnonzero(labels < 0)[0])
        raise ParseError('label must be non-negative', line=_line(row_index), column='label')
    return LabeledDataset(features=features, labels=labels, class_count=int(labels.max()) + 1)


def _load_wide_logits(frame: pd.DataFrame, logit_columns: List[str]) -> LogitDump:
    _require_columns(frame, ['domain'], 'Logit')
    positions = [tuple(map(int, WIDE_LOGIT_COLUMN_REGEX.fullmatch(column).groups()))  # type: ignore
                 for column in logit_columns]
    passes = max(t for t, _ in positions) + 1
    classes = max(k for _, k in positions) + 1
    if len(set(positions)) != passes * classes:
        missing = sorted({(t, k) for t in range(passes) for k in range(classes)} - set(positions))
        raise InconsistentShape(f'Wide logit file is missing the "l_{missing[0][0]}_{missing[0][1]}" column')
    logits = np.zeros((len(frame), passes, classes))
    for column, (t, k) in zip(logit_columns, positions):
        logits[:, t, k] = _numeric_column(frame, column)
    sample_ids = (frame['sample_id'].to_numpy(dtype=str) if 'sample_id' in frame.columns
                  else np.arange(len(frame)).astype(str))
    return LogitDump(sample_ids=sample_ids, labels=_label_column(frame),
                     domains=_domain_column(frame), logits=logits)


def _load_long_logits(frame: pd.DataFrame) -> LogitDump:
    _require_columns(frame, ['sample_id', 'domain', 't', 'k', 'value'], 'Logit')
    t = _numeric_column(frame, 't', integer=True)
    k = _numeric_column(frame, 'k', integer=True)
    for name, column in (('t', t), ('k', k)):
        if np.any(column < 0):
            row_index = int(np.flatnonzero(column < 0)[0])
            raise ParseError(f'{name} must be non-negative', line=_line(row_index), column=name)
    values = _numeric_column(frame, 'value')
    labels = _label_column(frame)
    domains = _domain_column(frame)
    codes, sample_ids = pd.factorize(frame['sample_id'])
    passes, classes = int(t.max()) + 1, int(k.max()) + 1
    counts = np.bincount(codes, minlength=len(sample_ids))
    if np.any(counts != passes * classes):
        bad_sample = sample_ids[int(np.flatnonzero(counts != passes * classes)[0])]
        raise InconsistentShape((f'Sample "{bad_sample}" has a different number of logits '
                                 f'than the expected {passes}x{classes}'))
    logits = np.full((len(sample_ids), passes, classes), np.nan)
    logits[codes, t, k] = values
    if np.any(np.isnan(logits)):
        raise InconsistentShape('Logit file repeats some (sample_id, t, k) cells and omits others')
    _, first_rows = np.unique(codes, return_index=True)
    for name, column in (('label', labels), ('domain', domains)):
        if np.any(column != column[first_rows][codes]):
            row_index = int(np.flatnonzero(column != column[first_rows][codes])[0])
            raise InconsistentShape(f'Line {_line(row_index)}: {name} differs from earlier rows of the same sample')
    return LogitDump(
        sample_ids=np.asarray(sample_ids, dtype=str),
        labels=labels[first_rows],
        domains=domains[first_rows],
        logits=logits,
    )


def load_csv(path: str) -> Union[LabeledDataset, LogitDump]:
    """Loads a features or logits CSV file, validating its schema.

    Raises:
        DataError: The file cannot be read.
        ParseError: A cell cannot be parsed (reports line and column).
        SchemaError: A required column is missing.
        InconsistentShape: Rows disagree on the number of passes or classes.

    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except FileNotFoundError:
        raise DataError(f'Data file "{path}" does not exist') from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as ex:
        raise DataError(f'Could not read data file "{path}": {ex}') from None
    frame.columns = [str(column).strip() for column in frame.columns]
    if len(frame) == 0:
        raise DataError(f'Data file "{path}" has no rows')

    if 'value' in frame.columns or ('t' in frame.columns and 'k' in frame.columns):
        return _load_long_logits(frame)
    logit_columns = [column for column in frame.columns if WIDE_LOGIT_COLUMN_REGEX.fullmatch(column)]
    if logit_columns:
        return _load_wide_logits(frame, logit_columns)
    feature_columns = [column for column in frame.columns if FEATURE_COLUMN_REGEX.fullmatch(column)]
    if feature_columns:
        return _load_features(frame, feature_columns)
    raise SchemaError((f'Cannot determine the schema of "{path}": expected feature columns '
                       '"x0,x1,..." or logit columns "sample_id,label,domain,t,k,value"'))


def save_csv(data: Union[LabeledDataset, LogitDump], path: str) -> None:
    """Writes a dataset (features schema) or logit dump (long logits
    schema) so that [`load_csv()`][mcvos.datasets.load_csv] reproduces it."""
    if isinstance(data, LabeledDataset):
        frame = pd.DataFrame(data.features, columns=[f'x{i}' for i in range(data.dim)])
        if data.labels is not None:
            frame['label'] = data.labels
    elif isinstance(data, LogitDump):
        n, passes, classes = data.logits.shape
        sample_index, t, k = np.meshgrid(np.arange(n), np.arange(passes), np.arange(classes), indexing='ij')
        sample_index = sample_index.ravel()
        labels = data.labels[sample_index]
        frame = pd.DataFrame({
            'sample_id': data.sample_ids[sample_index],
            'label': pd.Series(labels, dtype='Int64').mask(labels < 0),
            'domain': data.domains[sample_index],
            't': t.ravel(),
            'k': k.ravel(),
            'value': data.logits.ravel(),
        })
    else:
        raise TypeError(f'Cannot save object of type {type(data).__name__} as CSV')
    frame.to_csv(path, index=False, encoding='utf-8')
