from .core import (
    ClassTooSmall, LabeledDataset, SplitIndices,
    default_cluster_covariances, default_cluster_means,
    make_background, make_clusters, split,
)
from .files import InconsistentShape, LogitDump, ParseError, SchemaError, load_csv, save_csv

__all__ = [
    'ClassTooSmall',
    'LabeledDataset',
    'SplitIndices',
    'default_cluster_covariances',
    'default_cluster_means',
    'make_background',
    'make_clusters',
    'split',
    'InconsistentShape',
    'LogitDump',
    'ParseError',
    'SchemaError',
    'load_csv',
    'save_csv',
]
