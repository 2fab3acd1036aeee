"""Top-level components for preparing data, training models, running MC
passes in parallel and evaluating uncertainty scores."""

import concurrent.futures
from dataclasses import dataclass
import os
import signal
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from .utils import logger, DataError, DimensionMismatch, get_duplicates
from .numerics import RngStream
from .datasets import (
    InconsistentShape, LabeledDataset, LogitDump, SchemaError,
    default_cluster_covariances, default_cluster_means,
    load_csv, make_background, make_clusters, split,
)
from .mlp import EpochLog, MlpModel, TrainConfig, init_mlp, train
from .vos import DEFAULT_CONVENTION, VosConfig, VosState
from .mcdropout import (
    McSamples, McSummary,
    combined_score, deterministic_samples, epistemic_score,
    mc_pass, samples_from_logits, stack_passes, summarize,
)
from .metrics import (
    AVERAGE_DATASET, EmptyPopulation, MetricReport, ScoredPopulations,
    average_reports, build_report,
)
from .database import Database

# Stream ids under the run seed.
CLUSTER_STREAM = 1
SPLIT_STREAM = 2
BACKGROUND_STREAM = 3
INIT_STREAM = 4
TRAIN_STREAM = 5
EVAL_STREAM = 6

ID_DATASET = 'id'
TOY_OOD_DATASET = 'background'

SCORED_COLUMNS = [
    'sample_id', 'label', 'pred', 'domain',
    'mi', 'ekl', 'var', 'entropy', 'energy_mean', 'energy_var', 'combined',
    'dataset', 'score', 'confidence',
]
"""Columns of a scored-sample CSV, one row per evaluated input."""


@dataclass(frozen=True)
class PassJob:
    index: int
    callback: Callable[[concurrent.futures.Future], None]


class McDropoutRunner:
    """Executes the T stochastic passes of MC-Dropout inference, inline or
    spread over worker processes.

    Pass `t` draws its dropout masks from `rng.child(t)` and results are
    stacked in pass order, so every schedule yields identical samples.

    """

    def __init__(self, *, max_workers: Optional[int] = 1):
        """
        Args:
            max_workers: The maximum number of parallel worker processes.
                Passes run in the calling process when 1. `None` uses one
                worker per CPU.
        """
        self.max_workers = max_workers or os.cpu_count() or 1

    def handle_failure(self, *, ex: Exception, message: str):
        """Callback to handle exceptions raised in runner subprocesses."""
        # Simplify subprocess error tracebacks by reporting the cause directly.
        if isinstance(ex.__cause__, concurrent.futures.process._RemoteTraceback):
            ex = ex.__cause__
        logger.error(f'{message}')
        # Simplify traceback by clearing the exception chain.
        raise ex from None

    def get_executor(self) -> concurrent.futures.ProcessPoolExecutor:
        """Returns a multi-processing executor for running MC passes."""

        def init_worker():
            # Ignore keyboard interrupts in subprocesses.
            signal.signal(signal.SIGINT, signal.SIG_IGN)

        return concurrent.futures.ProcessPoolExecutor(
            max_workers=self.max_workers,
            initializer=init_worker,
        )

    def handle_pass_future(self, future: concurrent.futures.Future) -> None:
        job = self.future_to_job[future]
        try:
            self.pass_logits[job.index] = future.result()
        except Exception as ex:
            self.handle_failure(ex=ex, message=f'Failed to run MC pass {job.index}')
        self.pbar.update(1)

    def submit_passes(self, model: MlpModel, x: np.ndarray, rng: RngStream) -> None:
        """Submit pending passes until all workers are occupied."""
        while len(self.future_to_job) < self.max_workers and self.next_index < self.passes:
            future = self.executor.submit(mc_pass, model, x, rng.child(self.next_index))
            self.future_to_job[future] = PassJob(index=self.next_index, callback=self.handle_pass_future)
            self.next_index += 1

    def run(self, model: MlpModel, x: np.ndarray, passes: int, rng: RngStream, *,
            disable_progress: bool = True) -> McSamples:
        """Runs `passes` stochastic forward passes over `x` (shape `(d,)` or
        `(n, d)`)."""
        if passes < 1:
            raise ValueError(f'MC inference needs at least one pass, got {passes}')
        x = np.asarray(x, dtype=np.float64)
        batch = np.atleast_2d(x)
        self.passes = passes
        self.pass_logits: Dict[int, np.ndarray] = {}
        self.pbar = tqdm(desc='MC passes', unit='passes', total=passes, disable=disable_progress)

        with logging_redirect_tqdm(loggers=[logger]):
            try:
                if self.max_workers == 1:
                    for t in range(passes):
                        self.pass_logits[t] = mc_pass(model, batch, rng.child(t))
                        self.pbar.update(1)
                else:
                    self.executor = self.get_executor()
                    self.future_to_job: Dict[concurrent.futures.Future, PassJob] = {}
                    self.next_index = 0
                    try:
                        while True:
                            self.submit_passes(model, batch, rng)
                            if len(self.future_to_job) == 0:
                                break
                            done, _ = concurrent.futures.wait(
                                self.future_to_job,
                                return_when=concurrent.futures.FIRST_COMPLETED,
                            )
                            for future in done:
                                self.future_to_job[future].callback(future)
                            self.future_to_job = {future: job for future, job in self.future_to_job.items()
                                                  if future not in done}
                    except KeyboardInterrupt:
                        logger.info('Interrupted')
                        raise
                    finally:
                        for future in self.future_to_job:
                            future.cancel()
                        self.executor.shutdown()
            finally:
                self.pbar.close()
        return stack_passes(tuple(self.pass_logits[t] for t in range(passes)), single=x.ndim == 1)


@dataclass(frozen=True, eq=False)
class TaskData:
    """Training, ID test and OOD populations of a run."""

    train: LabeledDataset
    test: LabeledDataset
    ood: Dict[str, LabeledDataset]


def _load_features(path: str) -> LabeledDataset:
    data = load_csv(path)
    if not isinstance(data, LabeledDataset):
        raise SchemaError(f'Expected a features file at "{path}", got logits')
    return data


def dataset_name(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def prepare_data(*, seed: int, train_data: str = '', test_data: str = '',
                 ood_data: Sequence[str] = (), split_fraction: float = 0.8,
                 per_class: int = 500, cluster_radius: float = 4.0,
                 background_count: int = 1000, background_radius: float = 3.0,
                 background_bound: float = 8.0) -> TaskData:
    """Loads or generates the populations of a run.

    Without `train_data` the toy task is generated: five unit-covariance
    clusters (one at the origin, four on a circle), split per class, with
    a uniform background population outside every cluster's
    `background_radius` ellipse as the OOD set.

    """
    toy = not train_data
    if toy:
        means = default_cluster_means(cluster_radius)
        covariances = default_cluster_covariances(means.shape[0], means.shape[1])
        full = make_clusters(means, covariances, per_class, RngStream(seed, CLUSTER_STREAM))
    else:
        full = _load_features(train_data)
        if full.labels is None:
            raise SchemaError(f'Training file "{train_data}" has no label column', column='label')

    if test_data:
        train_ds, test_ds = full, _load_features(test_data)
    else:
        indices = split(full, split_fraction, RngStream(seed, SPLIT_STREAM))
        train_ds, test_ds = full.subset(indices.train_ids), full.subset(indices.test_ids)

    ood: Dict[str, LabeledDataset] = {}
    for path in ood_data:
        ood[dataset_name(path)] = _load_features(path)
    duplicates = get_duplicates([dataset_name(path) for path in ood_data])
    if duplicates:
        raise DataError(f'OOD datasets must have distinct file names, got "{duplicates[0]}" twice')
    if not ood and toy:
        features = make_background(
            background_count, means, covariances,
            bounds=[(-background_bound, background_bound)] * means.shape[1],
            rng=RngStream(seed, BACKGROUND_STREAM), radius=background_radius,
        )
        ood[TOY_OOD_DATASET] = LabeledDataset(features=features, labels=None, class_count=0)
    if not ood:
        raise DataError('No OOD dataset given; please pass at least one OOD features file')
    for name, ds in [('test', test_ds), *ood.items()]:
        if ds.dim != train_ds.dim:
            raise DimensionMismatch(f'Dataset "{name}" has dimension {ds.dim}, expected {train_ds.dim}')
    return TaskData(train=train_ds, test=test_ds, ood=ood)


def fit_model(ds: LabeledDataset, config: TrainConfig, *, hidden: Sequence[int] = (64, 64),
              dropout: float = 0.1, vos_config: Optional[VosConfig] = None,
              disable_progress: bool = True) -> Tuple[MlpModel, Optional[VosState], List[EpochLog]]:
    """Initializes an MLP standardized to `ds` and trains it, with virtual
    outliers when `vos_config` is given."""
    if ds.labels is None:
        raise DataError('Cannot train on an unlabeled dataset')
    scale = ds.features.std(axis=0)
    model = init_mlp(
        ds.dim, ds.class_count, hidden=hidden, dropout=dropout,
        rng=RngStream(config.seed, INIT_STREAM),
        input_shift=ds.features.mean(axis=0),
        input_scale=np.where(scale < 1e-12, 1.0, scale),
    )
    vos = None if vos_config is None else VosState(model.class_count, model.feature_dim, vos_config)
    model, logs = train(model, ds, config, vos, RngStream(config.seed, TRAIN_STREAM),
                        disable_progress=disable_progress)
    return model, vos, logs


class UncertaintyEvaluator:
    """Scores ID and OOD populations with MC-Dropout summaries and builds
    metric reports from the scores.

    Populations are evaluated together as one batch for the min-max
    scaling of the combined score.

    """

    def __init__(self, *,
                 passes: int = 10,
                 score: str = 'energy',
                 weights: Tuple[float, float] = (0.5, 0.5),
                 convention: str = DEFAULT_CONVENTION,
                 seed: int = 0,
                 max_workers: Optional[int] = 1,
                 calibration_bins: int = 15,
                 histogram_bins: int = 20,
                 db_filepath: str = ':memory:',
                 disable_progress: bool = True):
        """
        Args:
            passes: MC-Dropout passes T; 1 evaluates the deterministic forward.
            score: Detection score of the `score` column: `energy`, `mi` or
                `combined`.
            weights: `(w_MI, w_E)` of the combined score.
            convention: Energy convention the model was trained with.
            seed: Seed of the MC pass streams.
            max_workers: Worker processes for MC passes.
            calibration_bins: Bins of the expected calibration error.
            histogram_bins: Bins of the score histograms.
            db_filepath: Path to an sqlite database file for persisting
                results. Defaults to a non-persistent in-memory database.
            disable_progress: If `True`, do not display tqdm progress bars.

        """
        if passes < 1:
            raise ValueError(f'Cannot instantiate UncertaintyEvaluator with passes={passes}')
        if score not in ('energy', 'mi', 'combined'):
            raise ValueError(f'Cannot instantiate UncertaintyEvaluator with unknown score "{score}"')
        self.passes = passes
        self.score = score
        self.weights = weights
        self.convention = convention
        self.seed = seed
        self.calibration_bins = calibration_bins
        self.histogram_bins = histogram_bins
        self.db_filepath = db_filepath
        self.disable_progress = disable_progress
        self._runner = McDropoutRunner(max_workers=max_workers)

    def get_db(self) -> Database:
        """Returns the Database that persists evaluation results."""
        return Database(self.db_filepath)

    def samples(self, model: MlpModel, x: np.ndarray, population_index: int) -> McSamples:
        if self.passes == 1:
            return deterministic_samples(model, x)
        rng = RngStream(self.seed, EVAL_STREAM).child(population_index)
        return self._runner.run(model, x, self.passes, rng, disable_progress=self.disable_progress)

    def detection_scores(self, summary: McSummary) -> Tuple[np.ndarray, np.ndarray]:
        """The combined score and the configured detection score of each
        row of a batch summary."""
        combined = combined_score(summary, self.weights, convention=self.convention)
        if self.score == 'energy':
            return combined, epistemic_score(summary.energy_mean, self.convention)
        if self.score == 'mi':
            return combined, summary.mi
        return combined, combined

    def score_frame(self, summary: McSummary, *, sample_ids: np.ndarray, labels: np.ndarray,
                    domains: np.ndarray, datasets: np.ndarray) -> pd.DataFrame:
        combined, score = self.detection_scores(summary)
        return pd.DataFrame({
            'sample_id': sample_ids,
            'label': pd.Series(labels, dtype='Int64').mask(labels < 0),
            'pred': summary.predicted,
            'domain': domains,
            'mi': summary.mi,
            'ekl': summary.ekl,
            'var': summary.variance,
            'entropy': summary.entropy,
            'energy_mean': summary.energy_mean,
            'energy_var': summary.energy_var,
            'combined': combined,
            'dataset': datasets,
            'score': score,
            'confidence': summary.confidence,
        }, columns=SCORED_COLUMNS)

    def score_datasets(self, model: MlpModel, test: LabeledDataset,
                       ood: Dict[str, LabeledDataset]) -> pd.DataFrame:
        """Scores the ID test population and every OOD population."""
        populations = [(ID_DATASET, 'id', test), *((name, 'ood', ds) for name, ds in ood.items())]
        summaries, sample_ids, labels, domains, datasets = [], [], [], [], []
        for index, (name, domain, ds) in enumerate(populations):
            if ds.dim != model.input_dim:
                raise DimensionMismatch(f'Dataset "{name}" has dimension {ds.dim}, the model expects {model.input_dim}')
            logger.info(f'Scoring {ds.size} samples of "{name}" with {self.passes} pass(es)')
            summaries.append(summarize(self.samples(model, ds.features, index)))
            sample_ids.append(np.array([f'{name}-{i}' for i in range(ds.size)]))
            labels.append(ds.labels if (ds.labels is not None and domain == 'id')
                          else np.full(ds.size, -1, dtype=np.int64))
            domains.append(np.full(ds.size, domain))
            datasets.append(np.full(ds.size, name))
        if test.labels is not None and test.class_count > model.class_count:
            raise DimensionMismatch(f'Test labels reach class {test.class_count - 1}, the model has {model.class_count} classes')
        return self.score_frame(
            concat_summaries(summaries),
            sample_ids=np.concatenate(sample_ids),
            labels=np.concatenate(labels),
            domains=np.concatenate(domains),
            datasets=np.concatenate(datasets),
        )

    def score_dump(self, dump: LogitDump, ood_name: str = 'ood') -> pd.DataFrame:
        """Scores an externally produced logit dump; its T passes are
        aggregated directly."""
        summary = summarize(samples_from_logits(dump.logits))
        return self.score_frame(
            summary,
            sample_ids=dump.sample_ids,
            labels=dump.labels,
            domains=dump.domains,
            datasets=np.where(dump.domains == 'id', ID_DATASET, ood_name),
        )

    def reports(self, frame: pd.DataFrame, label: str) -> List[MetricReport]:
        return reports_from_scored(frame, label, calibration_bins=self.calibration_bins,
                                   histogram_bins=self.histogram_bins)

    def record(self, *, run_key: str, label: str, config: Dict, reports: Sequence[MetricReport]) -> None:
        """Save the run and its reports in the results database."""
        db = self.get_db()
        logger.info(f'Recording results in {db.filepath}')
        db.initialize()
        try:
            db.save_run(run_key=run_key, command='eval', label=label, config=config)
            db.save_reports(run_key=run_key, reports=reports)
        finally:
            db.close()


def concat_summaries(summaries: Sequence[McSummary]) -> McSummary:
    return McSummary(**{
        name: np.concatenate([getattr(summary, name) for summary in summaries])
        for name in McSummary.__dataclass_fields__
    })


def validate_scored(frame: pd.DataFrame, source: str = 'scored frame') -> pd.DataFrame:
    """Checks a scored-sample frame's columns and parses its label column.

    Raises:
        InconsistentShape: The columns differ from the scored-sample schema.

    """
    if list(frame.columns) != SCORED_COLUMNS:
        raise InconsistentShape((f'{source} has columns {list(frame.columns)}, '
                                 f'expected {SCORED_COLUMNS}'))
    frame = frame.copy()
    frame['label'] = pd.to_numeric(frame['label'], errors='coerce').fillna(-1).astype(np.int64)
    return frame


def reports_from_scored(frame: pd.DataFrame, label: str, *, calibration_bins: int = 15,
                        histogram_bins: int = 20) -> List[MetricReport]:
    """One report per OOD dataset of a scored frame, followed by their
    average when there are several.

    Raises:
        InconsistentShape: The frame is not a scored-sample frame.
        EmptyPopulation: The frame has no ID or no OOD rows.

    """
    frame = validate_scored(frame)
    id_rows = frame[frame['domain'] == 'id']
    ood_rows = frame[frame['domain'] == 'ood']
    if id_rows.shape[0] == 0 or ood_rows.shape[0] == 0:
        raise EmptyPopulation((f'Scored frame needs ID and OOD rows, got {id_rows.shape[0]} ID '
                               f'and {ood_rows.shape[0]} OOD rows'))
    reports = []
    for dataset in pd.unique(ood_rows['dataset']):
        rows = ood_rows[ood_rows['dataset'] == dataset]
        reports.append(build_report(
            ScoredPopulations(id_scores=id_rows['score'].to_numpy(), ood_scores=rows['score'].to_numpy()),
            label=label,
            dataset=str(dataset),
            id_labels=id_rows['label'].to_numpy(),
            id_predicted=id_rows['pred'].to_numpy(),
            id_confidence=id_rows['confidence'].to_numpy(),
            id_mi=id_rows['mi'].to_numpy(),
            ood_mi=rows['mi'].to_numpy(),
            calibration_bins=calibration_bins,
            histogram_bins=histogram_bins,
        ))
    if len(reports) > 1:
        reports.append(average_reports(reports, AVERAGE_DATASET))
    return reports


def histogram_frame(reports: Sequence[MetricReport]) -> pd.DataFrame:
    """Histogram bins and quantile markers of each report, one row per bin."""
    frames = []
    for report in reports:
        if report.histogram is None:
            continue
        frame = report.histogram.to_frame()
        frame.insert(0, 'dataset', report.dataset)
        frame['id_q05'] = report.histogram.id_quantile
        frame['ood_q95'] = report.histogram.ood_quantile
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)

