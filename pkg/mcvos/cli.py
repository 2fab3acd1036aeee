"""Command-line interface: `mcvos train`, `mcvos eval`, `mcvos map` and
`mcvos report`.

Every subcommand accepts `--preset`, `--config` and one `--some-key
value` flag per [`RunConfig`][mcvos.config.RunConfig] field. Exit codes
are 0 on success, 2 for configuration or usage errors and 3 for data or
shape errors.
"""

import argparse
from dataclasses import asdict, fields
import os
from typing import Dict, List, Optional, Sequence

import pandas as pd

from mcvos.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mcvos.config import PRESETS, RunConfig, load_config, write_config
from mcvos.core import (
    UncertaintyEvaluator, dataset_name, fit_model, histogram_frame,
    prepare_data, validate_scored, reports_from_scored,
)
from mcvos.datasets import LogitDump, SchemaError, load_csv
from mcvos.maps import Grid, uncertainty_maps, write_maps
from mcvos.metrics import MetricReport, aggregate, format_reports, reports_frame
from mcvos.mlp import EpochLog
from mcvos.utils import ConfigError, DataError, logger

COMMANDS = ('train', 'eval', 'map', 'report')

CHECKPOINT_FILE = 'checkpoint.json'

EPOCH_COLUMNS = [field.name for field in fields(EpochLog)]


def _flag(name: str) -> str:
    return '--' + name.replace('_', '-')


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--preset', default=None, choices=sorted(PRESETS),
                        help='Start from the named preset')
    parser.add_argument('--config', default=None, metavar='PATH',
                        help='Read `key = value` settings from a config file')
    for field in fields(RunConfig):
        if field.name == 'preset':
            continue
        if field.type is bool:
            # A bare flag means true.
            parser.add_argument(_flag(field.name), dest=field.name, default=None,
                                nargs='?', const='true', metavar='BOOL',
                                help=f'(default: {field.default})')
        else:
            parser.add_argument(_flag(field.name), dest=field.name, default=None,
                                metavar=field.name.upper(),
                                help=f'(default: {field.default})')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='mcvos',
        description='Joint aleatoric (MC-Dropout) and epistemic (virtual-outlier energy) uncertainty estimation.',
    )
    subparsers = parser.add_subparsers(dest='command', required=True)
    descriptions = {
        'train': 'Train a model and write its checkpoint and epoch log',
        'eval': 'Score ID and OOD populations and write metric reports',
        'map': 'Write uncertainty maps of a planar model',
        'report': 'Compare scored runs side by side',
    }
    for command in COMMANDS:
        subparser = subparsers.add_parser(command, help=descriptions[command],
                                          description=descriptions[command])
        add_config_arguments(subparser)
        if command == 'report':
            subparser.add_argument('scored', nargs='*', metavar='SCORED_CSV',
                                   help='Scored-sample CSVs written by `mcvos eval`')
            subparser.add_argument('--labels', default=None,
                                   help='Comma-separated run labels, one per scored CSV')
            subparser.add_argument('--from-db', action='store_true',
                                   help='Also include the reports recorded in --db-filepath')
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    names = {field.name for field in fields(RunConfig)} - {'preset'}
    overrides = {name: value for name, value in vars(args).items()
                 if name in names and value is not None}
    return load_config(preset=args.preset, config_path=args.config, overrides=overrides)


def _prepare(config: RunConfig):
    return prepare_data(
        seed=config.seed,
        train_data=config.train_data,
        test_data=config.test_data,
        ood_data=config.ood_data,
        split_fraction=config.split_fraction,
        per_class=config.per_class,
        cluster_radius=config.cluster_radius,
        background_count=config.background_count,
        background_radius=config.background_radius,
        background_bound=config.background_bound,
    )


def _checkpoint_path(config: RunConfig) -> str:
    return config.checkpoint or os.path.join(config.output_dir, CHECKPOINT_FILE)


def _output_path(config: RunConfig, name: str) -> str:
    os.makedirs(config.output_dir, exist_ok=True)
    return os.path.join(config.output_dir, name)


def _write_frame(frame: pd.DataFrame, path: str) -> None:
    frame.to_csv(path, index=False)
    logger.info(f'Wrote {path}')


def _write_text(text: str, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)
    logger.info(f'Wrote {path}')


def cmd_train(config: RunConfig) -> None:
    """Trains a model and writes `checkpoint.json`, `epochs.csv` and the
    resolved `config.txt`."""
    data = _prepare(config)
    train_config = config.train_config()
    model, vos, logs = fit_model(
        data.train, train_config,
        hidden=config.hidden,
        dropout=config.dropout,
        vos_config=config.vos_config() if config.vos else None,
        disable_progress=config.disable_progress,
    )
    checkpoint_path = _output_path(config, CHECKPOINT_FILE)
    save_checkpoint(Checkpoint(model=model, train_config=train_config, vos=vos), checkpoint_path)
    logger.info(f'Wrote {checkpoint_path}')
    _write_frame(pd.DataFrame([log.to_dict() for log in logs], columns=EPOCH_COLUMNS),
                 _output_path(config, 'epochs.csv'))
    config_path = _output_path(config, 'config.txt')
    write_config(config, config_path)
    logger.info(f'Wrote {config_path}')


def _evaluator(config: RunConfig, convention: str) -> UncertaintyEvaluator:
    return UncertaintyEvaluator(
        passes=config.passes,
        score=config.score,
        weights=(config.weight_mi, config.weight_energy),
        convention=convention,
        seed=config.seed,
        max_workers=config.max_workers,
        calibration_bins=config.calibration_bins,
        histogram_bins=config.histogram_bins,
        db_filepath=config.db_filepath,
        disable_progress=config.disable_progress,
    )


def cmd_eval(config: RunConfig) -> List[MetricReport]:
    """Scores the ID test and OOD populations (or a logit dump) and writes
    `scored.csv`, `metrics.csv`, `metrics.txt` and `histogram.csv`."""
    if config.logits:
        dump = load_csv(config.logits)
        if not isinstance(dump, LogitDump):
            raise SchemaError(f'Expected a logits file at "{config.logits}", got features', column='sample_id')
        evaluator = _evaluator(config, config.energy_convention)
        frame = evaluator.score_dump(dump, ood_name=dataset_name(config.logits))
    else:
        checkpoint = load_checkpoint(_checkpoint_path(config))
        data = _prepare(config)
        evaluator = _evaluator(config, checkpoint.energy_convention)
        frame = evaluator.score_datasets(checkpoint.model, data.test, data.ood)
    reports = evaluator.reports(frame, config.run_label)
    _write_frame(frame, _output_path(config, 'scored.csv'))
    table = reports_frame(reports)
    _write_frame(table, _output_path(config, 'metrics.csv'))
    _write_text(format_reports(table), _output_path(config, 'metrics.txt'))
    _write_frame(histogram_frame(reports), _output_path(config, 'histogram.csv'))
    evaluator.record(run_key=f'{config.run_label}/seed-{config.seed}', label=config.run_label,
                     config=asdict(config), reports=reports)
    return reports


def cmd_map(config: RunConfig) -> Dict[str, str]:
    """Writes aleatoric, epistemic and combined maps of a planar model."""
    checkpoint = load_checkpoint(_checkpoint_path(config))
    grid = Grid.over(tuple(config.map_bounds), tuple(config.map_resolution))  # type: ignore[arg-type]
    maps = uncertainty_maps(
        checkpoint.model, grid,
        passes=config.passes,
        seed=config.seed,
        weights=(config.weight_mi, config.weight_energy),
        convention=checkpoint.energy_convention,
        disable_progress=config.disable_progress,
    )
    os.makedirs(config.output_dir, exist_ok=True)
    paths = write_maps(maps, config.output_dir)
    for path in paths.values():
        logger.info(f'Wrote {path}')
    return paths


def _run_label(path: str) -> str:
    """Names a scored CSV after its directory, the output directory of the
    `eval` run that wrote it."""
    directory = os.path.basename(os.path.dirname(os.path.abspath(path)))
    return directory or dataset_name(path)


def cmd_report(config: RunConfig, scored: Sequence[str], labels: Optional[Sequence[str]] = None,
               from_db: bool = False) -> pd.DataFrame:
    """Recomputes the metrics of each scored CSV and writes the per-label
    comparison as `report.csv` and `report.txt`; runs sharing a label are
    combined into mean ± std."""
    if not scored and not from_db:
        raise ConfigError('report needs at least one scored CSV')
    if labels is not None and len(labels) != len(scored):
        raise ConfigError(f'Got {len(labels)} labels for {len(scored)} scored CSVs')
    reports: List[MetricReport] = []
    for index, path in enumerate(scored):
        try:
            frame = pd.read_csv(path, keep_default_na=True)
        except FileNotFoundError:
            raise DataError(f'Scored file "{path}" does not exist') from None
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as ex:
            raise DataError(f'Could not read scored file "{path}": {ex}') from None
        validate_scored(frame, source=f'Scored file "{path}"')
        label = labels[index] if labels is not None else _run_label(path)
        reports.extend(reports_from_scored(frame, label, calibration_bins=config.calibration_bins,
                                           histogram_bins=config.histogram_bins))
    if from_db:
        db = _evaluator(config, config.energy_convention).get_db()
        db.initialize()
        try:
            reports.extend(db.get_reports(labels=labels))
        finally:
            db.close()
    if not reports:
        raise ConfigError(f'No reports found in "{config.db_filepath}"')
    table = aggregate(reports_frame(reports))
    _write_frame(table, _output_path(config, 'report.csv'))
    text = format_reports(table)
    _write_text(text, _output_path(config, 'report.txt'))
    return table


def run(args: argparse.Namespace) -> None:
    config = resolve_config(args)
    if args.command == 'train':
        cmd_train(config)
    elif args.command == 'eval':
        cmd_eval(config)
    elif args.command == 'map':
        cmd_map(config)
    else:
        labels = None if args.labels is None else [label.strip() for label in args.labels.split(',')]
        cmd_report(config, args.scored, labels, from_db=args.from_db)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the `mcvos` command; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except ConfigError as ex:
        logger.error(f'Configuration error: {ex}')
        return 2
    except DataError as ex:
        logger.error(f'Data error: {ex}')
        return 3
    return 0

