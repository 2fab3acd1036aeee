"""Database interaction layer for storing and retrieving evaluation
results."""

from dataclasses import dataclass
from datetime import datetime
import math
from typing import Any, Dict, List, Optional, Sequence

from playhouse.sqlite_ext import (
    SqliteExtDatabase,
    Model,
    CharField,
    FloatField,
    TimestampField,
    JSONField,
    CompositeKey,
)

from mcvos.metrics import METRIC_COLUMNS, MetricReport


@dataclass(frozen=True)
class RunRecord:
    updated: datetime
    """Timestamp when this run was last recorded."""

    run_key: str
    """Key identifying the run."""

    command: str
    """Command that produced the run, e.g. `eval`."""

    label: str
    """Name of the run in reports."""

    config: Dict[str, Any]
    """Resolved configuration of the run."""


class Database:
    """Stores and fetches evaluation results from an sqlite database."""

    def __init__(self, filepath: str):
        self.filepath = filepath
        self.db = SqliteExtDatabase(self.filepath)

        class BaseModel(Model):
            class Meta:
                database = self.db

            @classmethod
            def get_primary_key_columns(cls):
                return [
                    getattr(cls, column_name)
                    for column_name in self.db.get_primary_keys(cls._meta.table_name)
                ]

        class RunModel(BaseModel):
            class Meta:
                table_name = 'run'

            updated = TimestampField()
            run_key = CharField(primary_key=True)
            command = CharField()
            label = CharField()
            config = JSONField()

        class MetricReportModel(BaseModel):
            class Meta:
                table_name = 'metric_report'
                primary_key = CompositeKey(
                    'run_key',
                    'dataset',
                )

            updated = TimestampField()
            run_key = CharField()
            label = CharField()
            dataset = CharField()
            # null metrics were unavailable for the run.
            fpr95_id = FloatField(null=True)
            auroc = FloatField(null=True)
            aupr_id = FloatField(null=True)
            aupr_ood = FloatField(null=True)
            fpr95_ood = FloatField(null=True)
            accuracy = FloatField(null=True)
            ece = FloatField(null=True)
            ratio_ft = FloatField(null=True)
            ratio_ood_id = FloatField(null=True)

        self.RunModel = RunModel
        self.MetricReportModel = MetricReportModel
        self.tables = [self.RunModel, self.MetricReportModel]

    def initialize(self):
        """Connect to the database and initialize the schema."""
        self.db.connect(reuse_if_open=True)
        self.db.create_tables(self.tables)

    def close(self):
        """Close the database."""
        self.db.close()

    def save_run(self, *, run_key: str, command: str, label: str, config: Dict[str, Any]):
        """Save (or replace) the record of a run."""
        with self.db.atomic():
            (self.RunModel
             .insert(
                 updated=datetime.now(),
                 run_key=run_key,
                 command=command,
                 label=label,
                 config=config,
             )
             .on_conflict(
                 conflict_target=self.RunModel.get_primary_key_columns(),
                 preserve=[
                     self.RunModel.updated,
                     self.RunModel.command,
                     self.RunModel.label,
                     self.RunModel.config,
                 ],
             )
             .execute())

    def save_reports(self, *, run_key: str, reports: Sequence[MetricReport]):
        """Save metric reports of a run, one row per dataset."""
        if len(reports) == 0:
            return
        with self.db.atomic():
            (self.MetricReportModel
             .insert_many([
                 dict(
                     updated=datetime.now(),
                     run_key=run_key,
                     label=report.label,
                     dataset=report.dataset,
                     **{
                         column: (None if math.isnan(getattr(report, column))
                                  else getattr(report, column))
                         for column in METRIC_COLUMNS
                     },
                 )
                 for report in reports
             ])
             .on_conflict(
                 conflict_target=self.MetricReportModel.get_primary_key_columns(),
                 preserve=[
                     self.MetricReportModel.updated,
                     self.MetricReportModel.label,
                     *[getattr(self.MetricReportModel, column) for column in METRIC_COLUMNS],
                 ],
             )
             .execute())

    def get_runs(self, *, labels: Optional[Sequence[str]] = None) -> List[RunRecord]:
        """Returns recorded runs.

        Args:
            labels: If specified, only runs with these labels will be
                returned.

        """
        query = self.RunModel.select().order_by(self.RunModel.run_key)
        if labels is not None:
            query = query.where(self.RunModel.label.in_(labels))
        return [RunRecord(**row) for row in query.dicts()]

    def get_reports(self, *,
                    run_keys: Optional[Sequence[str]] = None,
                    labels: Optional[Sequence[str]] = None) -> List[MetricReport]:
        """Returns recorded metric reports, without histograms.

        Args:
            run_keys: If specified, only reports of these runs will be
                returned.
            labels: If specified, only reports with these labels will be
                returned.

        """
        query = (self.MetricReportModel.select()
                 .order_by(self.MetricReportModel.run_key, self.MetricReportModel.dataset))
        if run_keys is not None:
            query = query.where(self.MetricReportModel.run_key.in_(run_keys))
        if labels is not None:
            query = query.where(self.MetricReportModel.label.in_(labels))
        return [
            MetricReport(
                label=row['label'],
                dataset=row['dataset'],
                **{
                    column: float('nan') if row[column] is None else row[column]
                    for column in METRIC_COLUMNS
                },
            )
            for row in query.dicts()
        ]
