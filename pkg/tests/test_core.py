import numpy as np
import pandas as pd
import pytest

from mcvos.core import (
    ID_DATASET,
    SCORED_COLUMNS,
    TOY_OOD_DATASET,
    McDropoutRunner,
    UncertaintyEvaluator,
    fit_model,
    histogram_frame,
    prepare_data,
    reports_from_scored,
    validate_scored,
)
from mcvos.datasets import InconsistentShape, LabeledDataset, LogitDump, save_csv
from mcvos.mcdropout import mc_infer
from mcvos.metrics import AVERAGE_DATASET, EmptyPopulation
from mcvos.mlp import TrainConfig, init_mlp
from mcvos.numerics import RngStream
from mcvos.utils import DataError, DimensionMismatch
from mcvos.vos import VosConfig


def small_model(input_dim=2, class_count=3, seed=0):
    return init_mlp(input_dim, class_count, hidden=(6, 5), dropout=0.3, rng=RngStream(seed))


def test_runner_matches_inline_inference():
    model = small_model()
    x = np.random.default_rng(1).normal(size=(7, 2))
    expected = mc_infer(model, x, 4, RngStream(3, 6))
    for max_workers in (1, 2):
        samples = McDropoutRunner(max_workers=max_workers).run(model, x, 4, RngStream(3, 6))
        np.testing.assert_array_equal(samples.probs, expected.probs)
        np.testing.assert_array_equal(samples.energies, expected.energies)


def test_runner_single_input():
    model = small_model()
    samples = McDropoutRunner().run(model, np.array([0.5, -0.5]), 3, RngStream(0))
    assert samples.probs.shape == (3, 3)
    with pytest.raises(ValueError):
        McDropoutRunner().run(model, np.zeros((1, 2)), 0, RngStream(0))


def test_prepare_toy_data():
    data = prepare_data(seed=0, per_class=20, background_count=30)
    assert data.train.size + data.test.size == 100
    assert data.train.size == 80
    assert data.train.class_count == 5
    assert list(data.ood) == [TOY_OOD_DATASET]
    assert data.ood[TOY_OOD_DATASET].size == 30
    assert data.ood[TOY_OOD_DATASET].labels is None

    again = prepare_data(seed=0, per_class=20, background_count=30)
    np.testing.assert_array_equal(again.train.features, data.train.features)
    np.testing.assert_array_equal(again.ood[TOY_OOD_DATASET].features, data.ood[TOY_OOD_DATASET].features)


def test_prepare_file_data(tmp_path):
    rng = np.random.default_rng(0)
    train = LabeledDataset(features=rng.normal(size=(20, 3)), labels=np.arange(20) % 2, class_count=2)
    far = LabeledDataset(features=rng.normal(size=(5, 3)) + 10, labels=None, class_count=0)
    flat = LabeledDataset(features=rng.normal(size=(5, 2)), labels=None, class_count=0)
    save_csv(train, str(tmp_path / 'train.csv'))
    save_csv(far, str(tmp_path / 'far.csv'))
    save_csv(flat, str(tmp_path / 'flat.csv'))

    data = prepare_data(seed=0, train_data=str(tmp_path / 'train.csv'),
                        ood_data=[str(tmp_path / 'far.csv')], split_fraction=0.5)
    assert data.train.size == 10
    assert data.test.size == 10
    assert list(data.ood) == ['far']

    with pytest.raises(DataError):
        prepare_data(seed=0, train_data=str(tmp_path / 'train.csv'))
    with pytest.raises(DataError):
        prepare_data(seed=0, train_data=str(tmp_path / 'train.csv'),
                     ood_data=[str(tmp_path / 'far.csv'), str(tmp_path / 'far.csv')])
    with pytest.raises(DimensionMismatch):
        prepare_data(seed=0, train_data=str(tmp_path / 'train.csv'),
                     ood_data=[str(tmp_path / 'flat.csv')])


def test_fit_model_standardizes_inputs():
    data = prepare_data(seed=0, per_class=20, background_count=30)
    config = TrainConfig(epochs=2, batch_size=16)
    model, vos, logs = fit_model(data.train, config, hidden=(8,), dropout=0.1)
    assert vos is None
    assert len(logs) == 2
    np.testing.assert_allclose(model.input_shift, data.train.features.mean(axis=0))
    np.testing.assert_allclose(model.input_scale, data.train.features.std(axis=0))

    _, vos, _ = fit_model(data.train, config, hidden=(8,), dropout=0.1,
                          vos_config=VosConfig(candidates=50, warmup_epochs=1))
    assert vos is not None
    assert vos.bank.count(0) > 0


def test_score_datasets():
    data = prepare_data(seed=0, per_class=10, background_count=12)
    model = small_model(class_count=5)
    evaluator = UncertaintyEvaluator(passes=3, score='combined')
    frame = evaluator.score_datasets(model, data.test, data.ood)
    assert list(frame.columns) == SCORED_COLUMNS
    assert SCORED_COLUMNS[:11] == ['sample_id', 'label', 'pred', 'domain', 'mi', 'ekl', 'var', 'entropy',
                                   'energy_mean', 'energy_var', 'combined']
    assert frame.shape[0] == data.test.size + 12
    id_rows = frame[frame['dataset'] == ID_DATASET]
    assert (id_rows['domain'] == 'id').all()
    np.testing.assert_array_equal(id_rows['label'].to_numpy(dtype=np.int64), data.test.labels)
    ood_rows = frame[frame['domain'] == 'ood']
    assert (ood_rows['dataset'] == TOY_OOD_DATASET).all()
    assert ood_rows['label'].isna().all()
    np.testing.assert_array_equal(frame['score'], frame['combined'])
    assert frame['combined'].between(0, 1).all()

    again = UncertaintyEvaluator(passes=3, score='combined').score_datasets(model, data.test, data.ood)
    pd.testing.assert_frame_equal(frame, again)

    reports = evaluator.reports(frame, 'toy')
    assert [report.dataset for report in reports] == [TOY_OOD_DATASET]

    with pytest.raises(DimensionMismatch):
        evaluator.score_datasets(small_model(input_dim=3, class_count=5), data.test, data.ood)


def test_single_pass_is_deterministic():
    data = prepare_data(seed=0, per_class=10, background_count=12)
    model = small_model(class_count=5)
    frame = UncertaintyEvaluator(passes=1, seed=0).score_datasets(model, data.test, data.ood)
    other = UncertaintyEvaluator(passes=1, seed=9).score_datasets(model, data.test, data.ood)
    pd.testing.assert_frame_equal(frame, other)
    np.testing.assert_allclose(frame['mi'], 0, atol=1e-12)


def perfect_dump(passes=2):
    id_logits = np.tile([6.0, 0.0, 0.0], (4, passes, 1))
    ood_logits = np.full((3, passes, 3), 1.0)
    return LogitDump(
        sample_ids=np.array([f's{i}' for i in range(7)]),
        labels=np.array([0, 0, 0, 0, -1, -1, -1]),
        domains=np.array(['id'] * 4 + ['ood'] * 3),
        logits=np.concatenate([id_logits, ood_logits]),
    )


def test_score_dump():
    evaluator = UncertaintyEvaluator(score='energy')
    frame = evaluator.score_dump(perfect_dump(), ood_name='far')
    assert list(frame['dataset']) == [ID_DATASET] * 4 + ['far'] * 3
    reports = evaluator.reports(frame, 'dump')
    assert len(reports) == 1
    report = reports[0]
    assert report.dataset == 'far'
    assert report.fpr95_id == 0.0
    assert report.fpr95_ood == 0.0
    assert report.auroc == 1.0
    assert report.aupr_id == 1.0
    assert report.accuracy == 1.0

    # The ratio convention ranks smaller energy magnitudes as ID.
    ratio = UncertaintyEvaluator(score='energy', convention='ratio')
    assert ratio.reports(ratio.score_dump(perfect_dump(), 'far'), 'dump')[0].auroc == 0.0


def test_reports_with_several_ood_datasets():
    frame = UncertaintyEvaluator().score_dump(perfect_dump(), ood_name='far')
    frame.loc[frame.index[-1], 'dataset'] = 'near'
    reports = reports_from_scored(frame, 'run')
    assert [report.dataset for report in reports] == ['far', 'near', AVERAGE_DATASET]
    assert reports[-1].auroc == 1.0
    assert reports[-1].histogram is None

    histograms = histogram_frame(reports)
    assert list(histograms.columns) == ['dataset', 'bin_low', 'bin_high', 'id_count', 'ood_count',
                                        'id_q05', 'ood_q95']
    assert set(histograms['dataset']) == {'far', 'near'}


def test_scored_csv_round_trip(tmp_path):
    frame = UncertaintyEvaluator().score_dump(perfect_dump(), ood_name='far')
    frame.to_csv(tmp_path / 'scored.csv', index=False)
    loaded = validate_scored(pd.read_csv(tmp_path / 'scored.csv'))
    assert list(loaded['label']) == [0, 0, 0, 0, -1, -1, -1]
    assert reports_from_scored(loaded, 'run')[0].auroc == 1.0


def test_scored_frame_errors():
    frame = UncertaintyEvaluator().score_dump(perfect_dump(), ood_name='far')
    with pytest.raises(InconsistentShape):
        validate_scored(frame.drop(columns=['confidence']))
    with pytest.raises(EmptyPopulation):
        reports_from_scored(frame[frame['domain'] == 'id'], 'run')


def test_record(tmp_path):
    db_filepath = str(tmp_path / 'results.sqlite3')
    evaluator = UncertaintyEvaluator(db_filepath=db_filepath)
    reports = evaluator.reports(evaluator.score_dump(perfect_dump(), ood_name='far'), 'dump')
    evaluator.record(run_key='dump/seed-0', label='dump', config={'seed': 0}, reports=reports)

    db = evaluator.get_db()
    db.initialize()
    try:
        [run] = db.get_runs()
        assert run.run_key == 'dump/seed-0'
        assert run.config == {'seed': 0}
        [stored] = db.get_reports()
        assert stored.dataset == 'far'
        assert stored.auroc == 1.0
    finally:
        db.close()
