import numpy as np
import pytest

from mcvos.datasets import (
    ClassTooSmall,
    InconsistentShape,
    LabeledDataset,
    LogitDump,
    ParseError,
    SchemaError,
    default_cluster_covariances,
    default_cluster_means,
    load_csv,
    make_background,
    make_clusters,
    save_csv,
    split,
)
from mcvos.numerics import GaussianParams, RngStream, mahalanobis_sq
from mcvos.utils import DataError, DimensionMismatch


def toy_dataset(per_class=10, seed=0):
    means = default_cluster_means()
    return make_clusters(means, default_cluster_covariances(), per_class, RngStream(seed, 1))


def test_default_cluster_means():
    means = default_cluster_means(radius=4.0)
    assert means.shape == (5, 2)
    np.testing.assert_array_equal(means[0], [0.0, 0.0])
    np.testing.assert_allclose(np.linalg.norm(means[1:], axis=1), 4.0)
    np.testing.assert_allclose(means[1], [4.0, 0.0], atol=1e-12)


def test_make_clusters():
    ds = toy_dataset(per_class=20)
    assert ds.size == 100
    assert ds.dim == 2
    assert ds.class_count == 5
    np.testing.assert_array_equal(np.bincount(ds.labels), [20] * 5)
    np.testing.assert_array_equal(ds.features, toy_dataset(per_class=20).features)
    assert not np.array_equal(ds.features, toy_dataset(per_class=20, seed=1).features)


def test_make_clusters_needs_two_classes():
    with pytest.raises(ValueError):
        make_clusters(np.zeros((1, 2)), np.eye(2)[None], 10, RngStream(0))
    with pytest.raises(DimensionMismatch):
        make_clusters(np.zeros((2, 2)), np.stack([np.eye(3)] * 2), 10, RngStream(0))


def test_make_background():
    means = default_cluster_means()
    covariances = default_cluster_covariances()
    points = make_background(200, means, covariances, bounds=[(-8.0, 8.0)] * 2,
                             rng=RngStream(0, 3), radius=3.0)
    assert points.shape == (200, 2)
    assert np.all(np.abs(points) <= 8.0)
    for mean, covariance in zip(means, covariances):
        g = GaussianParams.from_moments(mean, covariance, regularize=False)
        assert np.all(mahalanobis_sq(points, g) >= 9.0)


def test_make_background_impossible():
    with pytest.raises(DataError):
        make_background(10, np.zeros((1, 2)), np.eye(2)[None], bounds=[(-1.0, 1.0)] * 2,
                        rng=RngStream(0), radius=3.0, max_rounds=3)


def test_split():
    ds = toy_dataset(per_class=10)
    indices = split(ds, 0.8, RngStream(0, 2))
    assert indices.train_ids.shape == (40,)
    assert indices.test_ids.shape == (10,)
    assert set(indices.train_ids).isdisjoint(indices.test_ids)
    np.testing.assert_array_equal(np.sort(np.concatenate([indices.train_ids, indices.test_ids])),
                                  np.arange(50))
    np.testing.assert_array_equal(np.bincount(ds.labels[indices.train_ids]), [8] * 5)
    np.testing.assert_array_equal(indices.train_ids, split(ds, 0.8, RngStream(0, 2)).train_ids)


def test_split_keeps_both_sides():
    ds = toy_dataset(per_class=2)
    indices = split(ds, 0.99, RngStream(0))
    np.testing.assert_array_equal(np.bincount(ds.labels[indices.test_ids]), [1] * 5)


def test_split_class_too_small():
    ds = LabeledDataset(features=np.zeros((3, 2)), labels=np.array([0, 0, 1]), class_count=2)
    with pytest.raises(ClassTooSmall):
        split(ds, 0.5, RngStream(0))


def test_dataset_validation():
    with pytest.raises(DimensionMismatch):
        LabeledDataset(features=np.zeros((3, 2)), labels=np.array([0, 1]), class_count=2)
    with pytest.raises(DataError):
        LabeledDataset(features=np.zeros((2, 2)), labels=np.array([0, 2]), class_count=2)
    with pytest.raises(DataError):
        LabeledDataset(features=np.array([[0.0, np.inf]]), labels=None, class_count=0)


def test_features_csv(tmp_path):
    path = tmp_path / 'train.csv'
    ds = toy_dataset(per_class=3)
    save_csv(ds, str(path))
    loaded = load_csv(str(path))
    assert isinstance(loaded, LabeledDataset)
    np.testing.assert_allclose(loaded.features, ds.features, rtol=1e-14)
    np.testing.assert_array_equal(loaded.labels, ds.labels)
    assert loaded.class_count == 5


def test_unlabeled_features_csv(tmp_path):
    path = tmp_path / 'ood.csv'
    path.write_text('x0,x1\n1.5,2\n-3,4e-1\n')
    loaded = load_csv(str(path))
    assert isinstance(loaded, LabeledDataset)
    assert loaded.labels is None
    np.testing.assert_array_equal(loaded.features, [[1.5, 2.0], [-3.0, 0.4]])


def test_features_csv_errors(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text('x0,x1,label\n1,2,0\n1,oops,1\n')
    with pytest.raises(ParseError) as info:
        load_csv(str(path))
    assert info.value.line == 3
    assert info.value.column == 'x1'

    path.write_text('x0,x2,label\n1,2,0\n')
    with pytest.raises(SchemaError) as schema_info:
        load_csv(str(path))
    assert schema_info.value.column == 'x1'

    path.write_text('a,b\n1,2\n')
    with pytest.raises(SchemaError):
        load_csv(str(path))

    with pytest.raises(DataError):
        load_csv(str(tmp_path / 'missing.csv'))


def test_long_logits_csv(tmp_path):
    path = tmp_path / 'dump.csv'
    path.write_text('\n'.join([
        'sample_id,label,domain,t,k,value',
        'a,1,id,0,0,0.5',
        'a,1,id,0,1,1.5',
        'a,1,id,1,0,0.25',
        'a,1,id,1,1,2.0',
        'b,,ood,0,0,-1',
        'b,,ood,0,1,0',
        'b,,ood,1,1,3',
        'b,,ood,1,0,1',
    ]) + '\n')
    dump = load_csv(str(path))
    assert isinstance(dump, LogitDump)
    assert dump.passes == 2
    assert dump.class_count == 2
    np.testing.assert_array_equal(dump.sample_ids, ['a', 'b'])
    np.testing.assert_array_equal(dump.labels, [1, -1])
    np.testing.assert_array_equal(dump.domains, ['id', 'ood'])
    np.testing.assert_array_equal(dump.logits[1], [[-1.0, 0.0], [1.0, 3.0]])
    assert dump.select('ood').sample_ids.tolist() == ['b']

    copy = tmp_path / 'copy.csv'
    save_csv(dump, str(copy))
    reloaded = load_csv(str(copy))
    np.testing.assert_array_equal(reloaded.logits, dump.logits)
    np.testing.assert_array_equal(reloaded.labels, dump.labels)


def test_wide_logits_csv(tmp_path):
    path = tmp_path / 'wide.csv'
    path.write_text('sample_id,label,l_0_0,l_0_1,domain\ns1,0,2.0,1.0,id\ns2,,0.0,0.5,ood\n')
    dump = load_csv(str(path))
    assert isinstance(dump, LogitDump)
    assert dump.logits.shape == (2, 1, 2)
    np.testing.assert_array_equal(dump.labels, [0, -1])


def test_logits_csv_errors(tmp_path):
    path = tmp_path / 'dump.csv'
    path.write_text('sample_id,label,t,k,value\na,0,0,0,1.0\n')
    with pytest.raises(SchemaError) as info:
        load_csv(str(path))
    assert info.value.column == 'domain'

    path.write_text('sample_id,label,domain,t,k,value\na,0,id,0,0,1\na,0,id,0,1,1\nb,0,id,0,0,1\n')
    with pytest.raises(InconsistentShape):
        load_csv(str(path))

    path.write_text('sample_id,label,domain,t,k,value\na,0,elsewhere,0,0,1\n')
    with pytest.raises(ParseError) as parse_info:
        load_csv(str(path))
    assert parse_info.value.column == 'domain'
