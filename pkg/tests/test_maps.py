import logging

import numpy as np
import pandas as pd
import pytest

from mcvos.maps import (
    MAP_NAMES,
    Grid,
    NonPlanarModel,
    map_frame,
    pgm_intensities,
    uncertainty_maps,
    write_maps,
    write_pgm,
)
from mcvos.mlp import Layer, init_mlp
from mcvos.numerics import RngStream


def planar_model(dropout=0.3):
    return init_mlp(2, 3, hidden=(8,), dropout=dropout, rng=RngStream(0))


def test_grid_centres():
    grid = Grid.over((-2.0, 2.0, 0.0, 1.0), (4, 2))
    np.testing.assert_allclose(grid.xs, [-1.5, -0.5, 0.5, 1.5])
    np.testing.assert_allclose(grid.ys, [0.25, 0.75])
    assert grid.shape == (2, 4)
    np.testing.assert_allclose(grid.row(1), [[-1.5, 0.75], [-0.5, 0.75], [0.5, 0.75], [1.5, 0.75]])

    single = Grid.over((0.0, 2.0, 0.0, 4.0), (1, 1))
    np.testing.assert_allclose(single.xs, [1.0])
    np.testing.assert_allclose(single.ys, [2.0])


@pytest.mark.parametrize('bounds, resolution', [
    ((1.0, 1.0, 0.0, 1.0), (2, 2)),
    ((0.0, 1.0, 1.0, 0.0), (2, 2)),
    ((0.0, 1.0, 0.0, 1.0), (0, 2)),
])
def test_invalid_grid(bounds, resolution):
    with pytest.raises(ValueError):
        Grid.over(bounds, resolution)


def test_uncertainty_maps():
    grid = Grid.over((-3.0, 3.0, -3.0, 3.0), (5, 4))
    maps = uncertainty_maps(planar_model(), grid, passes=4, seed=1)
    for name in MAP_NAMES:
        assert maps.get(name).shape == (4, 5)
    assert np.all(maps.aleatoric >= -1e-12)
    # Negated energy magnitudes.
    assert np.all(maps.epistemic <= 0)
    assert np.all((maps.combined >= 0) & (maps.combined <= 1))

    again = uncertainty_maps(planar_model(), grid, passes=4, seed=1)
    np.testing.assert_array_equal(again.combined, maps.combined)
    with pytest.raises(ValueError):
        maps.get('total')


def test_single_pass_map_has_no_aleatoric_uncertainty():
    grid = Grid.over((-1.0, 1.0, -1.0, 1.0), (3, 3))
    maps = uncertainty_maps(planar_model(), grid, passes=1)
    np.testing.assert_allclose(maps.aleatoric, 0, atol=1e-12)


def test_flat_model_gives_flat_maps(caplog):
    model = planar_model(dropout=0.0)
    model = model.with_layers([Layer(weight=np.zeros(layer.shape), bias=np.zeros(layer.shape[1]))
                               for layer in model.layers])
    grid = Grid.over((-1.0, 1.0, -1.0, 1.0), (3, 2))
    with caplog.at_level(logging.WARNING, logger='mcvos'):
        maps = uncertainty_maps(model, grid, passes=3)
    np.testing.assert_allclose(maps.aleatoric, 0, atol=1e-12)
    np.testing.assert_allclose(maps.epistemic, -np.log(3))
    np.testing.assert_array_equal(maps.combined, np.zeros((2, 3)))
    assert 'constant' in caplog.text


def test_non_planar_model():
    model = init_mlp(3, 2, hidden=(4,), rng=RngStream(0))
    with pytest.raises(NonPlanarModel):
        uncertainty_maps(model, Grid.over((0.0, 1.0, 0.0, 1.0), (2, 2)))


def test_map_frame_order():
    grid = Grid.over((0.0, 3.0, 0.0, 2.0), (3, 2))
    values = np.arange(6.0).reshape(2, 3)
    frame = map_frame(grid, values)
    assert list(frame.columns) == ['x', 'y', 'value']
    np.testing.assert_allclose(frame['x'], [0.5, 1.5, 2.5, 0.5, 1.5, 2.5])
    np.testing.assert_allclose(frame['y'], [0.5, 0.5, 0.5, 1.5, 1.5, 1.5])
    np.testing.assert_allclose(frame['value'], np.arange(6.0))


def test_pgm_intensities():
    np.testing.assert_array_equal(pgm_intensities(np.array([[0.0, 0.5, 1.0]])), [[0, 128, 255]])
    np.testing.assert_array_equal(pgm_intensities(np.array([[-2.0, 2.0]])), [[0, 255]])
    np.testing.assert_array_equal(pgm_intensities(np.full((2, 2), 7.0)), np.zeros((2, 2)))


def test_write_pgm(tmp_path):
    path = tmp_path / 'map.pgm'
    write_pgm(np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 6.0]]), str(path))
    data = path.read_bytes()
    header = b'P5\n3 2\n255\n'
    assert data.startswith(header)
    # The highest y row comes first.
    assert list(data[len(header):]) == [128, 170, 255, 0, 42, 85]


def test_write_maps(tmp_path):
    grid = Grid.over((-1.0, 1.0, -1.0, 1.0), (3, 2))
    maps = uncertainty_maps(planar_model(), grid, passes=2)
    paths = write_maps(maps, str(tmp_path))
    assert sorted(paths) == sorted(f'{name}.{ext}' for name in MAP_NAMES for ext in ('csv', 'pgm'))
    frame = pd.read_csv(paths['combined.csv'])
    assert frame.shape == (6, 3)
    np.testing.assert_allclose(frame['value'], maps.combined.ravel())
    assert (tmp_path / 'aleatoric.pgm').read_bytes().startswith(b'P5\n3 2\n255\n')


def test_single_cell_grid(tmp_path):
    grid = Grid.over((-1.0, 1.0, -1.0, 1.0), (1, 1))
    maps = uncertainty_maps(planar_model(), grid, passes=3)
    assert maps.combined.shape == (1, 1)
    paths = write_maps(maps, str(tmp_path))
    assert (tmp_path / 'combined.pgm').read_bytes() == b'P5\n1 1\n255\n\x00'
    assert pd.read_csv(paths['aleatoric.csv']).shape == (1, 3)
