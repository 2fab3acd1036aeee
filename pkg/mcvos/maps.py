"""Uncertainty maps of planar models: aleatoric (MI), epistemic and
combined uncertainty evaluated on a regular grid, written as `x,y,value`
CSVs and grayscale portable graymaps."""

from dataclasses import dataclass
import os
from typing import Dict, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from mcvos.mcdropout import (
    DegenerateBatch, McSummary, deterministic_samples, epistemic_score,
    mc_infer, min_max_scale, summarize,
)
from mcvos.mlp import MlpModel
from mcvos.numerics import RngStream
from mcvos.vos import DEFAULT_CONVENTION
from mcvos.utils import DataError, logger

MAP_STREAM = 7

MAP_NAMES = ('aleatoric', 'epistemic', 'combined')

PGM_MAX_VALUE = 255


class NonPlanarModel(DataError):
    """Raised when a map is requested for a model whose input is not
    two-dimensional."""


@dataclass(frozen=True, eq=False)
class Grid:
    """Cell centres of a regular grid over a rectangle."""

    xs: np.ndarray
    """Centres along x, ascending, shape `(nx,)`."""

    ys: np.ndarray
    """Centres along y, ascending, shape `(ny,)`."""

    @classmethod
    def over(cls, bounds: Tuple[float, float, float, float], resolution: Tuple[int, int]) -> 'Grid':
        """
        Args:
            bounds: `(x_min, x_max, y_min, y_max)`.
            resolution: Cell counts `(nx, ny)`.
        """
        x_min, x_max, y_min, y_max = bounds
        nx, ny = resolution
        if not (x_min < x_max and y_min < y_max):
            raise ValueError(f'Cannot build a grid over empty bounds {bounds}')
        if nx < 1 or ny < 1:
            raise ValueError(f'Cannot build a grid with resolution {resolution}')
        return cls(
            xs=x_min + (np.arange(nx) + 0.5) * (x_max - x_min) / nx,
            ys=y_min + (np.arange(ny) + 0.5) * (y_max - y_min) / ny,
        )

    @property
    def shape(self) -> Tuple[int, int]:
        """`(ny, nx)`: one array row per y value."""
        return self.ys.shape[0], self.xs.shape[0]

    def row(self, index: int) -> np.ndarray:
        """Points `(x, ys[index])` for every x, shape `(nx, 2)`."""
        return np.stack([self.xs, np.full(self.xs.shape[0], self.ys[index])], axis=1)


@dataclass(frozen=True, eq=False)
class UncertaintyMaps:
    """Map values of shape `(ny, nx)`, row `j` holding `grid.ys[j]`."""

    grid: Grid
    aleatoric: np.ndarray
    """Mutual information of the MC passes."""

    epistemic: np.ndarray
    """Negated energy-based ID score; higher ⇒ further off the training
    data."""

    combined: np.ndarray

    def get(self, name: str) -> np.ndarray:
        if name not in MAP_NAMES:
            raise ValueError(f'Unknown map "{name}", expected one of {MAP_NAMES}')
        return getattr(self, name)


def _scaled_or_zero(name: str, values: np.ndarray) -> np.ndarray:
    try:
        return min_max_scale(values)
    except DegenerateBatch:
        logger.warning(f'The {name} map is constant; it contributes zero to the combined map')
        return np.zeros(values.shape)


def uncertainty_maps(model: MlpModel, grid: Grid, *, passes: int = 10, seed: int = 0,
                     weights: Tuple[float, float] = (0.5, 0.5), convention: str = DEFAULT_CONVENTION,
                     disable_progress: bool = True) -> UncertaintyMaps:
    """Evaluates the MC summary of `model` at every grid cell centre.

    Row `j` of the grid draws its dropout masks from
    `RngStream(seed, MAP_STREAM).child(j)`; `passes=1` uses the
    deterministic forward.

    Raises:
        NonPlanarModel: The model's input is not two-dimensional.

    """
    if model.input_dim != 2:
        raise NonPlanarModel(f'Maps need a model with 2 input features, got {model.input_dim}')
    rng = RngStream(seed, MAP_STREAM)
    rows = []
    with logging_redirect_tqdm(loggers=[logger]):
        for j in tqdm(range(grid.shape[0]), desc='Map rows', unit='rows', disable=disable_progress):
            points = grid.row(j)
            samples = (deterministic_samples(model, points) if passes == 1
                       else mc_infer(model, points, passes, rng.child(j)))
            rows.append(summarize(samples))
    summary = McSummary(**{
        name: np.stack([getattr(row, name) for row in rows])
        for name in McSummary.__dataclass_fields__
    })
    aleatoric = summary.mi
    epistemic = -epistemic_score(summary.energy_mean, convention)
    w_mi, w_energy = weights
    combined = (w_mi * _scaled_or_zero('aleatoric', aleatoric)
                + w_energy * _scaled_or_zero('epistemic', epistemic))
    return UncertaintyMaps(grid=grid, aleatoric=aleatoric, epistemic=epistemic, combined=combined)


def map_frame(grid: Grid, values: np.ndarray) -> pd.DataFrame:
    """`x,y,value` rows, x varying fastest and y ascending."""
    xs, ys = np.meshgrid(grid.xs, grid.ys)
    return pd.DataFrame({'x': xs.ravel(), 'y': ys.ravel(), 'value': np.asarray(values).ravel()})


def pgm_intensities(values: np.ndarray) -> np.ndarray:
    """Maps values linearly to 8-bit gray, minimum black and maximum
    white; a constant map is all black."""
    values = np.asarray(values, dtype=np.float64)
    low, high = np.min(values), np.max(values)
    if not high > low:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint(PGM_MAX_VALUE * (values - low) / (high - low)).astype(np.uint8)


def write_pgm(values: np.ndarray, path: str) -> None:
    """Writes a `(ny, nx)` map as a binary (P5) graymap with the highest y
    in the top image row."""
    intensities = pgm_intensities(values)[::-1]
    height, width = intensities.shape
    with open(path, 'wb') as f:
        f.write(f'P5\n{width} {height}\n{PGM_MAX_VALUE}\n'.encode('ascii'))
        f.write(np.ascontiguousarray(intensities).tobytes())


def write_maps(maps: UncertaintyMaps, output_dir: str) -> Dict[str, str]:
    """Writes `<name>.csv` and `<name>.pgm` for each map; returns the
    written paths by file name."""
    paths = {}
    for name in MAP_NAMES:
        csv_path = os.path.join(output_dir, f'{name}.csv')
        pgm_path = os.path.join(output_dir, f'{name}.pgm')
        map_frame(maps.grid, maps.get(name)).to_csv(csv_path, index=False)
        write_pgm(maps.get(name), pgm_path)
        paths[f'{name}.csv'] = csv_path
        paths[f'{name}.pgm'] = pgm_path
    return paths
