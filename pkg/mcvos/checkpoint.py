"""Versioned JSON checkpoints of trained models.

A checkpoint is a single UTF-8 JSON object:

```
{
  "format": "mcvos-checkpoint",
  "version": 1,
  "layers": [{"shape": [fan_in, fan_out], "weight": [[...], ...], "bias": [...]}, ...],
  "dropout": 0.1,
  "input_shift": [...] | null,
  "input_scale": [...] | null,
  "tau": 0.04,
  "beta": 0.1,
  "seed": 0,
  "energy_convention": "inverse",
  "train_config": {...},
  "vos": null | {
    "config": {...},
    "running_means": [...],
    "gaussians": null | [{"mean": [...], "covariance": [[...], ...]}, ...]
  }
}
```

Floats are written with their shortest round-trip representation, so a
load reproduces every weight exactly; missing running means are `null`.
"""

from dataclasses import asdict, dataclass
import json
from typing import Any, Dict, List, Optional

import numpy as np

from mcvos.mlp import Layer, MlpModel, TrainConfig
from mcvos.numerics import GaussianParams
from mcvos.utils import DataError
from mcvos.vos import DEFAULT_CONVENTION, VosConfig, VosState

CHECKPOINT_FORMAT = 'mcvos-checkpoint'
CHECKPOINT_VERSION = 1


class CheckpointError(DataError):
    """Raised for unreadable or incompatible checkpoint files."""


@dataclass(frozen=True, eq=False)
class Checkpoint:
    model: MlpModel
    train_config: TrainConfig
    vos: Optional[VosState] = None

    @property
    def energy_convention(self) -> str:
        return DEFAULT_CONVENTION if self.vos is None else self.vos.config.convention


def _array(values: Any) -> Optional[np.ndarray]:
    return None if values is None else np.asarray(values, dtype=np.float64)


def _list(array: Optional[np.ndarray]) -> Optional[List]:
    if array is None:
        return None
    return np.where(np.isnan(array), None, array).tolist() if np.any(np.isnan(array)) else array.tolist()


def checkpoint_to_dict(checkpoint: Checkpoint) -> Dict[str, Any]:
    model, config, vos = checkpoint.model, checkpoint.train_config, checkpoint.vos
    vos_dict = None
    if vos is not None:
        vos_dict = {
            'config': asdict(vos.config),
            'running_means': _list(vos.running_means),
            'gaussians': None if vos.gaussians is None else [
                {'mean': g.mean.tolist(), 'covariance': g.covariance.tolist()}
                for g in vos.gaussians
            ],
        }
    return {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'layers': [
            {'shape': list(layer.shape), 'weight': layer.weight.tolist(), 'bias': layer.bias.tolist()}
            for layer in model.layers
        ],
        'dropout': model.dropout,
        'input_shift': _list(model.input_shift),
        'input_scale': _list(model.input_scale),
        'tau': config.tau,
        'beta': config.beta,
        'seed': config.seed,
        'energy_convention': checkpoint.energy_convention,
        'train_config': {**asdict(config), 'milestones': list(config.milestones)},
        'vos': vos_dict,
    }


def checkpoint_from_dict(data: Dict[str, Any]) -> Checkpoint:
    if data.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f'Not an {CHECKPOINT_FORMAT} file')
    if data.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f'Unsupported checkpoint version {data.get("version")}, expected {CHECKPOINT_VERSION}')
    try:
        layers = []
        for entry in data['layers']:
            layer = Layer(weight=np.asarray(entry['weight'], dtype=np.float64).reshape(entry['shape']),
                          bias=np.asarray(entry['bias'], dtype=np.float64))
            layers.append(layer)
        model = MlpModel(layers=tuple(layers), dropout=float(data['dropout']),
                         input_shift=_array(data['input_shift']),
                         input_scale=_array(data['input_scale']))
        train_config = TrainConfig(**{**data['train_config'],
                                      'milestones': tuple(data['train_config']['milestones'])})
        vos = None
        if data['vos'] is not None:
            vos = VosState(model.class_count, model.feature_dim, VosConfig(**data['vos']['config']))
            vos.running_means = np.array([np.nan if value is None else value
                                          for value in data['vos']['running_means']], dtype=np.float64)
            if data['vos']['gaussians'] is not None:
                vos.gaussians = tuple(
                    GaussianParams.from_moments(g['mean'], g['covariance'], regularize=False)
                    for g in data['vos']['gaussians']
                )
    except (KeyError, TypeError, ValueError) as ex:
        raise CheckpointError(f'Malformed checkpoint: {ex}') from None
    return Checkpoint(model=model, train_config=train_config, vos=vos)


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(checkpoint_to_dict(checkpoint), f)
        f.write('\n')


def load_checkpoint(path: str) -> Checkpoint:
    """Reads a checkpoint written by
    [`save_checkpoint()`][mcvos.checkpoint.save_checkpoint].

    Raises:
        CheckpointError: The file is missing, not JSON, or not a supported
            checkpoint.

    """
    try:
        with open(path, encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f'Checkpoint file "{path}" does not exist') from None
    except (json.JSONDecodeError, UnicodeDecodeError) as ex:
        raise CheckpointError(f'Could not parse checkpoint "{path}": {ex}') from None
    if not isinstance(data, dict):
        raise CheckpointError(f'Checkpoint "{path}" is not a JSON object')
    return checkpoint_from_dict(data)
