"""Run configuration: one frozen dataclass of documented defaults,
presets for the toy model ladder, and a flat `key = value` file format.

Values are resolved with increasing precedence from field defaults, the
selected preset, a config file and command-line overrides.
"""

import configparser
from dataclasses import dataclass, fields
import typing
from typing import Any, Dict, Mapping, Optional, Tuple

from mcvos.mlp import TrainConfig
from mcvos.utils import ConfigError, get_duplicates
from mcvos.vos import DEFAULT_CONVENTION, ENERGY_CONVENTIONS, VosConfig

SCORES = ('energy', 'mi', 'combined')

CONFIG_SECTION = 'mcvos'

TRUE_VALUES = ('1', 'true', 'yes', 'on')
FALSE_VALUES = ('0', 'false', 'no', 'off')


@dataclass(frozen=True)
class RunConfig:
    """Settings shared by the `train`, `eval`, `map` and `report`
    commands."""

    preset: str = ''
    """Name of the preset the run started from, if any."""

    label: str = ''
    """Name of the run in reports; defaults to the preset name or `run`."""

    seed: int = 0
    """Seed of every random stream of the run."""

    output_dir: str = 'out'
    """Directory that commands write their outputs to."""

    # Data
    train_data: str = ''
    """Features CSV to train on; the toy clusters are generated when empty."""

    test_data: str = ''
    """Features CSV of ID test samples; the held-out split of the training
    data when empty."""

    ood_data: Tuple[str, ...] = ()
    """Comma-separated features CSVs of OOD populations; the toy background
    when empty and the toy task is used."""

    logits: str = ''
    """Logit dump CSV to evaluate instead of running a checkpoint."""

    checkpoint: str = ''
    """Checkpoint to evaluate or map; `<output_dir>/checkpoint.json` when empty."""

    split_fraction: float = 0.8
    """Fraction of each class used for training."""

    # Toy task
    per_class: int = 500
    cluster_radius: float = 4.0
    background_count: int = 1000
    background_radius: float = 3.0
    """Minimum Mahalanobis distance of background points from every cluster."""

    background_bound: float = 8.0
    """Background points are drawn uniformly from `[-bound, bound]²`."""

    # Model and training
    hidden: Tuple[int, ...] = (64, 64)
    dropout: float = 0.1
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.1
    schedule: str = 'cosine'
    milestones: Tuple[int, ...] = (80, 140)
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss: str = 'cross_entropy'
    tau: float = 0.04
    beta: float = 0.1

    # Virtual outliers
    vos: bool = False
    """Whether training adds the virtual-outlier uncertainty loss."""

    bank_capacity: int = 1000
    candidates: int = 10000
    outliers_per_class: int = 0
    """Outliers per class and batch; 0 matches the class's batch count."""

    running_momentum: float = 0.9
    energy_floor: float = 1e-6
    warmup_epochs: int = 10
    energy_convention: str = DEFAULT_CONVENTION

    # Evaluation
    passes: int = 10
    """MC-Dropout passes T; 1 evaluates the deterministic forward."""

    max_workers: int = 1
    """Worker processes for MC passes."""

    score: str = 'energy'
    """Detection score reported as `score`: `energy`, `mi` or `combined`."""

    weight_mi: float = 0.5
    weight_energy: float = 0.5
    calibration_bins: int = 15
    histogram_bins: int = 20

    # Maps
    map_bounds: Tuple[float, ...] = (-8.0, 8.0, -8.0, 8.0)
    """Grid extent as `x_min, x_max, y_min, y_max`."""

    map_resolution: Tuple[int, ...] = (100, 100)
    """Grid cells along x and y."""

    db_filepath: str = ':memory:'
    """sqlite database that evaluation results are recorded in."""

    disable_progress: bool = False

    def __post_init__(self):
        choices = {
            'schedule': ('cosine', 'step'),
            'loss': ('cross_entropy', 'logit_norm'),
            'energy_convention': ENERGY_CONVENTIONS,
            'score': SCORES,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f'Invalid value "{getattr(self, key)}" for "{key}", expected one of {allowed}')
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f'Unknown preset "{self.preset}", expected one of {tuple(PRESETS)}')
        positive = ('per_class', 'passes', 'max_workers', 'calibration_bins', 'histogram_bins',
                    'batch_size', 'candidates', 'bank_capacity')
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f'"{key}" must be at least 1, got {getattr(self, key)}')
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(f'"split_fraction" must lie strictly between 0 and 1, got {self.split_fraction}')
        if len(self.map_bounds) != 4 or not (self.map_bounds[0] < self.map_bounds[1]
                                             and self.map_bounds[2] < self.map_bounds[3]):
            raise ConfigError(f'"map_bounds" must be x_min, x_max, y_min, y_max, got {self.map_bounds}')
        if len(self.map_resolution) != 2 or min(self.map_resolution) < 1:
            raise ConfigError(f'"map_resolution" must be two positive cell counts, got {self.map_resolution}')

    @property
    def run_label(self) -> str:
        return self.label or self.preset or 'run'

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                schedule=self.schedule, milestones=self.milestones, gamma=self.gamma,
                momentum=self.momentum, weight_decay=self.weight_decay,
                loss=self.loss, tau=self.tau, beta=self.beta, seed=self.seed,
            )
        except ValueError as ex:
            raise ConfigError(str(ex)) from None

    def vos_config(self) -> VosConfig:
        try:
            return VosConfig(
                bank_capacity=self.bank_capacity, candidates=self.candidates,
                outliers_per_class=self.outliers_per_class or None,
                momentum=self.running_momentum, energy_floor=self.energy_floor,
                warmup_epochs=self.warmup_epochs, convention=self.energy_convention,
            )
        except ValueError as ex:
            raise ConfigError(str(ex)) from None


PRESETS: Dict[str, Dict[str, Any]] = {
    'toy-baseline': dict(loss='cross_entropy', schedule='cosine', epochs=100, vos=False, passes=1),
    'toy-vos': dict(loss='cross_entropy', schedule='cosine', epochs=100, vos=True, beta=0.1, passes=1),
    'toy-ln-vos': dict(loss='logit_norm', schedule='step', epochs=200, milestones=(80, 140),
                       vos=True, beta=0.1, passes=1),
    'toy-mc10-ln-vos': dict(loss='logit_norm', schedule='step', epochs=200, milestones=(80, 140),
                            vos=True, beta=0.1, passes=10),
}
"""Toy model ladder: baseline, + virtual outliers, + logit normalization,
+ 10 MC-Dropout passes."""


def field_types() -> Dict[str, Any]:
    return typing.get_type_hints(RunConfig)


def coerce(key: str, value: Any) -> Any:
    """Converts a (string) value to the type of the RunConfig field `key`.

    Raises:
        ConfigError: `key` is not a field, or the value does not convert.

    """
    types = field_types()
    if key not in types:
        raise ConfigError(f'Unknown configuration key "{key}"')
    field_type = types[key]
    if not isinstance(value, str):
        return tuple(value) if typing.get_origin(field_type) is tuple else value
    text = value.strip()
    try:
        if field_type is bool:
            if text.lower() in TRUE_VALUES:
                return True
            if text.lower() in FALSE_VALUES:
                return False
            raise ValueError(f'expected a boolean, got "{text}"')
        if field_type in (int, float):
            return field_type(text)
        if typing.get_origin(field_type) is tuple:
            item_type = typing.get_args(field_type)[0]
            return tuple(item_type(item.strip()) for item in text.split(',') if item.strip())
        return text
    except ValueError as ex:
        raise ConfigError(f'Invalid value for "{key}": {ex}') from None


def normalize_key(key: str) -> str:
    return key.strip().replace('-', '_')


def read_config_file(path: str) -> Dict[str, str]:
    """Reads `key = value` lines (with `#` comments) from a config file.

    Raises:
        ConfigError: The file is missing or malformed, or repeats a key.

    """
    parser = configparser.ConfigParser(
        interpolation=None,
        comment_prefixes=('#',),
        inline_comment_prefixes=('#',),
        delimiters=('=',),
        strict=True,
    )
    try:
        with open(path, encoding='utf-8') as f:
            text = f.read()
    except OSError as ex:
        raise ConfigError(f'Could not read config file "{path}": {ex}') from None
    try:
        parser.read_string(f'[{CONFIG_SECTION}]\n{text}', source=path)
    except configparser.DuplicateOptionError as ex:
        raise ConfigError(f'Config file "{path}" repeats key "{ex.option}"') from None
    except configparser.Error as ex:
        raise ConfigError(f'Could not parse config file "{path}": {ex}') from None
    if len(parser.sections()) != 1:
        raise ConfigError(f'Config file "{path}" must not contain [sections]')
    keys = [normalize_key(key) for key in parser[CONFIG_SECTION]]
    duplicates = get_duplicates(keys)
    if duplicates:
        raise ConfigError(f'Config file "{path}" repeats key "{duplicates[0]}"')
    return {normalize_key(key): value for key, value in parser[CONFIG_SECTION].items()}


def load_config(*, preset: Optional[str] = None, config_path: Optional[str] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolves a RunConfig from defaults, a preset, a config file and
    overrides (in increasing precedence).

    The preset may also be named by the `preset` key of the config file or
    the overrides.

    Raises:
        ConfigError: A key is unknown or repeated, or a value is invalid.

    """
    file_values = read_config_file(config_path) if config_path else {}
    file_config = {key: coerce(key, value) for key, value in file_values.items()}
    override_config = {normalize_key(key): value for key, value in (overrides or {}).items()}
    override_config = {key: coerce(key, value) for key, value in override_config.items()}
    preset_name = override_config.get('preset') or preset or file_config.get('preset') or ''
    if preset_name not in ('', *PRESETS):
        raise ConfigError(f'Unknown preset "{preset_name}", expected one of {tuple(PRESETS)}')
    resolved = {**PRESETS.get(preset_name, {}), **file_config, **override_config, 'preset': preset_name}
    return RunConfig(**resolved)


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ', '.join(format_value(item) for item in value)
    return str(value) if not isinstance(value, float) else repr(value)


def write_config(config: RunConfig, path: str) -> None:
    """Writes every field of the resolved configuration, one `key = value`
    line per field in declaration order."""
    lines = ['# Resolved mcvos run configuration']
    lines.extend(f'{field.name} = {format_value(getattr(config, field.name))}' for field in fields(config))
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines) + '\n')

