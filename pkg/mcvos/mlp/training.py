"""Mini-batch SGD training with cross-entropy or logit-normalization
loss, optionally joined by the virtual-outlier uncertainty loss."""

from dataclasses import asdict, dataclass
import math
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from mcvos.datasets import LabeledDataset
from mcvos.numerics import RngStream
from mcvos.utils import DataError, DimensionMismatch, logger
from .core import Gradients, Layer, MlpModel, backward, forward
from .losses import ZeroLogitVector, cross_entropy_loss, logit_norm_loss

if TYPE_CHECKING:
    from mcvos.vos import VosState

SCHEDULES = ('cosine', 'step')
LOSSES = ('cross_entropy', 'logit_norm')

ZERO_LOGIT_JITTER = 1e-6


class EpochOutOfRange(DataError, ValueError):
    """Raised when a learning rate is requested outside `[0, epochs)`."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of a training run."""

    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.1
    """Initial learning rate."""

    schedule: str = 'cosine'
    """`cosine` annealing over all epochs, or `step` decay at `milestones`."""

    milestones: Tuple[int, ...] = (80, 140)
    gamma: float = 0.1
    """Factor applied to the learning rate at each milestone."""

    momentum: float = 0.9
    weight_decay: float = 5e-4

    loss: str = 'cross_entropy'
    """`cross_entropy` or `logit_norm`."""

    tau: float = 0.04
    """Logit-normalization temperature."""

    beta: float = 0.1
    """Weight of the uncertainty loss when virtual outliers are used."""

    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError(('Cannot instantiate TrainConfig with '
                              f'epochs={self.epochs} and batch_size={self.batch_size}. '
                              'Please use a non-negative epoch count and a positive batch size.'))
        if self.lr <= 0 or self.tau <= 0 or self.gamma <= 0:
            raise ValueError('Cannot instantiate TrainConfig with a non-positive lr, tau or gamma')
        if not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0 or self.beta < 0:
            raise ValueError(('Cannot instantiate TrainConfig with '
                              f'momentum={self.momentum}, weight_decay={self.weight_decay} '
                              f'and beta={self.beta}. Please use momentum in [0, 1) and '
                              'non-negative weight_decay and beta.'))
        if self.schedule not in SCHEDULES:
            raise ValueError(f'Unknown schedule "{self.schedule}", expected one of {SCHEDULES}')
        if self.loss not in LOSSES:
            raise ValueError(f'Unknown loss "{self.loss}", expected one of {LOSSES}')
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError(f'Milestones must be increasing, got {self.milestones}')


@dataclass(frozen=True)
class SgdState:
    """Momentum buffers, one per model layer."""

    velocities: Tuple[Layer, ...]


@dataclass(frozen=True)
class EpochLog:
    """Summary of one training epoch."""

    epoch: int
    lr: float
    loss_cls: float
    """Mean classification loss over the epoch's samples."""

    loss_uncert: float
    """Mean uncertainty loss over the epoch's VOS-active batches."""

    loss_total: float
    """`loss_cls + beta · loss_uncert`."""

    train_accuracy: float
    vos_active: bool

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def sgd_step(model: MlpModel, gradients: Gradients, *, lr: float, momentum: float,
             weight_decay: float, state: Optional[SgdState] = None) -> Tuple[MlpModel, SgdState]:
    """Applies one step of SGD with momentum and (coupled) weight decay to
    every weight and bias:

    ```
    v ← momentum · v + grad + weight_decay · w
    w ← w - lr · v
    ```

    Velocities start at zero when `state` is `None`.

    """
    if len(gradients) != len(model.layers):
        raise DimensionMismatch(f'Got {len(gradients)} gradients for {len(model.layers)} layers')
    if state is None:
        state = SgdState(velocities=tuple(
            Layer(weight=np.zeros_like(layer.weight), bias=np.zeros_like(layer.bias))
            for layer in model.layers
        ))
    layers, velocities = [], []
    for layer, grad, velocity in zip(model.layers, gradients, state.velocities):
        if grad.shape != layer.shape or grad.bias.shape != layer.bias.shape:
            raise DimensionMismatch(f'Gradient of shape {grad.shape} does not match layer {layer.shape}')
        v_weight = momentum * velocity.weight + grad.weight + weight_decay * layer.weight
        v_bias = momentum * velocity.bias + grad.bias + weight_decay * layer.bias
        velocities.append(Layer(weight=v_weight, bias=v_bias))
        layers.append(Layer(weight=layer.weight - lr * v_weight, bias=layer.bias - lr * v_bias))
    return model.with_layers(layers), SgdState(velocities=tuple(velocities))


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for the given epoch.

    Raises:
        EpochOutOfRange: `epoch` is not in `[0, config.epochs)`.

    """
    if not 0 <= epoch < config.epochs:
        raise EpochOutOfRange(f'Epoch {epoch} is outside [0, {config.epochs})')
    if config.schedule == 'cosine':
        return 0.5 * config.lr * (1.0 + math.cos(math.pi * epoch / config.epochs))
    passed = sum(1 for milestone in config.milestones if epoch >= milestone)
    return config.lr * config.gamma**passed


def classification_loss(logits: np.ndarray, labels: np.ndarray,
                        config: TrainConfig) -> Tuple[float, np.ndarray]:
    """Batch-mean classification loss selected by `config.loss` and its
    gradient with respect to the logits.

    Logit vectors with zero norm are shifted by a small constant before
    logit normalization.

    """
    if config.loss == 'cross_entropy':
        return cross_entropy_loss(logits, labels)
    try:
        return logit_norm_loss(logits, labels, config.tau)
    except ZeroLogitVector:
        norms = np.linalg.norm(logits, axis=1, keepdims=True)
        jittered = logits + np.where(norms < ZERO_LOGIT_JITTER, ZERO_LOGIT_JITTER, 0.0)
        return logit_norm_loss(jittered, labels, config.tau)


def _add_layer_gradient(gradients: Gradients, extra: Layer, scale: float) -> Gradients:
    last = gradients[-1]
    return gradients[:-1] + (Layer(weight=last.weight + scale * extra.weight,
                                   bias=last.bias + scale * extra.bias),)


def train(model: MlpModel, ds: LabeledDataset, config: TrainConfig,
          vos: Optional['VosState'] = None, rng: Optional[RngStream] = None, *,
          disable_progress: bool = True) -> Tuple[MlpModel, List[EpochLog]]:
    """Trains `model` on `ds` with shuffled mini-batches.

    When `vos` is given, every batch's penultimate features and energies
    are observed by it; once its class Gaussians have been fitted (after
    the warm-up) and `config.beta > 0`, each batch also pays
    `beta · L_uncert` for separating its samples from virtual outliers.

    Args:
        model: Initial model.
        ds: Labeled training data.
        config: Optimization hyperparameters.
        vos: Mutable virtual-outlier state, updated in place.
        rng: Random stream for shuffling, dropout and outlier sampling.
            Defaults to a stream seeded with `config.seed`.
        disable_progress: If `False`, display a tqdm progress bar over
            epochs.

    Returns:
        The trained model and one [`EpochLog`][mcvos.mlp.EpochLog] per epoch.

    """
    if ds.labels is None:
        raise DataError('Cannot train on an unlabeled dataset')
    if ds.dim != model.input_dim or ds.class_count > model.class_count:
        raise DimensionMismatch((f'Dataset with dimension {ds.dim} and {ds.class_count} classes '
                                 f'does not fit a model of shape {model.layer_shapes}'))
    rng = RngStream(config.seed) if rng is None else rng
    state: Optional[SgdState] = None
    logs: List[EpochLog] = []
    warned_unready = False

    with logging_redirect_tqdm(loggers=[logger]):
        for epoch in tqdm(range(config.epochs), desc='Epochs', unit='epochs', disable=disable_progress):
            lr = lr_at(config, epoch)
            epoch_rng = rng.child(epoch)
            shuffle_rng, dropout_rng, vos_rng = epoch_rng.child(0), epoch_rng.child(1), epoch_rng.child(2)
            vos_active = vos is not None and vos.active(epoch) and config.beta > 0
            order = shuffle_rng.generator.permutation(ds.size)

            cls_total, uncert_total, correct, uncert_batches = 0.0, 0.0, 0, 0
            for start in range(0, ds.size, config.batch_size):
                ids = order[start:start + config.batch_size]
                x, y = ds.features[ids], ds.labels[ids]
                trace = forward(model, x, dropout_rng)
                loss_cls, dlogits = classification_loss(trace.logits, y, config)
                cls_total += loss_cls * ids.shape[0]
                correct += int(np.sum(np.argmax(trace.logits, axis=1) == y))

                outlier_gradient = None
                if vos is not None and vos_active:
                    step = vos.uncertainty_step(model.layers[-1], trace.features, trace.logits, y, vos_rng)
                    dlogits = dlogits + config.beta * step.dlogits
                    outlier_gradient = step.outlier_gradient
                    uncert_total += step.loss
                    uncert_batches += 1

                gradients = backward(model, trace, dlogits)
                if outlier_gradient is not None:
                    gradients = _add_layer_gradient(gradients, outlier_gradient, config.beta)
                model, state = sgd_step(model, gradients, lr=lr, momentum=config.momentum,
                                        weight_decay=config.weight_decay, state=state)
                if vos is not None:
                    vos.observe(trace.features, y, trace.logits)

            if vos is not None and vos.refit_due(epoch):
                vos.refit()
                logger.debug(f'Refitted class Gaussians after epoch {epoch}')
            elif vos is not None and epoch + 1 >= vos.config.warmup_epochs and not warned_unready:
                logger.warning((f'Warm-up is over but classes {vos.bank.unready_classes()} have fewer than '
                                f'{vos.feature_dim + 1} banked features; virtual outliers stay inactive'))
                warned_unready = True

            loss_cls = cls_total / ds.size
            loss_uncert = uncert_total / uncert_batches if uncert_batches else 0.0
            log = EpochLog(
                epoch=epoch,
                lr=lr,
                loss_cls=loss_cls,
                loss_uncert=loss_uncert,
                loss_total=loss_cls + config.beta * loss_uncert,
                train_accuracy=correct / ds.size,
                vos_active=vos_active,
            )
            logs.append(log)
            logger.debug((f'Epoch {epoch}: lr={lr:.6g} loss_cls={log.loss_cls:.6g} '
                          f'loss_uncert={log.loss_uncert:.6g} accuracy={log.train_accuracy:.4f} '
                          f'vos_active={vos_active}'))
    if logs:
        logger.info((f'Trained {config.epochs} epochs: final loss {logs[-1].loss_total:.6g}, '
                     f'train accuracy {logs[-1].train_accuracy:.4f}'))
    return model, logs
