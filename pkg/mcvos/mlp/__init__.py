from .core import (
    ForwardTrace, Gradients, Layer, MlpModel, TraceMismatch,
    backward, forward, init_mlp,
)
from .losses import (
    LabelOutOfRange, ZeroLogitVector,
    cross_entropy_loss, logit_norm_loss, softmax,
)
from .training import (
    EpochLog, EpochOutOfRange, SgdState, TrainConfig,
    classification_loss, lr_at, sgd_step, train,
)

__all__ = [
    'ForwardTrace',
    'Gradients',
    'Layer',
    'MlpModel',
    'TraceMismatch',
    'backward',
    'forward',
    'init_mlp',
    'LabelOutOfRange',
    'ZeroLogitVector',
    'cross_entropy_loss',
    'logit_norm_loss',
    'softmax',
    'EpochLog',
    'EpochOutOfRange',
    'SgdState',
    'TrainConfig',
    'classification_loss',
    'lr_at',
    'sgd_step',
    'train',
]
