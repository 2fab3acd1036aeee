"""Multilayer perceptron with ReLU hidden layers and inverted dropout,
with a hand-written forward and backward pass."""

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from mcvos.numerics import RngStream
from mcvos.utils import DataError, DimensionMismatch


class TraceMismatch(DataError):
    """Raised when a ForwardTrace is used with a model it was not
    produced by."""


@dataclass(frozen=True, eq=False)
class Layer:
    """Weights of one affine layer, `y = x @ weight + bias`. Also used to
    hold gradients and momentum buffers of the same shape."""

    weight: np.ndarray
    """Matrix of shape `(fan_in, fan_out)`."""

    bias: np.ndarray
    """Vector of shape `(fan_out,)`."""

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weight.shape  # type: ignore


Gradients = Tuple[Layer, ...]


@dataclass(frozen=True, eq=False)
class MlpModel:
    """An MLP `d → h_1 → ... → h_m → K` with ReLU and dropout after each
    hidden layer.

    Inputs are standardized with `(x - input_shift) / input_scale`
    before the first layer. The output of the last hidden layer (after
    dropout) is the penultimate feature vector f(x).

    """

    layers: Tuple[Layer, ...]
    """Affine layers, the last of which produces the K logits."""

    dropout: float = 0.1
    """Probability of dropping each hidden unit in stochastic mode."""

    input_shift: Optional[np.ndarray] = None
    """Per-feature shift applied to inputs; zeros when `None`."""

    input_scale: Optional[np.ndarray] = None
    """Per-feature scale applied to inputs; ones when `None`."""

    def __post_init__(self):
        if len(self.layers) == 0:
            raise ValueError('Cannot instantiate MlpModel without layers')
        for previous, layer in zip(self.layers[:-1], self.layers[1:]):
            if previous.weight.shape[1] != layer.weight.shape[0]:
                raise DimensionMismatch(f'Layer shapes {previous.shape} and {layer.shape} do not chain')
        for layer in self.layers:
            if layer.bias.shape != (layer.weight.shape[1],):
                raise DimensionMismatch(f'Bias of shape {layer.bias.shape} does not match weight {layer.shape}')
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f'Dropout rate must lie in [0, 1), got {self.dropout}')

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def class_count(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def feature_dim(self) -> int:
        """Width of the penultimate feature vector."""
        return self.layers[-1].weight.shape[0]

    @property
    def layer_shapes(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(layer.shape for layer in self.layers)

    def with_layers(self, layers: Sequence[Layer]) -> 'MlpModel':
        return replace(self, layers=tuple(layers))

    def standardize(self, x: np.ndarray) -> np.ndarray:
        if self.input_shift is not None:
            x = x - self.input_shift
        if self.input_scale is not None:
            x = x / self.input_scale
        return x


def init_mlp(input_dim: int, class_count: int, *, hidden: Sequence[int] = (64, 64),
             dropout: float = 0.1, rng: RngStream,
             input_shift: Optional[np.ndarray] = None,
             input_scale: Optional[np.ndarray] = None) -> MlpModel:
    """Initializes weights uniformly in `±sqrt(6 / fan_in)` (He-style) and
    biases at zero."""
    widths = [input_dim, *hidden, class_count]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / fan_in)
        layers.append(Layer(
            weight=rng.generator.uniform(-limit, limit, size=(fan_in, fan_out)),
            bias=np.zeros(fan_out),
        ))
    return MlpModel(layers=tuple(layers), dropout=dropout,
                    input_shift=input_shift, input_scale=input_scale)


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Intermediate values of one forward pass, kept for backpropagation."""

    layer_inputs: Tuple[np.ndarray, ...]
    """Input to each layer; the first is the standardized input and the
    last is the penultimate feature matrix."""

    pre_activations: Tuple[np.ndarray, ...]
    """Hidden-layer outputs before ReLU."""

    masks: Optional[Tuple[np.ndarray, ...]]
    """Boolean keep-masks per hidden layer, or `None` when dropout was
    not applied."""

    logits: np.ndarray
    """Logits of shape `(n, K)`."""

    layer_shapes: Tuple[Tuple[int, int], ...]
    """Shapes of the producing model's layers."""

    single: bool = False
    """If `True`, the pass was over a single vector rather than a batch."""

    @property
    def features(self) -> np.ndarray:
        """Penultimate features f(x) of shape `(n, h)`."""
        return self.layer_inputs[-1]

    def output(self, array: np.ndarray) -> np.ndarray:
        """Drops the batch axis again for single-vector passes."""
        return array[0] if self.single else array


def forward(model: MlpModel, x: np.ndarray, rng: Optional[RngStream] = None) -> ForwardTrace:
    """Runs the model on `x` (shape `(d,)` or `(n, d)`).

    Without `rng` the pass is deterministic (no units dropped; inverted
    dropout needs no rescaling). With `rng`, each hidden unit is kept
    with probability `1 - p` and kept units are scaled by `1 / (1 - p)`.

    Raises:
        DimensionMismatch: `x` does not match the model's input dimension.

    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionMismatch(f'Expected inputs of dimension {model.input_dim}, got shape {x.shape}')
    stochastic = rng is not None and model.dropout > 0.0
    keep = 1.0 - model.dropout

    hidden = model.standardize(x)
    layer_inputs = [hidden]
    pre_activations = []
    masks = []
    for layer in model.layers[:-1]:
        pre = hidden @ layer.weight + layer.bias
        pre_activations.append(pre)
        hidden = np.maximum(pre, 0.0)
        if stochastic:
            mask = rng.generator.random(hidden.shape) < keep  # type: ignore
            masks.append(mask)
            hidden = hidden * mask / keep
        layer_inputs.append(hidden)
    last = model.layers[-1]
    logits = hidden @ last.weight + last.bias
    return ForwardTrace(
        layer_inputs=tuple(layer_inputs),
        pre_activations=tuple(pre_activations),
        masks=tuple(masks) if stochastic else None,
        logits=logits,
        layer_shapes=model.layer_shapes,
        single=single,
    )


def backward(model: MlpModel, trace: ForwardTrace, dlogits: np.ndarray) -> Gradients:
    """Backpropagates `dlogits` (d loss / d logits) through the pass
    recorded in `trace`, reusing its dropout masks.

    Returns:
        One [`Layer`][mcvos.mlp.Layer] of gradients per model layer.

    Raises:
        TraceMismatch: The trace was not produced by a model of this shape,
            or `dlogits` does not match its logits.

    """
    if trace.layer_shapes != model.layer_shapes:
        raise TraceMismatch(f'Trace from layers {trace.layer_shapes} used with layers {model.layer_shapes}')
    dlogits = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
    if dlogits.shape != trace.logits.shape:
        raise TraceMismatch(f'Upstream gradient of shape {dlogits.shape} does not match logits {trace.logits.shape}')
    keep = 1.0 - model.dropout
    gradients = []
    delta = dlogits
    for index in range(len(model.layers) - 1, -1, -1):
        layer_input = trace.layer_inputs[index]
        gradients.append(Layer(weight=layer_input.T @ delta, bias=delta.sum(axis=0)))
        if index == 0:
            break
        delta = delta @ model.layers[index].weight.T
        if trace.masks is not None:
            delta = delta * trace.masks[index - 1] / keep
        delta = delta * (trace.pre_activations[index - 1] > 0.0)
    return tuple(reversed(gradients))
