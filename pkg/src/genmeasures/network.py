# Network representation for the measure engine: layer types, shape
# checking, a deterministic forward pass that records pre-activations and
# activations, and reverse-mode products (vector-Jacobian products and
# parameter gradients) for Dense / Conv2d / ReLU / Flatten / AvgPool stacks.
#
# All layer kernels work on batches with a leading batch axis.  Affine
# layers are numbered 1..l; a_j is the input of affine layer j+1 (for dense
# networks a_j = relu(z_j)), a_0 is the network input and a_l = z_l are the
# logits.

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray
from scipy import sparse
from scipy.special import log_softmax, softmax

from .common import (
    InvalidConfigError,
    InvalidDatasetError,
    InvalidInputError,
    InvalidLayerIndexError,
    InvalidNetworkError,
    ShapeMismatchError,
)

Array = NDArray[np.floating]
Shape = tuple[int, ...]

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


@dataclass(frozen=True, eq=False)
class Dense:
    weight: Array  # (h_j, h_{j-1})
    bias: Array  # (h_j,)


@dataclass(frozen=True, eq=False)
class Conv2d:
    kernel: Array  # (out, in, kh, kw)
    bias: Array  # (out,)
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class AvgPool:
    window: int
    stride: int


Layer = Union[Dense, Conv2d, ReLU, Flatten, AvgPool]
AffineLayer = Union[Dense, Conv2d]
AFFINE_TYPES = (Dense, Conv2d)

LAYER_NAMES: dict[type, str] = {
    Dense: "dense",
    Conv2d: "conv2d",
    ReLU: "relu",
    Flatten: "flatten",
    AvgPool: "avgpool",
}


def sq_norm(v: NDArray) -> float:
    """Squared Euclidean norm accumulated in float64."""
    v64 = np.asarray(v, dtype=np.float64).ravel()
    return float(np.dot(v64, v64))


def layer_output_shape(layer: Layer, in_shape: Shape, index: int) -> Shape:
    """Shape produced by ``layer`` for an (unbatched) input of ``in_shape``.
    Raises ShapeMismatchError naming ``index`` if the shapes do not fit."""
    if isinstance(layer, Dense):
        h_out, h_in = layer.weight.shape
        if in_shape != (h_in,):
            raise ShapeMismatchError(index, (h_in,), in_shape, "dense input")
        return (h_out,)
    if isinstance(layer, Conv2d):
        out_ch, in_ch, kh, kw = layer.kernel.shape
        if len(in_shape) != 3 or in_shape[0] != in_ch:
            raise ShapeMismatchError(
                index, (in_ch, -1, -1), in_shape, "conv2d input"
            )
        _, h, w = in_shape
        p, s = layer.padding, layer.stride
        if h + 2 * p < kh or w + 2 * p < kw:
            raise ShapeMismatchError(
                index, (in_ch, kh, kw), in_shape, "kernel larger than input"
            )
        return (out_ch, (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1)
    if isinstance(layer, ReLU):
        return in_shape
    if isinstance(layer, Flatten):
        return (math.prod(in_shape),)
    if isinstance(layer, AvgPool):
        if len(in_shape) != 3:
            raise ShapeMismatchError(index, (-1, -1, -1), in_shape, "avgpool")
        c, h, w = in_shape
        if h < layer.window or w < layer.window:
            raise ShapeMismatchError(
                index, (c, layer.window, layer.window), in_shape, "avgpool"
            )
        return (
            c,
            (h - layer.window) // layer.stride + 1,
            (w - layer.window) // layer.stride + 1,
        )
    raise InvalidNetworkError(f"unsupported layer {layer!r}", index)


def _check_layer(layer: Layer, index: int) -> None:
    if isinstance(layer, Dense):
        if layer.weight.ndim != 2 or layer.bias.shape != (
            layer.weight.shape[0],
        ):
            raise InvalidNetworkError(
                f"dense weight {layer.weight.shape} and bias "
                f"{layer.bias.shape} do not agree",
                index,
            )
    elif isinstance(layer, Conv2d):
        if layer.kernel.ndim != 4 or layer.bias.shape != (
            layer.kernel.shape[0],
        ):
            raise InvalidNetworkError(
                f"conv2d kernel {layer.kernel.shape} and bias "
                f"{layer.bias.shape} do not agree",
                index,
            )
        if layer.stride < 1 or layer.padding < 0:
            raise InvalidNetworkError(
                f"conv2d stride {layer.stride} / padding {layer.padding}",
                index,
            )
    elif isinstance(layer, AvgPool):
        if layer.window < 1 or layer.stride < 1:
            raise InvalidNetworkError(
                f"avgpool window {layer.window} / stride {layer.stride}",
                index,
            )
    elif not isinstance(layer, (ReLU, Flatten)):
        raise InvalidNetworkError(f"unsupported layer {layer!r}", index)
    for arr in layer_parameters(layer):
        if not np.all(np.isfinite(arr)):
            raise InvalidNetworkError("non-finite weights", index)


def layer_parameters(layer: Layer) -> tuple[Array, ...]:
    if isinstance(layer, Dense):
        return (layer.weight, layer.bias)
    if isinstance(layer, Conv2d):
        return (layer.kernel, layer.bias)
    return ()


@dataclass(frozen=True, eq=False)
class Network:
    """Feed-forward network f.  Shapes are validated at construction and the
    object is treated as immutable afterwards."""

    layers: tuple[Layer, ...]
    input_shape: Shape
    num_classes: int
    # shapes[k] is the (unbatched) input shape of layer k; shapes[-1] is
    # the output shape
    shapes: tuple[Shape, ...] = field(init=False, repr=False)
    affine_indices: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(
            self, "input_shape", tuple(int(d) for d in self.input_shape)
        )
        if not self.layers:
            raise InvalidNetworkError("network has no layers")
        if self.num_classes < 1:
            raise InvalidNetworkError(f"num_classes {self.num_classes}")
        if any(d < 1 for d in self.input_shape):
            raise InvalidNetworkError(f"input shape {self.input_shape}")
        dtypes = set()
        for k, layer in enumerate(self.layers):
            _check_layer(layer, k)
            dtypes.update(arr.dtype for arr in layer_parameters(layer))
        affine = tuple(
            k
            for k, layer in enumerate(self.layers)
            if isinstance(layer, AFFINE_TYPES)
        )
        if not affine:
            raise InvalidNetworkError("network has no affine layer")
        if not isinstance(self.layers[-1], Dense):
            raise InvalidNetworkError(
                "the last layer must be dense", len(self.layers) - 1
            )
        for k in range(affine[0]):
            if isinstance(self.layers[k], ReLU):
                raise InvalidNetworkError(
                    "nonlinearity before the first affine layer", k
                )
        if len(dtypes) != 1 or next(iter(dtypes)) not in SUPPORTED_DTYPES:
            raise InvalidNetworkError(
                f"parameters must share one float dtype, found {dtypes}"
            )
        shapes = [self.input_shape]
        for k, layer in enumerate(self.layers):
            shapes.append(layer_output_shape(layer, shapes[-1], k))
        if shapes[-1] != (self.num_classes,):
            raise ShapeMismatchError(
                len(self.layers) - 1, (self.num_classes,), shapes[-1]
            )
        object.__setattr__(self, "shapes", tuple(shapes))
        object.__setattr__(self, "affine_indices", affine)

    @property
    def dtype(self) -> np.dtype:
        return layer_parameters(self.layers[self.affine_indices[0]])[0].dtype

    @property
    def num_affine(self) -> int:
        """The depth l used in every measure."""
        return len(self.affine_indices)

    def affine_layer(self, j: int) -> AffineLayer:
        """Affine layer j, 1-based."""
        self.check_affine_index(j)
        layer = self.layers[self.affine_indices[j - 1]]
        assert isinstance(layer, AFFINE_TYPES)
        return layer

    def check_affine_index(self, j: object) -> None:
        if not isinstance(j, (int, np.integer)) or not 1 <= j <= len(
            self.affine_indices
        ):
            raise InvalidLayerIndexError(j, len(self.affine_indices))

    def activation_position(self, j: int) -> int:
        """Layer position whose input is a_j (len(layers) for a_l)."""
        if not isinstance(j, (int, np.integer)) or not 0 <= j <= len(
            self.affine_indices
        ):
            raise InvalidLayerIndexError(j, len(self.affine_indices))
        if j == len(self.affine_indices):
            return len(self.layers)
        if j == 0:
            return 0
        return self.affine_indices[j]

    def activation_shape(self, j: int) -> Shape:
        return self.shapes[self.activation_position(j)]

    def width(self, j: int) -> int:
        """Flattened size of a_j (d_j; d_0 is the input dimension)."""
        return math.prod(self.activation_shape(j))

    def segment(self, j: int) -> tuple[int, int]:
        """Layer range [start, stop) of f_j, the map from the output of
        affine layer j-1 (the input for j = 1) to the output of affine
        layer j."""
        self.check_affine_index(j)
        start = 0 if j == 1 else self.affine_indices[j - 2] + 1
        return start, self.affine_indices[j - 1] + 1

    def parameters(self) -> list[Array]:
        return [arr for layer in self.layers for arr in layer_parameters(layer)]

    def astype(self, dtype: type | np.dtype) -> "Network":
        """Copy with every parameter converted to ``dtype`` (the arithmetic
        mode of forward and vjp follows the parameter dtype)."""
        return Network(
            tuple(_cast_layer(layer, np.dtype(dtype)) for layer in self.layers),
            self.input_shape,
            self.num_classes,
        )


def _cast_layer(layer: Layer, dtype: np.dtype) -> Layer:
    if isinstance(layer, Dense):
        return Dense(layer.weight.astype(dtype), layer.bias.astype(dtype))
    if isinstance(layer, Conv2d):
        return Conv2d(
            layer.kernel.astype(dtype),
            layer.bias.astype(dtype),
            layer.stride,
            layer.padding,
        )
    return layer


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    inputs: Array  # (n, *input_shape)
    labels: NDArray[np.int64]  # (n,)
    num_classes: int

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs)
        labels = np.asarray(self.labels)
        if inputs.ndim < 2 or inputs.shape[0] < 1:
            raise InvalidDatasetError(
                f"dataset needs n >= 1 inputs, got shape {inputs.shape}"
            )
        if labels.shape != (inputs.shape[0],):
            raise InvalidDatasetError(
                f"{labels.shape[0] if labels.ndim else 0} labels for "
                f"{inputs.shape[0]} inputs"
            )
        if not np.issubdtype(labels.dtype, np.integer):
            raise InvalidDatasetError(f"labels have dtype {labels.dtype}")
        if self.num_classes < 1:
            raise InvalidDatasetError(f"num_classes {self.num_classes}")
        bad = np.flatnonzero((labels < 0) | (labels >= self.num_classes))
        if len(bad):
            raise InvalidDatasetError(
                f"label {int(labels[bad[0]])} of example {int(bad[0])} not "
                f"in [0, {self.num_classes})"
            )
        if not np.all(np.isfinite(inputs)):
            raise InvalidDatasetError("non-finite inputs")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def n(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def input_shape(self) -> Shape:
        return tuple(self.inputs.shape[1:])

    def check_network(self, net: Network) -> None:
        """Raises InvalidDatasetError unless the inputs and classes match
        those of ``net``."""
        if self.input_shape != net.input_shape:
            raise InvalidDatasetError(
                f"inputs of shape {self.input_shape}, network expects "
                f"{net.input_shape}"
            )
        if self.num_classes != net.num_classes:
            raise InvalidDatasetError(
                f"dataset has {self.num_classes} classes, network has "
                f"{net.num_classes}"
            )

    def __len__(self) -> int:
        return self.n

    def subset(self, indices: Sequence[int] | NDArray) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.inputs[idx], self.labels[idx], self.num_classes
        )


@dataclass(frozen=True, eq=False)
class ActivationTrace:
    """Everything the forward pass saw for one input."""

    pre_activations: tuple[Array, ...]  # z_1..z_l
    activations: tuple[Array, ...]  # a_0..a_l
    output: Array  # f(x)
    # batched (leading axis of size 1) input of every layer position,
    # plus the final output; used by the reverse pass
    layer_values: tuple[Array, ...] = field(repr=False)


# Layer kernels ------------------------------------------------------------


def _conv2d(x: Array, kernel: Array, stride: int, padding: int) -> Array:
    if padding:
        x = np.pad(
            x, ((0, 0), (0, 0), (padding, padding), (padding, padding))
        )
    kh, kw = kernel.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[
        :, :, ::stride, ::stride
    ]
    # (B, Ho, Wo, out) -> (B, out, Ho, Wo)
    y = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _conv2d_transpose(
    g: Array, kernel: Array, stride: int, padding: int, in_shape: Shape
) -> Array:
    """Adjoint of the bias-free convolution: scatters every output
    cotangent back through each kernel tap."""
    c, h, w = in_shape
    kh, kw = kernel.shape[2:]
    ho, wo = g.shape[2:]
    out = np.zeros(
        (g.shape[0], c, h + 2 * padding, w + 2 * padding),
        dtype=np.result_type(g.dtype, kernel.dtype),
    )
    for i in range(kh):
        for j in range(kw):
            tap = np.tensordot(g, kernel[:, :, i, j], axes=([1], [0]))
            out[
                :,
                :,
                i : i + stride * ho : stride,
                j : j + stride * wo : stride,
            ] += tap.transpose(0, 3, 1, 2)
    return out[:, :, padding : padding + h, padding : padding + w]


def _avgpool(x: Array, window: int, stride: int) -> Array:
    win = sliding_window_view(x, (window, window), axis=(2, 3))[
        :, :, ::stride, ::stride
    ]
    return win.mean(axis=(-2, -1))


def _avgpool_transpose(
    g: Array, window: int, stride: int, in_shape: Shape
) -> Array:
    ho, wo = g.shape[2:]
    out = np.zeros((g.shape[0],) + in_shape, dtype=g.dtype)
    scaled = g / (window * window)
    for i in range(window):
        for j in range(window):
            out[
                :,
                :,
                i : i + stride * ho : stride,
                j : j + stride * wo : stride,
            ] += scaled
    return out


def layer_forward(layer: Layer, x: Array, with_bias: bool = True) -> Array:
    """Applies one layer to a batch.  ``with_bias=False`` gives the linear
    part of an affine layer."""
    if isinstance(layer, Dense):
        y = x @ layer.weight.T
        return y + layer.bias if with_bias else y
    if isinstance(layer, Conv2d):
        y = _conv2d(x, layer.kernel, layer.stride, layer.padding)
        return y + layer.bias[:, None, None] if with_bias else y
    if isinstance(layer, ReLU):
        return np.maximum(x, 0)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    if isinstance(layer, AvgPool):
        return _avgpool(x, layer.window, layer.stride)
    raise InvalidNetworkError(f"unsupported layer {layer!r}")


def layer_input_vjp(layer: Layer, x: Array, g: Array, in_shape: Shape) -> Array:
    """Cotangent of a layer's input given the cotangent ``g`` of its output.
    ``x`` is the layer input seen in the forward pass; it may have batch
    size 1 while ``g`` carries many cotangents.  The ReLU derivative at 0
    is 0."""
    if isinstance(layer, Dense):
        return g @ layer.weight
    if isinstance(layer, Conv2d):
        return _conv2d_transpose(
            g, layer.kernel, layer.stride, layer.padding, in_shape
        )
    if isinstance(layer, ReLU):
        return g * (x > 0)
    if isinstance(layer, Flatten):
        return g.reshape((g.shape[0],) + in_shape)
    if isinstance(layer, AvgPool):
        return _avgpool_transpose(g, layer.window, layer.stride, in_shape)
    raise InvalidNetworkError(f"unsupported layer {layer!r}")


def layer_param_grads(
    layer: AffineLayer, x: Array, g: Array
) -> tuple[Array, Array]:
    """Gradients of (weight, bias) summed over the batch."""
    if isinstance(layer, Dense):
        return g.T @ x, g.sum(axis=0)
    p, s = layer.padding, layer.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    kh, kw = layer.kernel.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    dk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    return dk, g.sum(axis=(0, 2, 3))


# Forward and reverse passes -------------------------------------------------


def run_layers(
    net: Network, x: Array, start: int = 0, stop: Optional[int] = None
) -> list[Array]:
    """Runs layers [start, stop) on the batch ``x`` (the input of layer
    ``start``).  Returns the input of every layer in the range followed by
    the final output."""
    stop = len(net.layers) if stop is None else stop
    values = [x]
    for k in range(start, stop):
        values.append(layer_forward(net.layers[k], values[-1]))
    return values


def backward_layers(
    net: Network,
    values: Sequence[Array],
    g: Array,
    start: int = 0,
    stop: Optional[int] = None,
    param_grads: Optional[dict[int, tuple[Array, Array]]] = None,
) -> Array:
    """Pulls the output cotangent ``g`` of layer ``stop - 1`` back to the
    input of layer ``start``.  ``values`` is what run_layers returned for
    the same range.  If ``param_grads`` is given, affine parameter
    gradients are stored into it keyed by layer position."""
    stop = len(net.layers) if stop is None else stop
    for k in range(stop - 1, start - 1, -1):
        layer = net.layers[k]
        x = values[k - start]
        if param_grads is not None and isinstance(layer, AFFINE_TYPES):
            param_grads[k] = layer_param_grads(layer, x, g)
        g = layer_input_vjp(layer, x, g, net.shapes[k])
    return g


def forward_batch(net: Network, xs: NDArray) -> list[Array]:
    xs = np.asarray(xs, dtype=net.dtype)
    if xs.shape[1:] != net.input_shape:
        raise ShapeMismatchError(0, net.input_shape, xs.shape[1:], "input")
    return run_layers(net, xs)


def predict_logits(net: Network, xs: NDArray, batch_size: int = 512) -> Array:
    """Logits for many inputs, computed in fixed-size chunks."""
    xs = np.asarray(xs)
    outs = [
        forward_batch(net, xs[i : i + batch_size])[-1]
        for i in range(0, xs.shape[0], batch_size)
    ]
    return np.concatenate(outs, axis=0)


def forward(net: Network, x: NDArray) -> ActivationTrace:
    """Deterministic forward pass recording z_j and a_j for every affine
    layer."""
    x = np.asarray(x)
    if x.shape != net.input_shape:
        raise ShapeMismatchError(0, net.input_shape, x.shape, "input")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("input contains non-finite values")
    values = forward_batch(net, x[None])
    pre = tuple(values[k + 1][0] for k in net.affine_indices)
    acts = tuple(
        values[net.activation_position(j)][0]
        for j in range(net.num_affine + 1)
    )
    return ActivationTrace(pre, acts, values[-1][0], tuple(values))


def vjp(
    net: Network,
    trace: ActivationTrace,
    cotangent: NDArray,
    wrt: Union[int, Literal["input"]],
) -> Array:
    """cotangent^T (d f / d a_j) at the traced input.  ``wrt`` is "input"
    (a_0) or an activation index 0..l.  A 2-D ``cotangent`` holds one
    cotangent per row and gives one product per row."""
    j = 0 if wrt == "input" else wrt
    pos = net.activation_position(j)  # type: ignore[arg-type]
    c = np.asarray(cotangent, dtype=net.dtype)
    single = c.ndim == 1
    if c.ndim not in (1, 2) or c.shape[-1] != net.num_classes:
        raise InvalidInputError(
            f"cotangent shape {c.shape} does not match output length "
            f"{net.num_classes}"
        )
    g = c[None] if single else c
    values = trace.layer_values[pos:]
    out = backward_layers(net, values, g, start=pos)
    return out[0] if single else out


def jacobian_frobenius_sq(
    net: Network,
    trace: ActivationTrace,
    wrt: Union[int, Literal["input"]],
) -> float:
    """||d f / d a_j||_F^2, one reverse pass per output coordinate."""
    eye = np.eye(net.num_classes, dtype=net.dtype)
    return sq_norm(vjp(net, trace, eye, wrt))


def affine_linear_map(net: Network, j: int, v: NDArray) -> Array:
    """Bias-free map from a batch of a_{j-1}-shaped vectors to z_j.  For
    j = 1 this includes any linear layers in front of the first affine
    layer."""
    start, stop = net.segment(j)
    if j > 1:
        start = stop - 1
    for k in range(start, stop):
        v = layer_forward(net.layers[k], v, with_bias=False)
    return v


def logit_margin(logits: NDArray, y: int) -> float:
    """f(x)_y - max_{y' != y} f(x)_{y'}."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] < 2:
        raise InvalidInputError("margins need at least two classes")
    if not 0 <= y < logits.shape[0]:
        raise InvalidInputError(f"label {y} out of range")
    return float(logits[y] - np.max(np.delete(logits, y)))


def output_margin(net: Network, x: NDArray, y: int) -> float:
    return logit_margin(forward(net, x).output, y)


@dataclass(frozen=True)
class OutputMarginConfig:
    aggregation: Literal["median", "mean", "min"] = "median"
    correct_only: bool = True

    def __post_init__(self) -> None:
        if self.aggregation not in ("median", "mean", "min"):
            raise InvalidConfigError(
                f"unknown margin aggregation {self.aggregation!r}"
            )

    def to_dict(self) -> dict[str, object]:
        return {
            "aggregation": self.aggregation,
            "correct_only": self.correct_only,
        }


def margins_from_logits(logits: NDArray, labels: NDArray) -> NDArray:
    """Per-example output margins, float64."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[1] < 2:
        raise InvalidInputError("margins need at least two classes")
    idx = np.arange(logits.shape[0])
    true = logits[idx, labels]
    others = logits.copy()
    others[idx, labels] = -np.inf
    return true - others.max(axis=1)


def aggregate_output_margin(
    net: Network,
    data: LabeledDataset,
    cfg: OutputMarginConfig = OutputMarginConfig(),
) -> float:
    """gamma_out of a dataset.  Returns 0.0 when no example qualifies."""
    logits = predict_logits(net, data.inputs)
    margins = margins_from_logits(logits, data.labels)
    if cfg.correct_only:
        margins = margins[np.argmax(logits, axis=1) == data.labels]
    if margins.size == 0:
        return 0.0
    if cfg.aggregation == "median":
        return float(np.median(margins))
    if cfg.aggregation == "mean":
        return math.fsum(margins.tolist()) / margins.size
    return float(np.min(margins))


def cross_entropy(logits: NDArray, labels: NDArray) -> tuple[float, Array]:
    """Mean softmax cross-entropy over a batch and its gradient with respect
    to the logits."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    idx = np.arange(logits.shape[0])
    loss = -log_softmax(logits, axis=1)[idx, labels]
    grad = softmax(logits, axis=1)
    grad[idx, labels] -= 1
    return float(np.mean(loss, dtype=np.float64)), grad / logits.shape[0]


def materialize_conv(layer: Conv2d, input_shape: Shape) -> sparse.csr_matrix:
    """Explicit sparse matrix of the bias-free convolution acting on the
    flattened (C, H, W) input."""
    c_in, h, w = input_shape
    out_ch, _, kh, kw = layer.kernel.shape
    _, ho, wo = layer_output_shape(layer, input_shape, 0)
    s, p = layer.stride, layer.padding
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    for o in range(out_ch):
        for y in range(ho):
            for x in range(wo):
                row = (o * ho + y) * wo + x
                for c in range(c_in):
                    for i in range(kh):
                        yi = y * s + i - p
                        if not 0 <= yi < h:
                            continue
                        for j in range(kw):
                            xi = x * s + j - p
                            if not 0 <= xi < w:
                                continue
                            rows.append(row)
                            cols.append((c * h + yi) * w + xi)
                            vals.append(float(layer.kernel[o, c, i, j]))
    return sparse.csr_matrix(
        (vals, (rows, cols)), shape=(out_ch * ho * wo, c_in * h * w)
    )
