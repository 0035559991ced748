"""Layer zoo, AlexNet-style presets, forward/backward passes and inference."""

from dataclasses import dataclass, field
from math import prod

import numpy as np

from . import nn
from .nn import ConvParams, GradientBundle, LrnParams, ShapeError


@dataclass(frozen=True)
class Conv:
    params: ConvParams
    kind = "conv"

    def output_shape(self, shape):
        c, h, w = _expect_image(shape, self)
        if c != self.params.in_channels:
            raise ShapeError(f"conv expects {self.params.in_channels} channels, got {c}")
        return (self.params.out_channels, *self.params.output_hw(h, w))

    def param_shapes(self):
        p = self.params
        return [(p.out_channels, p.in_channels, p.kernel_h, p.kernel_w), (p.out_channels,)]

    def fan_in(self):
        p = self.params
        return p.in_channels * p.kernel_h * p.kernel_w


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def output_shape(self, shape):
        return shape


@dataclass(frozen=True)
class LRN:
    params: LrnParams = LrnParams()
    kind = "lrn"

    def output_shape(self, shape):
        _expect_image(shape, self)
        return shape


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int
    kind = "maxpool"

    def output_shape(self, shape):
        c, h, w = _expect_image(shape, self)
        if self.kernel < 1 or self.stride < 1 or self.kernel > h or self.kernel > w:
            raise ShapeError(f"pool window {self.kernel} does not fit {h}x{w}")
        return (c, nn.out_extent(h, self.kernel, self.stride), nn.out_extent(w, self.kernel, self.stride))


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def output_shape(self, shape):
        return (prod(shape),)


@dataclass(frozen=True)
class FullyConnected:
    in_features: int
    out_features: int
    kind = "fc"

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_features:
            raise ShapeError(f"fully connected layer expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def param_shapes(self):
        return [(self.in_features, self.out_features), (self.out_features,)]

    def fan_in(self):
        return self.in_features


@dataclass(frozen=True)
class Dropout:
    p: float = 0.5
    kind = "dropout"

    def __post_init__(self):
        if not 0 <= self.p < 1:
            raise ValueError("dropout probability must be in [0, 1)")

    def output_shape(self, shape):
        return shape


def _expect_image(shape, layer):
    if len(shape) != 3:
        raise ShapeError(f"{layer.kind} layer needs a C,H,W input, got {shape}")
    return shape


def is_trainable(layer):
    return isinstance(layer, (Conv, FullyConnected))


@dataclass
class ModelGraph:
    layers: list
    labels: list
    input_shape: tuple
    params: dict = field(default_factory=dict)
    input_mean: tuple = None
    dtype: type = np.float32
    version: int = 0

    def __post_init__(self):
        self.labels = [str(s) for s in self.labels]
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if not self.labels:
            raise ValueError("a model needs at least one label")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be unique")
        shapes = self.layer_shapes()
        if shapes[-1] != (len(self.labels),):
            raise ShapeError(f"final layer width {shapes[-1]} does not match {len(self.labels)} labels")
        for i, layer in enumerate(self.layers):
            if not is_trainable(layer):
                continue
            expected = layer.param_shapes()
            if i not in self.params:
                self.params[i] = [np.zeros(s, dtype=self.dtype) for s in expected]
            got = [t.shape for t in self.params[i]]
            if got != expected:
                raise ShapeError(f"layer {i} parameters {got} do not match {expected}")
        if self.input_mean is not None:
            self.input_mean = tuple(float(v) for v in self.input_mean)
            if len(self.input_mean) != self.input_shape[0]:
                raise ValueError("input_mean needs one value per input channel")

    def layer_shapes(self):
        """Per-sample shapes: input followed by each layer's output."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def parameter_count(self):
        return sum(t.size for ts in self.params.values() for t in ts)

    def trainable_indices(self):
        return [i for i, layer in enumerate(self.layers) if is_trainable(layer)]

    def astype(self, dtype):
        """Copy of the graph with parameters cast to ``dtype``."""
        params = {i: [t.astype(dtype) for t in ts] for i, ts in self.params.items()}
        return ModelGraph(list(self.layers), list(self.labels), self.input_shape, params,
                          self.input_mean, dtype)

    def copy(self):
        return self.astype(self.dtype)


def _conv(cin, cout, k, stride=1, pad=0):
    return Conv(ConvParams(cin, cout, k, k, stride, pad))


def build_alexnet(preset="canonical", labels=("face",), input_size=None, dtype=np.float32,
                  lrn_params=LrnParams()):
    """Build an AlexNet-style graph with zeroed parameters.

    ``canonical`` is the 5-conv / 3-FC network on 3x227x227 inputs; ``tiny``
    is a 3-conv / 2-FC analogue on 3x64x64 inputs. ``input_size`` overrides
    the tiny preset's square input extent.
    """
    labels = list(labels)
    if not labels:
        raise ValueError("labels must be non-empty")
    n_out = len(labels)
    if preset == "canonical":
        if input_size not in (None, 227):
            raise ValueError("the canonical preset has a fixed 227x227 input")
        layers = [
            _conv(3, 96, 11, stride=4), ReLU(), LRN(lrn_params), MaxPool(3, 2),
            _conv(96, 256, 5, pad=2), ReLU(), LRN(lrn_params), MaxPool(3, 2),
            _conv(256, 384, 3, pad=1), ReLU(),
            _conv(384, 384, 3, pad=1), ReLU(),
            _conv(384, 256, 3, pad=1), ReLU(), MaxPool(3, 2),
            Flatten(),
            FullyConnected(256 * 6 * 6, 4096), ReLU(), Dropout(0.5),
            FullyConnected(4096, 4096), ReLU(), Dropout(0.5),
            FullyConnected(4096, n_out),
        ]
        shape = (3, 227, 227)
    elif preset == "tiny":
        size = 64 if input_size is None else int(input_size)
        if size < 8 or size % 8:
            raise ValueError("tiny preset input size must be a positive multiple of 8")
        flat = 32 * (size // 8) ** 2
        layers = [
            _conv(3, 16, 5, pad=2), ReLU(), LRN(lrn_params), MaxPool(2, 2),
            _conv(16, 32, 5, pad=2), ReLU(), LRN(lrn_params), MaxPool(2, 2),
            _conv(32, 32, 3, pad=1), ReLU(), MaxPool(2, 2),
            Flatten(),
            FullyConnected(flat, 256), ReLU(), Dropout(0.5),
            FullyConnected(256, n_out),
        ]
        shape = (3, size, size)
    else:
        raise ValueError(f"unknown preset {preset!r}")
    return ModelGraph(layers, labels, shape, dtype=dtype)


OUTPUT_GAIN = 0.1


def init_weights(graph, seed):
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases, in place.

    The output layer's std is further scaled by ``OUTPUT_GAIN`` so an
    untrained model starts close to a uniform prediction.
    """
    rng = np.random.default_rng(seed)
    trainable = graph.trainable_indices()
    for i in trainable:
        layer = graph.layers[i]
        w_shape, b_shape = layer.param_shapes()
        std = np.sqrt(2.0 / layer.fan_in())
        if i == trainable[-1]:
            std *= OUTPUT_GAIN
        w = rng.standard_normal(w_shape) * std
        graph.params[i] = [w.astype(graph.dtype), np.zeros(b_shape, dtype=graph.dtype)]
    graph.version += 1
    return graph


@dataclass
class ForwardCache:
    graph_id: int
    version: int
    entries: list
    batch_shape: tuple


def forward(graph, x, train=False, rng=None, keep_cache=False):
    """Run the graph on a batch ``x`` (N,C,H,W) and return logits.

    Dropout is only applied when ``train`` is true, with masks drawn from
    ``rng``. With ``keep_cache`` the return value is ``(logits, cache)``.
    """
    x = np.asarray(x, dtype=graph.dtype)
    if x.ndim == 3:
        x = x[None]
    if tuple(x.shape[1:]) != graph.input_shape:
        raise ShapeError(f"model expects input {graph.input_shape}, got {tuple(x.shape[1:])}")
    if train and rng is None:
        rng = np.random.default_rng(0)
    entries = []
    for i, layer in enumerate(graph.layers):
        inp = x
        extra = None
        if isinstance(layer, Conv):
            store = {} if keep_cache else None
            w, b = graph.params[i]
            x = nn.conv2d(x, w, b, layer.params, cache=store)
            extra = store
        elif isinstance(layer, ReLU):
            x = nn.relu(x)
        elif isinstance(layer, LRN):
            x, extra = nn.lrn(x, layer.params, return_denominator=True)
        elif isinstance(layer, MaxPool):
            x, extra = nn.maxpool2d(x, layer.kernel, layer.stride)
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, FullyConnected):
            w, b = graph.params[i]
            x = nn.fully_connected(x, w, b)
        elif isinstance(layer, Dropout):
            if train and layer.p > 0:
                keep = 1.0 - layer.p
                extra = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
                x = x * extra
        if keep_cache:
            entries.append((inp, extra))
    if keep_cache:
        return x, ForwardCache(id(graph), graph.version, entries, x.shape)
    return x


def backward(graph, cache, logit_grad):
    """Backpropagate ``logit_grad`` through a cached forward pass."""
    if cache is None or not cache.entries:
        raise RuntimeError("backward needs a forward pass run with keep_cache=True")
    if cache.graph_id != id(graph) or cache.version != graph.version:
        raise RuntimeError("forward cache is stale: the graph changed after the forward pass")
    g = np.asarray(logit_grad, dtype=graph.dtype)
    if g.shape != cache.batch_shape:
        raise ShapeError(f"logit gradient {g.shape} does not match logits {cache.batch_shape}")
    bundle = GradientBundle()
    for i in range(len(graph.layers) - 1, -1, -1):
        layer = graph.layers[i]
        inp, extra = cache.entries[i]
        if isinstance(layer, Conv):
            w, _ = graph.params[i]
            g, dw, db = nn.conv2d_backward(g, inp, w, layer.params, cols=extra["cols"])
            bundle.params[i] = (dw, db)
        elif isinstance(layer, ReLU):
            g = nn.relu_backward(g, inp)
        elif isinstance(layer, LRN):
            g = nn.lrn_backward(g, inp, extra, layer.params)
        elif isinstance(layer, MaxPool):
            g = nn.maxpool2d_backward(g, extra, inp.shape, layer.kernel, layer.stride)
        elif isinstance(layer, Flatten):
            g = g.reshape(inp.shape)
        elif isinstance(layer, FullyConnected):
            w, _ = graph.params[i]
            g, dw, db = nn.fully_connected_backward(g, inp, w)
            bundle.params[i] = (dw, db)
        elif isinstance(layer, Dropout):
            if extra is not None:
                g = g * extra
    bundle.input = g
    return bundle


def predict_batch(graph, images):
    """Class probabilities for a batch of preprocessed images."""
    logits = forward(graph, images, train=False)
    return nn.softmax(logits.astype(np.float64))


def predict(graph, image):
    """Probability vector over ``graph.labels`` for one preprocessed image."""
    image = np.asarray(image)
    if image.ndim == 4 and image.shape[0] != 1:
        raise ShapeError("predict takes a single image; use predict_batch for batches")
    return predict_batch(graph, image)[0]
