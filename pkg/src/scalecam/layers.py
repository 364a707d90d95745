"""Named layers, the MBConv block and the sequential Network container."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import DTYPE, ShapeError, Tensor, relu, sigmoid, swish


class ForwardContext:
    """Per-pass settings: train/infer mode, optional activation record."""

    def __init__(self, training: bool = False, record: dict | None = None, generator=None):
        self.training = training
        self.record = record
        self.generator = generator

    def emit(self, name: str, value: Tensor) -> Tensor:
        if self.record is not None:
            self.record[name] = value
        return value


def truncated_normal(generator: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two std."""
    out = generator.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = generator.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def glorot_uniform(generator: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return generator.uniform(-limit, limit, size=(fan_in, fan_out))


class Layer:
    """A named leaf layer.

    ``params`` holds trainable tensors (replaced wholesale by the optimizer);
    ``buffers`` holds non-trainable arrays such as batch-norm statistics.
    """

    kind = "layer"
    spatial_output = True

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def init(self, generator: np.random.Generator) -> None:
        pass

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return ctx.emit(self.name, self.forward(x, ctx))

    def leaves(self):
        yield self

    def record_names(self) -> list[str]:
        return [self.name]

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Input(Layer):
    kind = "input"

    def forward(self, x, ctx):
        return x


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, name, in_ch, out_ch, kernel, stride=1, padding="same", use_bias=False):
        super().__init__(name)
        if out_ch < 1:
            raise ValueError(f"{name}: out_ch must be >= 1")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.use_bias = stride, padding, use_bias
        self.params["weights"] = Tensor(np.zeros((out_ch, in_ch, kernel, kernel)))
        if use_bias:
            self.params["bias"] = Tensor(np.zeros(out_ch))

    def init(self, generator):
        fan_in = self.in_ch * self.kernel * self.kernel
        w = truncated_normal(generator, (self.out_ch, self.in_ch, self.kernel, self.kernel), math.sqrt(2.0 / fan_in))
        self.params["weights"] = Tensor(w)

    def forward(self, x, ctx):
        return F.conv2d(x, self.params["weights"], self.params.get("bias"), self.stride, self.padding)


class DepthwiseConv2D(Layer):
    kind = "conv"

    def __init__(self, name, channels, kernel, stride=1, padding="same"):
        super().__init__(name)
        self.channels, self.kernel, self.stride, self.padding = channels, kernel, stride, padding
        self.params["kernels"] = Tensor(np.zeros((channels, kernel, kernel)))

    def init(self, generator):
        fan_in = self.kernel * self.kernel
        self.params["kernels"] = Tensor(
            truncated_normal(generator, (self.channels, self.kernel, self.kernel), math.sqrt(2.0 / fan_in))
        )

    def forward(self, x, ctx):
        return F.depthwise_conv2d(x, self.params["kernels"], self.stride, self.padding)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name, channels, momentum=0.99, epsilon=1e-3):
        super().__init__(name)
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"{name}: momentum must lie in (0, 1)")
        self.channels, self.momentum, self.epsilon = channels, momentum, epsilon
        self.params["gamma"] = Tensor(np.ones(channels))
        self.params["beta"] = Tensor(np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.buffers["updates"] = np.zeros(())

    def forward(self, x, ctx):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if ctx.training:
            out, mean, var = F.batch_norm_train(x, gamma, beta, self.epsilon)
            if self.buffers["updates"] == 0:
                # first batch replaces the placeholder statistics outright;
                # a 0.99 average would otherwise need ~500 steps to forget them
                self.buffers["running_mean"] = mean
                self.buffers["running_var"] = var
            else:
                m = self.momentum
                self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
                self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
            self.buffers["updates"] = self.buffers["updates"] + 1.0
            return out
        return F.batch_norm_infer(
            x, gamma, beta, self.buffers["running_mean"], self.buffers["running_var"], self.epsilon
        )


class Activation(Layer):
    kind = "activation"
    _FUNCS = {"swish": swish, "relu": relu, "sigmoid": sigmoid}

    def __init__(self, name, function="swish"):
        super().__init__(name)
        if function not in self._FUNCS:
            raise ValueError(f"unknown activation {function!r}")
        self.function = function

    def forward(self, x, ctx):
        return self._FUNCS[self.function](x)


class SqueezeExcite(Layer):
    """Global pool -> dense+swish -> dense+sigmoid -> per-channel gate."""

    kind = "se"

    def __init__(self, name, channels, reduced):
        super().__init__(name)
        self.channels, self.reduced = channels, reduced
        self.params["reduce_w"] = Tensor(np.zeros((channels, reduced)))
        self.params["reduce_b"] = Tensor(np.zeros(reduced))
        self.params["expand_w"] = Tensor(np.zeros((reduced, channels)))
        self.params["expand_b"] = Tensor(np.zeros(channels))

    def init(self, generator):
        self.params["reduce_w"] = Tensor(glorot_uniform(generator, self.channels, self.reduced))
        self.params["expand_w"] = Tensor(glorot_uniform(generator, self.reduced, self.channels))

    def gate(self, x: Tensor) -> Tensor:
        p = self.params
        pooled = F.global_avg_pool(x)
        hidden = swish(F.dense(pooled, p["reduce_w"], p["reduce_b"]))
        return sigmoid(F.dense(hidden, p["expand_w"], p["expand_b"]))

    def forward(self, x, ctx):
        return F.scale_channels(x, self.gate(x))


class GlobalAvgPool(Layer):
    kind = "pool"
    spatial_output = False

    def forward(self, x, ctx):
        return F.global_avg_pool(x)


class Dense(Layer):
    kind = "dense"
    spatial_output = False

    def __init__(self, name, in_features, out_features, use_bias=True):
        super().__init__(name)
        self.in_features, self.out_features = in_features, out_features
        self.params["weights"] = Tensor(np.zeros((in_features, out_features)))
        if use_bias:
            self.params["bias"] = Tensor(np.zeros(out_features))

    def init(self, generator):
        self.params["weights"] = Tensor(glorot_uniform(generator, self.in_features, self.out_features))

    def forward(self, x, ctx):
        return F.dense(x, self.params["weights"], self.params.get("bias"))


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name, rate=0.2):
        super().__init__(name)
        self.rate = rate

    def forward(self, x, ctx):
        if not ctx.training or self.rate == 0.0:
            return x
        if ctx.generator is None:
            raise ValueError(f"{self.name}: training-mode dropout needs a generator")
        return F.dropout(x, self.rate, ctx.generator)


class Softmax(Layer):
    kind = "softmax"
    spatial_output = False

    def forward(self, x, ctx):
        return F.softmax(x)


@dataclass(frozen=True)
class MBConvConfig:
    expansion: float
    kernel: int
    stride: int
    in_ch: int
    out_ch: int
    se_ratio: float = 0.25

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"MBConv stride must be 1 or 2, got {self.stride}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"MBConv kernel must be odd, got {self.kernel}")
        if self.expansion <= 0:
            raise ValueError("MBConv expansion must be positive")
        if not 0.0 <= self.se_ratio <= 1.0:
            raise ValueError("MBConv se_ratio must lie in [0, 1]")

    @property
    def expanded_ch(self) -> int:
        return self.in_ch if self.expansion == 1 else math.ceil(self.expansion * self.in_ch)

    @property
    def se_reduced(self) -> int:
        return max(1, math.ceil(self.in_ch * self.se_ratio)) if self.se_ratio > 0 else 0

    @property
    def has_skip(self) -> bool:
        return self.stride == 1 and self.in_ch == self.out_ch


class MBConvBlock:
    """Mobile inverted bottleneck: expand, depthwise, squeeze-excite, project."""

    kind = "block"
    spatial_output = True

    def __init__(self, name: str, cfg: MBConvConfig, momentum=0.99, epsilon=1e-3):
        self.name, self.cfg = name, cfg
        mid = cfg.expanded_ch
        layers: list[Layer] = []
        if cfg.expansion != 1:
            layers += [
                Conv2D(f"{name}_expand_conv", cfg.in_ch, mid, 1),
                BatchNorm(f"{name}_expand_bn", mid, momentum, epsilon),
                Activation(f"{name}_expand_act"),
            ]
        layers += [
            DepthwiseConv2D(f"{name}_dwconv", mid, cfg.kernel, cfg.stride),
            BatchNorm(f"{name}_bn", mid, momentum, epsilon),
            Activation(f"{name}_act"),
        ]
        if cfg.se_reduced:
            layers.append(SqueezeExcite(f"{name}_se", mid, cfg.se_reduced))
        layers += [
            Conv2D(f"{name}_project_conv", mid, cfg.out_ch, 1),
            BatchNorm(f"{name}_project_bn", cfg.out_ch, momentum, epsilon),
        ]
        self.layers = layers

    def leaves(self):
        yield from self.layers

    def record_names(self) -> list[str]:
        names = [layer.name for layer in self.layers]
        if self.cfg.has_skip:
            names.append(f"{self.name}_add")
        return names

    def init(self, generator):
        for layer in self.layers:
            layer.init(generator)

    def num_params(self) -> int:
        return sum(layer.num_params() for layer in self.layers)

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if x.shape[1] != self.cfg.in_ch:
            raise ShapeError(f"{self.name}: expected {self.cfg.in_ch} input channels, got {x.shape[1]}")
        h = x
        for layer in self.layers:
            h = layer(h, ctx)
        if self.cfg.has_skip:
            h = ctx.emit(f"{self.name}_add", h + x)
        return h

    def __repr__(self) -> str:
        return f"MBConvBlock({self.name!r}, {self.cfg})"


def mbconv(x: Tensor, block: MBConvBlock, training: bool = False) -> Tensor:
    return block(x, ForwardContext(training=training))


class Network:
    """Sequential stack of layers and blocks ending in a K-way softmax."""

    def __init__(self, layers, classes: int, resolution: int | None = None, in_channels: int = 1, plan=None):
        self.layers = list(layers)
        self.classes = classes
        self.resolution = resolution
        self.in_channels = in_channels
        self.plan = plan
        names = self.layer_names
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate layer names: {dupes}")
        if not isinstance(self.layers[-1], Softmax):
            raise ValueError("final layer must be a Softmax")

    @property
    def layer_names(self) -> list[str]:
        return [n for layer in self.layers for n in layer.record_names()]

    def leaves(self) -> list[Layer]:
        return [leaf for layer in self.layers for leaf in layer.leaves()]

    def leaf(self, name: str) -> Layer:
        for leaf in self.leaves():
            if leaf.name == name:
                return leaf
        raise KeyError(f"unknown layer {name!r}; valid layers: {', '.join(self.layer_names)}")

    def parameters(self) -> list[tuple[str, Layer, str]]:
        """(qualified name, owning layer, key) for every trainable tensor, in layer order."""
        return [(f"{leaf.name}.{key}", leaf, key) for leaf in self.leaves() for key in leaf.params]

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers of each leaf, in layer order."""
        out = []
        for leaf in self.leaves():
            out += [(f"{leaf.name}.{k}", v.data) for k, v in leaf.params.items()]
            out += [(f"{leaf.name}.{k}", v) for k, v in leaf.buffers.items()]
        return out

    def load_state(self, entries) -> None:
        """Load ``(qualified name, array)`` pairs in :meth:`state` order.

        Validates everything before assigning anything; the error names the
        first layer whose tensor name or shape disagrees.
        """
        entries = [(name, np.asarray(v.data if isinstance(v, Tensor) else v, dtype=DTYPE)) for name, v in entries]
        expected = self.state()
        for (name, ref), (got_name, arr) in zip(expected, entries):
            layer_name = name.rsplit(".", 1)[0]
            if got_name != name:
                raise ShapeError(f"layer {layer_name!r}: expected tensor {name}, found {got_name}")
            if arr.shape != ref.shape:
                raise ShapeError(f"layer {layer_name!r}: tensor {name} has shape {arr.shape}, expected {ref.shape}")
        if len(entries) != len(expected):
            first = expected[len(entries)][0] if len(entries) < len(expected) else entries[len(expected)][0]
            raise ShapeError(
                f"layer {first.rsplit('.', 1)[0]!r}: state has {len(entries)} tensors, network expects {len(expected)}"
            )
        for name, arr in entries:
            layer_name, key = name.rsplit(".", 1)
            leaf = self.leaf(layer_name)
            if key in leaf.params:
                leaf.params[key] = Tensor(arr)
            else:
                leaf.buffers[key] = np.array(arr)

    def num_params(self) -> int:
        return sum(layer.num_params() for layer in self.layers)

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4:
            raise ShapeError(f"network input must be [N,C,H,W], got {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"network expects {self.in_channels} input channels, got {x.shape[1]}")
        if self.resolution is not None and x.shape[2:] != (self.resolution, self.resolution):
            raise ShapeError(
                f"input resolution {x.shape[2]}x{x.shape[3]} does not match the network's "
                f"{self.resolution}x{self.resolution}; resize explicitly"
            )

    def forward(self, x: Tensor, training: bool = False, record: dict | None = None, generator=None) -> Tensor:
        self._check_input(x)
        ctx = ForwardContext(training, record, generator)
        h = x
        for layer in self.layers:
            h = layer(h, ctx)
        return h

    def forward_from(self, name: str, activation: Tensor, training: bool = False, record: dict | None = None) -> Tensor:
        """Run the layers after top-level layer ``name`` starting from ``activation``."""
        top = [layer.name for layer in self.layers]
        if name not in top:
            raise KeyError(f"{name!r} is not a top-level layer; choose from {', '.join(top)}")
        ctx = ForwardContext(training, record)
        h = activation
        for layer in self.layers[top.index(name) + 1 :]:
            h = layer(h, ctx)
        return h

    def __repr__(self) -> str:
        return f"Network({len(self.layer_names)} named layers, K={self.classes}, resolution={self.resolution})"


def forward(network: Network, x: Tensor) -> Tensor:
    """Inference-mode class probabilities [N,K]."""
    return network.forward(x)


def forward_with_recording(network: Network, x: Tensor, training: bool = False) -> tuple[Tensor, dict[str, Tensor]]:
    record: dict[str, Tensor] = {}
    probs = network.forward(x, training=training, record=record)
    return probs, record
