"""Layers with named parameters, freeze flags and stable graph indices.

A layer is called on graph :class:`Node` objects while a model is being
assembled (shape inference only) and run through :meth:`Layer.forward` on
tensors once the graph is built and its parameters are materialised.
"""

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, StateError


class Node:
    """Symbolic output of a layer inside a model under construction."""

    __slots__ = ("layer", "inputs", "shape", "builder")

    def __init__(self, layer, inputs, shape, builder):
        self.layer = layer
        self.inputs = inputs
        self.shape = shape
        self.builder = builder

    def __repr__(self):
        return f"Node({self.layer.name}, shape={self.shape})"


def glorot_uniform(rng, shape, dtype):
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = math.prod(shape[:-2])
        fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "Layer"
    default_name = "layer"

    def __init__(self, name=None):
        self.name = name
        self.frozen = False
        self.index = None
        self.input_shapes = None
        self.output_shape = None
        self.params = {}
        self.state = {}

    # --- construction -----------------------------------------------------

    def __call__(self, *nodes):
        if not nodes or not all(isinstance(n, Node) for n in nodes):
            raise TypeError(f"{self.kind} must be called on graph nodes; use forward() for tensors")
        builder = nodes[0].builder
        if self.input_shapes is not None:
            raise StateError(f"layer {self.name} is already attached to a graph")
        self.input_shapes = [n.shape for n in nodes]
        self.output_shape = self.compute_output_shape(self.input_shapes)
        builder.register(self)
        node = Node(self, list(nodes), self.output_shape, builder)
        builder.nodes.append(node)
        return node

    def compute_output_shape(self, input_shapes):
        return input_shapes[0]

    def param_shapes(self):
        """Trainable-capable parameter shapes, by name."""
        return {}

    def state_shapes(self):
        """Non-trainable state (e.g. moving statistics), by name."""
        return {}

    def materialize(self, rng, dtype):
        self.params = {k: T.Tensor(v, name=f"{self.name}/{k}", dtype=dtype) for k, v in self.init_params(rng, dtype).items()}
        self.state = {k: np.asarray(v, dtype=dtype) for k, v in self.init_state(dtype).items()}
        self.set_frozen(self.frozen)

    def init_params(self, rng, dtype):
        return {}

    def init_state(self, dtype):
        return {}

    # --- bookkeeping ------------------------------------------------------

    @property
    def param_count(self):
        return sum(math.prod(s) for s in self.param_shapes().values())

    @property
    def state_count(self):
        return sum(math.prod(s) for s in self.state_shapes().values())

    @property
    def trainable_param_count(self):
        return 0 if self.frozen else self.param_count

    def set_frozen(self, frozen):
        self.frozen = bool(frozen)
        for p in self.params.values():
            p.requires_grad = not self.frozen

    def config(self):
        return {}

    def forward(self, inputs, training=False):
        raise NotImplementedError

    def __repr__(self):
        flag = ", frozen" if self.frozen else ""
        return f"{self.kind}({self.name!r}, index={self.index}{flag})"


class Input(Layer):
    kind = "Input"
    default_name = "input_layer"

    def __init__(self, shape, name=None):
        super().__init__(name)
        self.shape = tuple(shape)

    def forward(self, inputs, training=False):
        x = inputs[0]
        if tuple(x.shape[1:]) != self.shape:
            raise ShapeError(f"model expects inputs of shape (N, {', '.join(map(str, self.shape))}), got {x.shape}")
        return x


class Conv2D(Layer):
    kind = "Conv2D"
    default_name = "conv2d"

    def __init__(self, filters, kernel_size, strides=1, padding="same", use_bias=True, name=None):
        super().__init__(name)
        if filters < 1:
            raise ConfigError("Conv2D needs at least one filter")
        self.filters = filters
        self.kernel_size = (kernel_size, kernel_size) if isinstance(kernel_size, int) else tuple(kernel_size)
        self.strides = (strides, strides) if isinstance(strides, int) else tuple(strides)
        self.padding = padding
        self.use_bias = use_bias

    def compute_output_shape(self, input_shapes):
        (shape,) = input_shapes
        if len(shape) != 3:
            raise ShapeError(f"Conv2D expects (H, W, C) inputs, got {shape}")
        h, w, _ = shape
        ho, _ = T.conv_output_geometry(h, self.kernel_size[0], self.strides[0], self.padding)
        wo, _ = T.conv_output_geometry(w, self.kernel_size[1], self.strides[1], self.padding)
        return (ho, wo, self.filters)

    def param_shapes(self):
        cin = self.input_shapes[0][-1]
        shapes = {"kernel": (*self.kernel_size, cin, self.filters)}
        if self.use_bias:
            shapes["bias"] = (self.filters,)
        return shapes

    def init_params(self, rng, dtype):
        shapes = self.param_shapes()
        out = {"kernel": glorot_uniform(rng, shapes["kernel"], dtype)}
        if self.use_bias:
            out["bias"] = np.zeros(shapes["bias"], dtype=dtype)
        return out

    def config(self):
        return dict(filters=self.filters, kernel_size=list(self.kernel_size), strides=list(self.strides),
                    padding=self.padding, use_bias=self.use_bias)

    def forward(self, inputs, training=False):
        return T.conv2d(inputs[0], self.params["kernel"], self.params.get("bias"),
                        stride=self.strides, padding=self.padding)


class BatchNorm(Layer):
    """Per-channel batch normalisation.

    ``scale=False`` drops gamma (the Inception V3 backbone convention). A
    frozen BatchNorm runs in inference mode, so its moving statistics stay put.
    """

    kind = "BatchNorm"
    default_name = "batch_normalization"

    def __init__(self, momentum=0.99, epsilon=1e-3, scale=True, name=None):
        super().__init__(name)
        if not 0 < momentum < 1:
            raise ConfigError("BatchNorm momentum must lie in (0, 1)")
        if epsilon <= 0:
            raise ConfigError("BatchNorm epsilon must be positive")
        self.momentum = momentum
        self.epsilon = epsilon
        self.scale = scale

    def param_shapes(self):
        c = self.input_shapes[0][-1]
        shapes = {"beta": (c,)}
        if self.scale:
            shapes["gamma"] = (c,)
        return shapes

    def state_shapes(self):
        c = self.input_shapes[0][-1]
        return {"moving_mean": (c,), "moving_variance": (c,)}

    def init_params(self, rng, dtype):
        c = self.input_shapes[0][-1]
        out = {"beta": np.zeros(c, dtype=dtype)}
        if self.scale:
            out["gamma"] = np.ones(c, dtype=dtype)
        return out

    def init_state(self, dtype):
        c = self.input_shapes[0][-1]
        return {"moving_mean": np.zeros(c, dtype=dtype), "moving_variance": np.ones(c, dtype=dtype)}

    def config(self):
        return dict(momentum=self.momentum, epsilon=self.epsilon, scale=self.scale)

    def forward(self, inputs, training=False):
        training = training and not self.frozen
        out, fn = T.batch_norm(
            inputs[0],
            self.params["beta"],
            self.params.get("gamma"),
            mean=self.state["moving_mean"],
            var=self.state["moving_variance"],
            epsilon=self.epsilon,
            training=training,
        )
        if training:
            m = self.momentum
            st = self.state
            st["moving_mean"] = (m * st["moving_mean"] + (1 - m) * fn.batch_mean).astype(st["moving_mean"].dtype)
            st["moving_variance"] = (m * st["moving_variance"] + (1 - m) * fn.batch_var).astype(st["moving_variance"].dtype)
        return out


ACTIVATIONS = {
    "relu": T.relu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "linear": lambda x: x,
}


class Activation(Layer):
    kind = "Activation"
    default_name = "activation"

    def __init__(self, fn="relu", name=None):
        super().__init__(name)
        if fn not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {fn!r}; choose from {sorted(ACTIVATIONS)}")
        self.fn = fn

    def config(self):
        return dict(fn=self.fn)

    def forward(self, inputs, training=False):
        return ACTIVATIONS[self.fn](inputs[0])


class GlobalAvgPool(Layer):
    kind = "GlobalAvgPool"
    default_name = "global_average_pooling2d"

    def compute_output_shape(self, input_shapes):
        (shape,) = input_shapes
        if len(shape) != 3 or shape[0] < 1 or shape[1] < 1:
            raise ShapeError(f"GlobalAvgPool expects (H, W, C) with H, W >= 1, got {shape}")
        return (shape[2],)

    def forward(self, inputs, training=False):
        return T.global_avg_pool(inputs[0])


def dropout(x, rate, training, rng):
    """Inverted dropout: survivors are scaled by 1 / (1 - rate) at train time."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / np.asarray(1 - rate, dtype=x.dtype)
    return T.dropout_mask(x, mask)


class Dropout(Layer):
    kind = "Dropout"
    default_name = "dropout"

    def __init__(self, rate, seed=0, name=None):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def config(self):
        return dict(rate=self.rate, seed=self.seed)

    def forward(self, inputs, training=False):
        return dropout(inputs[0], self.rate, training, self.rng)


class Dense(Layer):
    """Fully connected layer; ``activation="softmax"`` makes it a classifier."""

    kind = "Dense"
    default_name = "dense"

    def __init__(self, units, activation=None, name=None):
        super().__init__(name)
        if units < 1:
            raise ConfigError("Dense needs at least one unit")
        if activation not in (None, "softmax", *ACTIVATIONS):
            raise ConfigError(f"unknown activation {activation!r}")
        self.units = units
        self.activation = activation

    def compute_output_shape(self, input_shapes):
        (shape,) = input_shapes
        if len(shape) != 1:
            raise ShapeError(f"Dense expects flat (D,) inputs, got {shape}")
        return (self.units,)

    def param_shapes(self):
        return {"kernel": (self.input_shapes[0][0], self.units), "bias": (self.units,)}

    def init_params(self, rng, dtype):
        shapes = self.param_shapes()
        return {"kernel": glorot_uniform(rng, shapes["kernel"], dtype), "bias": np.zeros(self.units, dtype=dtype)}

    def config(self):
        return dict(units=self.units, activation=self.activation)

    def logits(self, inputs):
        return T.linear(inputs[0], self.params["kernel"], self.params["bias"])

    def forward(self, inputs, training=False):
        z = self.logits(inputs)
        if self.activation == "softmax":
            return T.softmax(z)
        if self.activation is not None:
            return ACTIVATIONS[self.activation](z)
        return z


class Concat(Layer):
    kind = "Concat"
    default_name = "concatenate"

    def compute_output_shape(self, input_shapes):
        lead = input_shapes[0][:-1]
        if any(s[:-1] != lead for s in input_shapes):
            raise ShapeError(f"Concat inputs disagree on spatial shape: {input_shapes}")
        return (*lead, sum(s[-1] for s in input_shapes))

    def forward(self, inputs, training=False):
        return T.concat(inputs)


class _Pool(Layer):
    def __init__(self, pool_size=3, strides=None, padding="valid", name=None):
        super().__init__(name)
        self.pool_size = (pool_size, pool_size) if isinstance(pool_size, int) else tuple(pool_size)
        strides = self.pool_size if strides is None else strides
        self.strides = (strides, strides) if isinstance(strides, int) else tuple(strides)
        self.padding = padding

    def compute_output_shape(self, input_shapes):
        (shape,) = input_shapes
        h, w, c = shape
        ho, _ = T.conv_output_geometry(h, self.pool_size[0], self.strides[0], self.padding)
        wo, _ = T.conv_output_geometry(w, self.pool_size[1], self.strides[1], self.padding)
        return (ho, wo, c)

    def config(self):
        return dict(pool_size=list(self.pool_size), strides=list(self.strides), padding=self.padding)


class MaxPool(_Pool):
    kind = "MaxPool"
    default_name = "max_pooling2d"

    def forward(self, inputs, training=False):
        return T.max_pool2d(inputs[0], self.pool_size, self.strides, self.padding)


class AvgPool(_Pool):
    kind = "AvgPool"
    default_name = "average_pooling2d"

    def forward(self, inputs, training=False):
        return T.avg_pool2d(inputs[0], self.pool_size, self.strides, self.padding)
