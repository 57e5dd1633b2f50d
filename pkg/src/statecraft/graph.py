"""Model graphs: a DAG of layers with stable integer indices.

Layer indices follow the depth-first ordering Keras uses for functional
models: layers are grouped by their longest distance to the output (deepest
first) and, within one depth, by pre-order discovery from the output. That
ordering is what gives a boundary like "freeze the first 249 layers" of
Inception V3 its meaning.
"""

from collections import defaultdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, StateError
from .layers import BatchNorm, Dense, Input, Node


class GraphBuilder:
    def __init__(self, input_shape, name="model"):
        self.name = name
        self.nodes = []
        self._counters = defaultdict(int)
        self._layers = []
        self.blocks = {}
        self.input_layer = Input(input_shape)
        self.input = self.input_layer(_SeedNode(self, input_shape))

    def register(self, layer):
        if layer.name is None:
            base = layer.default_name
            count = self._counters[base]
            layer.name = base if count == 0 else f"{base}_{count}"
            self._counters[base] += 1
        elif any(l.name == layer.name for l in self._layers):
            raise ConfigError(f"duplicate layer name {layer.name!r}")
        self._layers.append(layer)

    def mark_block(self, name, node):
        """Record ``node`` as the last layer of a named block (e.g. ``mixed8``)."""
        self.blocks[name] = node.layer

    def build(self, output, dtype=None, seed=0, materialize=True):
        return ModelGraph(self, output, dtype=dtype, seed=seed, materialize=materialize)


class _SeedNode(Node):
    """Placeholder feeding the Input layer; never part of the built graph."""

    def __init__(self, builder, shape):
        super().__init__(None, [], tuple(shape), builder)


def keras_layer_order(output):
    """Order layers as Keras does for a functional model ending at ``output``."""
    discovery = {}
    post_order = []
    visited = set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            post_order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node.layer not in discovery:
            discovery[node.layer] = len(discovery)
        stack.append((node, True))
        parents = [p for p in node.inputs if not isinstance(p, _SeedNode)]
        for parent in reversed(parents):
            if id(parent) not in visited:
                stack.append((parent, False))

    depth = {}
    for node in reversed(post_order):
        d = depth.setdefault(id(node), 0)
        for parent in node.inputs:
            if isinstance(parent, _SeedNode):
                continue
            depth[id(parent)] = max(d + 1, depth.get(id(parent), 0))

    by_depth = defaultdict(list)
    for node in post_order:
        by_depth[depth[id(node)]].append(node)
    ordered = []
    for d in sorted(by_depth, reverse=True):
        ordered.extend(sorted(by_depth[d], key=lambda n: discovery[n.layer]))
    return ordered


class ModelGraph:
    def __init__(self, builder, output, dtype=None, seed=0, materialize=True):
        self.name = builder.name
        self.dtype = np.dtype(dtype or T.get_default_dtype()).type
        nodes = keras_layer_order(output)
        self.layers = [n.layer for n in nodes]
        position = {id(n): i for i, n in enumerate(nodes)}
        self.inbound = []
        for i, node in enumerate(nodes):
            node.layer.index = i
            parents = [position[id(p)] for p in node.inputs if not isinstance(p, _SeedNode)]
            if any(p >= i for p in parents):
                raise StateError("layer ordering is not topological")
            self.inbound.append(parents)
        if not isinstance(self.layers[0], Input):
            raise StateError("graph must start at its Input layer")
        self.input_shape = self.layers[0].shape
        self.output_shape = self.layers[-1].output_shape
        self.blocks = {name: layer.index for name, layer in builder.blocks.items() if layer.index is not None}
        self.materialized = False
        self.seed = seed
        self.metadata = {}
        if materialize:
            self.materialize(seed)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, key):
        if isinstance(key, str):
            for layer in self.layers:
                if layer.name == key:
                    return layer
            raise KeyError(key)
        return self.layers[key]

    def materialize(self, seed=None):
        seed = self.seed if seed is None else seed
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.materialize(rng, self.dtype)
        self.materialized = True

    # --- freezing and counting -------------------------------------------

    def resolve_boundary(self, boundary):
        """Turn an int, a block name or "all"/"none" into a layer count to freeze."""
        if boundary is None or boundary == "none":
            return 0
        if isinstance(boundary, str):
            if boundary in self.blocks:
                return self.blocks[boundary] + 1
            if boundary.isdigit():
                boundary = int(boundary)
            elif boundary == "backbone" and "backbone" in self.blocks:
                return self.blocks["backbone"] + 1
            else:
                raise ConfigError(f"unknown freeze boundary {boundary!r}; blocks: {sorted(self.blocks)}")
        if not 0 <= boundary <= len(self.layers):
            raise ConfigError(f"freeze boundary {boundary} outside [0, {len(self.layers)}]")
        return int(boundary)

    def freeze(self, boundary):
        """Freeze layers ``[0, k)`` and unfreeze the rest; returns ``k``.

        ``freeze(249)`` on Inception V3 freezes layers 0..248, i.e. everything
        up to and including the ``mixed8`` concatenation.
        """
        k = self.resolve_boundary(boundary)
        for layer in self.layers:
            layer.set_frozen(layer.index < k)
        return k

    def frozen_mask(self):
        return [layer.frozen for layer in self.layers]

    @property
    def total_param_count(self):
        return sum(l.param_count + l.state_count for l in self.layers)

    @property
    def trainable_param_count(self):
        return sum(l.trainable_param_count for l in self.layers)

    @property
    def non_trainable_param_count(self):
        return self.total_param_count - self.trainable_param_count

    def param_table(self):
        return [
            dict(index=l.index, name=l.name, kind=l.kind, params=l.param_count, state=l.state_count,
                 trainable=l.trainable_param_count, frozen=l.frozen)
            for l in self.layers
        ]

    def trainable_params(self):
        self._require_materialized()
        return [(p.name, p) for l in self.layers if not l.frozen for p in l.params.values()]

    # --- execution --------------------------------------------------------

    def _require_materialized(self):
        if not self.materialized:
            raise StateError(f"graph {self.name!r} was built for counting only; call materialize() first")

    def forward(self, x, training=False, logits=False):
        """Run the graph. With ``logits=True`` a softmax classifier returns pre-softmax scores."""
        self._require_materialized()
        if not isinstance(x, T.Tensor):
            x = T.Tensor(np.asarray(x, dtype=self.dtype))
        values = [None] * len(self.layers)
        last = len(self.layers) - 1
        consumers = [0] * len(self.layers)
        for parents in self.inbound:
            for p in parents:
                consumers[p] += 1
        for i, layer in enumerate(self.layers):
            inputs = [x] if i == 0 else [values[p] for p in self.inbound[i]]
            if i == last and logits and isinstance(layer, Dense) and layer.activation == "softmax":
                values[i] = layer.logits(inputs)
            else:
                values[i] = layer.forward(inputs, training=training)
            for p in self.inbound[i]:
                consumers[p] -= 1
                if consumers[p] == 0:
                    values[p] = None
        return values[last]

    def predict_proba(self, x, batch_size=32):
        out = []
        with T.no_grad():
            for start in range(0, len(x), batch_size):
                out.append(self.forward(x[start : start + batch_size]).data)
        return np.concatenate(out, axis=0)

    # --- state ------------------------------------------------------------

    def state_dict(self):
        """Every parameter and state array, keyed ``layer/param``, as copies."""
        self._require_materialized()
        out = {}
        for layer in self.layers:
            for k, p in layer.params.items():
                out[f"{layer.name}/{k}"] = p.data.copy()
            for k, v in layer.state.items():
                out[f"{layer.name}/{k}"] = v.copy()
        return out

    def entry_shapes(self):
        shapes = {}
        for layer in self.layers:
            for k, s in layer.param_shapes().items():
                shapes[f"{layer.name}/{k}"] = tuple(s)
            for k, s in layer.state_shapes().items():
                shapes[f"{layer.name}/{k}"] = tuple(s)
        return shapes

    def load_state_dict(self, values):
        self._require_materialized()
        by_name = {l.name: l for l in self.layers}
        for key, arr in values.items():
            lname, pname = key.rsplit("/", 1)
            layer = by_name[lname]
            if pname in layer.params:
                layer.params[pname].data = np.array(arr, dtype=self.dtype, copy=True)
            else:
                layer.state[pname] = np.array(arr, dtype=self.dtype, copy=True)

    def rng_states(self):
        return {l.name: l.rng.bit_generator.state for l in self.layers if hasattr(l, "rng")}

    def set_rng_states(self, states):
        for l in self.layers:
            if l.name in states:
                l.rng.bit_generator.state = states[l.name]

    def summary(self):
        lines = [f"{'idx':>4} {'name':<28} {'kind':<14} {'params':>12} {'trainable':>12}"]
        for row in self.param_table():
            lines.append(f"{row['index']:>4} {row['name']:<28} {row['kind']:<14} {row['params']:>12,} {row['trainable']:>12,}")
        lines.append(f"total {self.total_param_count:,}  trainable {self.trainable_param_count:,}  "
                     f"non-trainable {self.non_trainable_param_count:,}")
        return "\n".join(lines)


def bn_layers(graph):
    return [l for l in graph.layers if isinstance(l, BatchNorm)]
