"""Model construction: the classification head, Inception V3, MiniInception."""

from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .graph import GraphBuilder
from .layers import Activation, AvgPool, BatchNorm, Concat, Conv2D, Dense, Dropout, GlobalAvgPool, MaxPool

INCEPTION_V3_FREEZE_ROWS = (197, 229, 249)


def conv_bn(x, filters, kh, kw, strides=1, padding="same", activation="relu"):
    """Bias-free convolution, beta-only BatchNorm, activation."""
    x = Conv2D(filters, (kh, kw), strides=strides, padding=padding, use_bias=False)(x)
    x = BatchNorm(scale=False)(x)
    return Activation(activation)(x)


def head_layers(num_classes=11, dropout=0.3, filters=1024, activation="relu", seed=0):
    """Conv 3x3 -> BatchNorm -> activation -> GAP -> Dropout -> softmax Dense."""
    if num_classes < 1:
        raise ConfigError("num_classes must be >= 1")
    return [
        Conv2D(filters, 3, padding="same", use_bias=True),
        BatchNorm(),
        Activation(activation),
        GlobalAvgPool(),
        Dropout(dropout, seed=seed),
        Dense(num_classes, activation="softmax"),
    ]


def attach_head(x, **kwargs):
    if len(x.shape) != 3 or x.shape[-1] < 1:
        raise ConfigError(f"head needs an (H, W, C>=1) feature map, got {x.shape}")
    for layer in head_layers(**kwargs):
        x = layer(x)
    return x


def build_head(backbone_output_channels, num_classes=11, dropout=0.3, filters=1024, spatial=(8, 8),
               activation="relu", seed=0, materialize=True):
    """The head alone, on a feature map with ``backbone_output_channels`` channels."""
    if backbone_output_channels < 1:
        raise ConfigError("backbone_output_channels must be >= 1")
    b = GraphBuilder((*spatial, backbone_output_channels), name="head")
    out = attach_head(b.input, num_classes=num_classes, dropout=dropout, filters=filters,
                      activation=activation, seed=seed)
    return b.build(out, seed=seed, materialize=materialize)


def _inception_v3_base(x, b):
    x = conv_bn(x, 32, 3, 3, strides=2, padding="valid")
    x = conv_bn(x, 32, 3, 3, padding="valid")
    x = conv_bn(x, 64, 3, 3)
    x = MaxPool(3, strides=2)(x)
    x = conv_bn(x, 80, 1, 1, padding="valid")
    x = conv_bn(x, 192, 3, 3, padding="valid")
    x = MaxPool(3, strides=2)(x)

    for i, pool_filters in enumerate((32, 64, 64)):
        b1 = conv_bn(x, 64, 1, 1)
        b5 = conv_bn(x, 48, 1, 1)
        b5 = conv_bn(b5, 64, 5, 5)
        b3 = conv_bn(x, 64, 1, 1)
        b3 = conv_bn(b3, 96, 3, 3)
        b3 = conv_bn(b3, 96, 3, 3)
        bp = AvgPool(3, strides=1, padding="same")(x)
        bp = conv_bn(bp, pool_filters, 1, 1)
        x = Concat(name=f"mixed{i}")(b1, b5, b3, bp)
        b.mark_block(f"mixed{i}", x)

    b3 = conv_bn(x, 384, 3, 3, strides=2, padding="valid")
    bd = conv_bn(x, 64, 1, 1)
    bd = conv_bn(bd, 96, 3, 3)
    bd = conv_bn(bd, 96, 3, 3, strides=2, padding="valid")
    bp = MaxPool(3, strides=2)(x)
    x = Concat(name="mixed3")(b3, bd, bp)
    b.mark_block("mixed3", x)

    for i, width in zip(range(4, 8), (128, 160, 160, 192)):
        b1 = conv_bn(x, 192, 1, 1)
        b7 = conv_bn(x, width, 1, 1)
        b7 = conv_bn(b7, width, 1, 7)
        b7 = conv_bn(b7, 192, 7, 1)
        bd = conv_bn(x, width, 1, 1)
        bd = conv_bn(bd, width, 7, 1)
        bd = conv_bn(bd, width, 1, 7)
        bd = conv_bn(bd, width, 7, 1)
        bd = conv_bn(bd, 192, 1, 7)
        bp = AvgPool(3, strides=1, padding="same")(x)
        bp = conv_bn(bp, 192, 1, 1)
        x = Concat(name=f"mixed{i}")(b1, b7, bd, bp)
        b.mark_block(f"mixed{i}", x)

    b3 = conv_bn(x, 192, 1, 1)
    b3 = conv_bn(b3, 320, 3, 3, strides=2, padding="valid")
    b7 = conv_bn(x, 192, 1, 1)
    b7 = conv_bn(b7, 192, 1, 7)
    b7 = conv_bn(b7, 192, 7, 1)
    b7 = conv_bn(b7, 192, 3, 3, strides=2, padding="valid")
    bp = MaxPool(3, strides=2)(x)
    x = Concat(name="mixed8")(b3, b7, bp)
    b.mark_block("mixed8", x)

    for i in range(2):
        b1 = conv_bn(x, 320, 1, 1)
        b3 = conv_bn(x, 384, 1, 1)
        b3 = Concat(name=f"mixed9_{i}")(conv_bn(b3, 384, 1, 3), conv_bn(b3, 384, 3, 1))
        bd = conv_bn(x, 448, 1, 1)
        bd = conv_bn(bd, 384, 3, 3)
        bd = Concat()(conv_bn(bd, 384, 1, 3), conv_bn(bd, 384, 3, 1))
        bp = AvgPool(3, strides=1, padding="same")(x)
        bp = conv_bn(bp, 192, 1, 1)
        x = Concat(name=f"mixed{9 + i}")(b1, b3, bd, bp)
        b.mark_block(f"mixed{9 + i}", x)
    b.mark_block("backbone", x)
    return x


def build_inception_v3(input_shape=(299, 299, 3), include_head=True, num_classes=11, dropout=0.3,
                       head_filters=1024, activation="relu", seed=0, materialize=False):
    """Inception V3 topology with the canonical layer enumeration (base = layers 0-310).

    Built for parameter counting and weight import; ``materialize=False``
    (the default) skips allocating the ~22M backbone weights.
    """
    if min(input_shape[:2]) < 75:
        raise ConfigError("Inception V3 needs inputs of at least 75x75")
    b = GraphBuilder(tuple(input_shape), name="inception_v3")
    x = _inception_v3_base(b.input, b)
    if include_head:
        x = attach_head(x, num_classes=num_classes, dropout=dropout, filters=head_filters,
                        activation=activation, seed=seed)
    return b.build(x, seed=seed, materialize=materialize)


def _mini_block(x, width):
    q = width // 4
    b1 = conv_bn(x, q, 1, 1)
    b3 = conv_bn(x, q, 1, 1)
    b3 = conv_bn(b3, width // 2, 3, 3)
    bp = AvgPool(3, strides=1, padding="same")(x)
    bp = conv_bn(bp, q, 1, 1)
    return Concat()(b1, b3, bp)


def mini_inception_backbone(x, b, blocks=3, widths=(32, 64, 128), stem_filters=16):
    if blocks < 2:
        raise ConfigError("MiniInception needs at least 2 blocks so a top-two fine-tune stage exists")
    if len(widths) != blocks:
        raise ConfigError(f"{blocks} blocks but {len(widths)} widths given")
    if any(w % 4 or w < 4 for w in widths):
        raise ConfigError("every block width must be a positive multiple of 4")
    x = conv_bn(x, stem_filters, 3, 3, strides=2)
    b.mark_block("stem", x)
    for i, width in enumerate(widths):
        if i:
            x = MaxPool(2, strides=2)(x)
        x = _mini_block(x, width)
        b.mark_block(f"block{i + 1}", x)
    b.mark_block("backbone", x)
    return x


def build_mini_inception(blocks=3, widths=(32, 64, 128), input_shape=(64, 64, 3), num_classes=11,
                         head="classifier", dropout=0.3, head_filters=1024, stem_filters=16,
                         activation="relu", seed=0, materialize=True, dtype=None):
    """Desk-scale inception-style backbone.

    ``head="classifier"`` appends the Conv/BN/GAP/Dropout/softmax head;
    ``head="linear"`` appends GAP + softmax Dense (used for pretraining);
    ``head=None`` returns the bare backbone.
    """
    b = GraphBuilder(tuple(input_shape), name="mini_inception")
    x = mini_inception_backbone(b.input, b, blocks=blocks, widths=tuple(widths), stem_filters=stem_filters)
    if head == "classifier":
        x = attach_head(x, num_classes=num_classes, dropout=dropout, filters=head_filters,
                        activation=activation, seed=seed)
    elif head == "linear":
        x = GlobalAvgPool()(x)
        x = Dense(num_classes, activation="softmax")(x)
    elif head is not None:
        raise ConfigError(f"unknown head {head!r}")
    return b.build(x, seed=seed, materialize=materialize, dtype=dtype)


@dataclass
class ModelSpec:
    """Everything needed to rebuild a graph; stored alongside saved weights."""

    name: str = "mini_inception"
    input_size: int = 64
    num_classes: int = 11
    blocks: int = 3
    widths: list = field(default_factory=lambda: [32, 64, 128])
    stem_filters: int = 16
    head: str = "classifier"
    head_filters: int = 1024
    dropout: float = 0.3
    activation: str = "relu"
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def build_model(spec, materialize=True, dtype=None):
    if spec.name == "mini_inception":
        return build_mini_inception(
            blocks=spec.blocks, widths=tuple(spec.widths), input_shape=(spec.input_size, spec.input_size, 3),
            num_classes=spec.num_classes, head=spec.head, dropout=spec.dropout, head_filters=spec.head_filters,
            stem_filters=spec.stem_filters, activation=spec.activation, seed=spec.seed,
            materialize=materialize, dtype=dtype,
        )
    if spec.name == "inception_v3":
        size = spec.input_size if spec.input_size >= 75 else 299
        graph = build_inception_v3(
            input_shape=(size, size, 3), include_head=spec.head == "classifier", num_classes=spec.num_classes,
            dropout=spec.dropout, head_filters=spec.head_filters, activation=spec.activation, seed=spec.seed,
            materialize=False,
        )
        if materialize:
            graph.dtype = dtype or graph.dtype
            graph.materialize()
        return graph
    raise ConfigError(f"unknown model {spec.name!r}; choose inception_v3 or mini_inception")
