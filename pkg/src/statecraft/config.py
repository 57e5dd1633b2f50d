"""RunConfig: the complete, serialisable description of a run."""

import json
from dataclasses import asdict, dataclass, field, replace

from .data import PipelineConfig, PreprocessConfig
from .errors import ConfigError
from .optim import OptimizerConfig
from .trainer import StagePlan
from .weights import atomic_write_bytes
from .zoo import ModelSpec


@dataclass
class PretrainConfig:
    """Backbone pretraining on a labelled (by default synthetic) image set."""

    epochs: int = 30
    per_class: int = 50
    data_seed: int = 1000
    patience: int = 5
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(algo="adam", lr=1e-3))
    val_frac: float = 0.2

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig.from_dict(self.optimizer)
        if self.epochs < 0 or self.per_class < 1:
            raise ConfigError("pretrain epochs must be >= 0 and per_class >= 1")
        if not 0 < self.val_frac < 1:
            raise ConfigError("pretrain val_frac must lie in (0, 1)")


def _default_stage1():
    return StagePlan("stage1", "backbone", OptimizerConfig.preset("adam"), max_epochs=30)


def _default_stage2():
    return StagePlan("stage2", "block1", OptimizerConfig.preset("sgd"), max_epochs=30)


def _desk_pipeline():
    return PipelineConfig(preprocess=PreprocessConfig(image_size=64))


@dataclass
class RunConfig:
    data_dir: str = None
    manifest: str = None
    out_dir: str = "run"
    weights: str = None
    from_scratch: bool = False
    deterministic: bool = False
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    pipeline: PipelineConfig = field(default_factory=_desk_pipeline)
    stage1: StagePlan = field(default_factory=_default_stage1)
    stage2: StagePlan = field(default_factory=_default_stage2)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def __post_init__(self):
        if self.model.name not in ("mini_inception", "inception_v3"):
            raise ConfigError(f"unknown model {self.model.name!r}")

    def resolved(self):
        """Copy with the global seed pushed into every seeded component and the
        model input size tied to the preprocessing size."""
        model = replace(self.model, seed=self.seed, input_size=self.pipeline.preprocess.image_size)
        pipeline = replace(self.pipeline, seed=self.seed, augment=replace(self.pipeline.augment, seed=self.seed))
        return replace(self, model=model, pipeline=pipeline)

    def to_dict(self):
        d = asdict(self)
        d["stage1"] = self.stage1.to_dict()
        d["stage2"] = self.stage2.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelSpec.from_dict(d["model"])
        if "pipeline" in d:
            d["pipeline"] = PipelineConfig.from_dict(d["pipeline"])
        for key in ("stage1", "stage2"):
            if key in d:
                d[key] = StagePlan.from_dict(d[key])
        if "pretrain" in d:
            d["pretrain"] = PretrainConfig(**d["pretrain"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        atomic_write_bytes(path, self.to_json().encode())

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


def flatten(d, prefix=""):
    """Nested dict -> {"a.b.c": value}, used to diff configs."""
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_diff(a, b):
    fa, fb = flatten(a.to_dict()), flatten(b.to_dict())
    return sorted(k for k in set(fa) | set(fb) if fa.get(k) != fb.get(k))

