"""Glue between RunConfig and the engine: data loading, model setup, pretraining
and the two-stage run. The CLI and the ablation runner both go through here."""

import logging
import warnings

import numpy as np

from . import synthetic
from .data import ArrayDataset, LabeledDataset, prepare_splits, preprocess, read_manifest, split_manifest
from .errors import ConfigError
from .trainer import StagePlan, run_stage, run_two_stage
from .weights import load_weights
from .zoo import build_mini_inception, build_model

log = logging.getLogger(__name__)


def load_run_data(cfg):
    """Preprocessed (train, val, test) ArrayDatasets for ``cfg``."""
    if not cfg.data_dir:
        raise ConfigError("no data_dir configured")
    size = cfg.pipeline.preprocess.image_size
    dataset = LabeledDataset.from_directory(cfg.data_dir, (size, size))
    if cfg.manifest:
        manifest = read_manifest(cfg.manifest)
    else:
        warnings.warn("no split manifest given; splitting with the configured fractions", stacklevel=2)
        manifest = split_manifest(dataset, cfg.pipeline.split)
    splits, _ = prepare_splits(dataset, manifest, cfg.pipeline)
    return splits


def build_run_graph(cfg):
    """Materialised model for ``cfg``, with backbone weights loaded when configured."""
    graph = build_model(cfg.model)
    graph.metadata.update(model=cfg.model.to_dict())
    if cfg.weights and not cfg.from_scratch:
        report = load_weights(graph, cfg.weights, strict=False)
        log.info("loaded %d entries from %s; %d layers left at init", len(report.matched), cfg.weights,
                 len(report.unmatched_layers))
    elif not cfg.from_scratch:
        raise ConfigError("train needs backbone weights (weights=...) or from_scratch=true")
    return graph


def train_run(cfg, splits=None, log_record=None):
    """Run both stages; returns (graph, TrainReport)."""
    cfg = cfg.resolved()
    splits = splits or load_run_data(cfg)
    graph = build_run_graph(cfg)
    augment = cfg.pipeline.augment if cfg.pipeline.augment_train else None
    report = run_two_stage(graph, cfg.stage1, cfg.stage2, splits["train"], splits["val"],
                           test_data=splits.get("test"), batch_size=cfg.pipeline.batch_size, seed=cfg.seed,
                           augment=augment, log=log_record, deterministic=cfg.deterministic)
    graph.metadata.update(class_names=list(splits["train"].class_names))
    return graph, report


def pretrain_data(cfg, num_classes):
    """Synthetic pretraining images, preprocessed and split into train/val."""
    size = cfg.pipeline.preprocess.image_size
    p = cfg.pretrain
    images, labels = synthetic.make_images(num_classes, p.per_class, size, seed=p.data_seed + cfg.seed)
    x = preprocess(images, cfg=cfg.pipeline.preprocess)
    rng = np.random.default_rng([cfg.seed, 7])
    order = rng.permutation(len(x))
    n_val = max(1, int(round(len(x) * p.val_frac)))
    names = synthetic.class_names(num_classes)
    val, train = order[:n_val], order[n_val:]
    return ArrayDataset(x[train], labels[train], names), ArrayDataset(x[val], labels[val], names)


def pretrain_run(cfg, data=None, log_record=None):
    """Train backbone + linear classifier from scratch; returns (graph, StageResult)."""
    cfg = cfg.resolved()
    if cfg.model.name != "mini_inception":
        raise ConfigError("pretraining is only supported for mini_inception")
    m = cfg.model
    train, val = data or pretrain_data(cfg, m.num_classes)
    graph = build_mini_inception(blocks=m.blocks, widths=tuple(m.widths), input_shape=(m.input_size, m.input_size, 3),
                                 num_classes=train.num_classes, head="linear", stem_filters=m.stem_filters,
                                 seed=m.seed)
    graph.metadata.update(model=m.to_dict(), pretrain=True)
    plan = StagePlan("pretrain", "none", cfg.pretrain.optimizer, max_epochs=cfg.pretrain.epochs,
                     patience=cfg.pretrain.patience)
    result = run_stage(graph, plan, train, val, batch_size=cfg.pipeline.batch_size, seed=cfg.seed,
                       augment=cfg.pipeline.augment if cfg.pipeline.augment_train else None,
                       log=log_record, deterministic=cfg.deterministic)
    return graph, result
