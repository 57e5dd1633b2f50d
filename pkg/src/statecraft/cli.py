"""Command line: ``statecraft <command> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or weights error,
4 training aborted on a non-finite loss.
"""

import argparse
import json
import logging
import os
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import synthetic
from .config import RunConfig
from .data import (SUBSETS, ArrayDataset, LabeledDataset, SplitSpec, apply_manifest, load_arrays, load_image,
                   preprocess, read_manifest, split_indices, split_manifest, write_manifest)
from .errors import ConfigError, DataError, FormatError, TrainingAborted, WeightsMismatchError
from .evaluation import evaluate
from .optim import OptimizerConfig
from .weights import archive_metadata, atomic_write_bytes, load_weights, save_backbone, save_weights
from .zoo import ModelSpec, build_model

log = logging.getLogger("statecraft")

EXIT_USAGE, EXIT_DATA, EXIT_ABORT = 2, 3, 4


# --------------------------------------------------------------------------
# RunConfig flags: (flag, dotted config path, type, help)
# --------------------------------------------------------------------------


def _bool(text):
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text):
    return [int(t) for t in text.split(",") if t]


def _boundary(text):
    return int(text) if text.isdigit() else text


RUN_FLAGS = [
    ("--data-dir", "data_dir", str, "dataset root, one directory per class"),
    ("--manifest", "manifest", str, "split manifest written by `statecraft split`"),
    ("--out-dir", "out_dir", str, "directory for all run outputs"),
    ("--weights", "weights", str, "backbone weights archive to start from"),
    ("--from-scratch", "from_scratch", _bool, "train without backbone weights"),
    ("--deterministic", "deterministic", _bool, "omit wall-clock timings so logs are reproducible"),
    ("--seed", "seed", int, "global seed (init, shuffling, augmentation, dropout)"),
    ("--model", "model.name", str, "mini_inception or inception_v3"),
    ("--num-classes", "model.num_classes", int, "number of output classes"),
    ("--blocks", "model.blocks", int, "MiniInception block count"),
    ("--widths", "model.widths", _int_list, "MiniInception block widths, comma separated"),
    ("--stem-filters", "model.stem_filters", int, "MiniInception stem filters"),
    ("--head-filters", "model.head_filters", int, "filters of the head's 3x3 convolution"),
    ("--dropout", "model.dropout", float, "head dropout rate"),
    ("--activation", "model.activation", str, "head activation"),
    ("--image-size", "pipeline.preprocess.image_size", int, "square input size after resizing"),
    ("--rescale", "pipeline.preprocess.rescale", _bool, "scale pixels by 1/255"),
    ("--samplewise-center", "pipeline.preprocess.samplewise_center", _bool, "subtract each image's mean"),
    ("--samplewise-std", "pipeline.preprocess.samplewise_std_normalization", _bool, "divide by each image's std"),
    ("--zca", "pipeline.preprocess.zca", _bool, "apply ZCA whitening fitted on the training split"),
    ("--zca-epsilon", "pipeline.preprocess.zca_epsilon", float, "ZCA eigenvalue regulariser"),
    ("--zca-size", "pipeline.preprocess.zca_size", int, "resolution ZCA is fitted at"),
    ("--zca-fit", "pipeline.preprocess.zca_fit", str, "post_normalization or pre_normalization"),
    ("--augment", "pipeline.augment_train", _bool, "augment training batches"),
    ("--hflip", "pipeline.augment.hflip", _bool, "random horizontal flips"),
    ("--vflip", "pipeline.augment.vflip", _bool, "random vertical flips"),
    ("--shear", "pipeline.augment.shear", float, "shear range"),
    ("--shear-mode", "pipeline.augment.shear_mode", str, "factor or degrees"),
    ("--shift", "pipeline.augment.shift_frac", float, "shift range as a fraction of size"),
    ("--zoom", "pipeline.augment.zoom_frac", float, "zoom range: scale in [1-z, 1+z]"),
    ("--rotation", "pipeline.augment.rotation_deg", float, "rotation range in degrees"),
    ("--fill", "pipeline.augment.fill", str, "nearest or constant"),
    ("--batch-size", "pipeline.batch_size", int, "minibatch size"),
    ("--train-frac", "pipeline.split.train_frac", float, "split fraction for training"),
    ("--val-frac", "pipeline.split.val_frac", float, "split fraction for validation"),
    ("--test-frac", "pipeline.split.test_frac", float, "split fraction for testing"),
    ("--pretrain-epochs", "pretrain.epochs", int, "pretraining epochs"),
    ("--pretrain-per-class", "pretrain.per_class", int, "synthetic pretraining images per class"),
    ("--pretrain-data-seed", "pretrain.data_seed", int, "seed of the synthetic pretraining images"),
    ("--pretrain-patience", "pretrain.patience", int, "pretraining early-stopping patience"),
    ("--pretrain-lr", "pretrain.optimizer.lr", float, "pretraining Adam learning rate"),
]
for _stage in ("stage1", "stage2"):
    RUN_FLAGS += [
        (f"--{_stage}-freeze", f"{_stage}.freeze_boundary", _boundary, "layers [0, k) frozen, or a block name"),
        (f"--{_stage}-optimizer", f"{_stage}.optimizer", str, "adam, sgd or rmsprop with its preset settings"),
        (f"--{_stage}-lr", f"{_stage}.optimizer.lr", float, "learning rate"),
        (f"--{_stage}-l2", f"{_stage}.optimizer.l2", float, "L2 coefficient on kernels"),
        (f"--{_stage}-epochs", f"{_stage}.max_epochs", int, "maximum epochs"),
        (f"--{_stage}-patience", f"{_stage}.patience", int, "early-stopping patience"),
        (f"--{_stage}-min-delta", f"{_stage}.min_delta", float, "minimum val-loss decrease that counts"),
        (f"--{_stage}-lr-patience", f"{_stage}.lr_patience", int, "plateau epochs before lr / 10"),
    ]


def _dest(flag):
    return "cfg__" + flag.lstrip("-").replace("-", "_")


def add_run_flags(p):
    p.add_argument("--config", help="JSON RunConfig; flags override its values")
    g = p.add_argument_group("run configuration (each flag sets the RunConfig field shown)")
    for flag, path, typ, text in RUN_FLAGS:
        g.add_argument(flag, dest=_dest(flag), type=typ, default=None, help=f"{text} [{path}]")


def _set_path(d, path, value):
    keys = path.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def resolve_config(args):
    """Config file, then STATECRAFT_SEED, then flags (flags win)."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    d = cfg.to_dict()
    env_seed = os.environ.get("STATECRAFT_SEED")
    if env_seed is not None:
        try:
            d["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"STATECRAFT_SEED must be an integer, got {env_seed!r}") from None
    for flag, path, _, _ in RUN_FLAGS:
        value = getattr(args, _dest(flag))
        if value is None:
            continue
        if path.endswith(".optimizer"):
            value = OptimizerConfig.preset(value).to_dict()
        _set_path(d, path, value)
    # an lr or l2 flag must survive an optimizer preset given in the same call
    for flag, path, _, _ in RUN_FLAGS:
        value = getattr(args, _dest(flag))
        if value is not None and (path.endswith(".optimizer.lr") or path.endswith(".optimizer.l2")):
            _set_path(d, path, value)
    try:
        cfg = RunConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.resolved()


def _out_dir(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


class _LogBuffer:
    """Collects epoch records; written once (atomically) when the run ends."""

    def __init__(self, echo=True):
        self.lines = []
        self.echo = echo

    def __call__(self, record):
        line = record.to_json()
        self.lines.append(line)
        if self.echo:
            log.info(line)

    def write(self, path):
        atomic_write_bytes(path, "".join(line + "\n" for line in self.lines).encode())


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_split(args):
    fractions = [float(f) for f in args.fractions.split(",")]
    if len(fractions) != 3:
        raise ConfigError("--fractions needs three comma-separated values")
    spec = SplitSpec(*fractions, seed=args.seed)
    dataset = LabeledDataset.from_directory(args.data_dir)
    manifest = split_manifest(dataset, spec)
    write_manifest(manifest, args.out)
    idx = split_indices(dataset.labels, spec)
    print(f"{'class':<16} {'train':>6} {'val':>6} {'test':>6}")
    for cid, name in enumerate(dataset.class_names):
        counts = [int((dataset.labels[ix] == cid).sum()) for ix in idx]
        print(f"{name:<16} {counts[0]:>6} {counts[1]:>6} {counts[2]:>6}")
    print(f"{'total':<16} {len(idx[0]):>6} {len(idx[1]):>6} {len(idx[2]):>6}")
    return 0


def cmd_synth(args):
    synthetic.write_image_folder(args.out, args.classes, args.per_class, args.size, args.seed)
    print(f"wrote {args.classes * args.per_class} images to {args.out}")
    return 0


def _pretrain_data_from_dir(cfg):
    size = cfg.pipeline.preprocess.image_size
    dataset = LabeledDataset.from_directory(cfg.data_dir, (size, size))
    x = preprocess(load_arrays(dataset, size), cfg=cfg.pipeline.preprocess)
    labels = dataset.labels
    train_ix, val_ix, _ = split_indices(labels, SplitSpec(1 - cfg.pretrain.val_frac, cfg.pretrain.val_frac, 0.0,
                                                          seed=cfg.seed))
    names = dataset.class_names
    return ArrayDataset(x[train_ix], labels[train_ix], names), ArrayDataset(x[val_ix], labels[val_ix], names)


def cmd_pretrain(args):
    from .experiment import pretrain_run

    cfg = resolve_config(args)
    if not args.synthetic and not cfg.data_dir:
        raise ConfigError("pretrain needs --data-dir or --synthetic")
    out = _out_dir(cfg)
    cfg.save(out / "config.json")
    data = None if args.synthetic else _pretrain_data_from_dir(cfg)
    logbuf = _LogBuffer()
    target = Path(args.out) if args.out else out / "backbone.scw"
    try:
        graph, _ = pretrain_run(cfg, data, log_record=logbuf)
    except TrainingAborted as exc:
        logbuf.write(out / "pretrain_log.jsonl")
        exc.checkpoint_path = _save_checkpoint(exc.checkpoint, out / "aborted_checkpoint.scw")
        raise
    logbuf.write(out / "pretrain_log.jsonl")
    save_backbone(graph, target)
    print(f"backbone weights: {target}")
    return 0


def _save_checkpoint(checkpoint, path):
    from .weights import encode_archive

    atomic_write_bytes(path, encode_archive(checkpoint.weights, {"checkpoint": checkpoint.summary()}))
    return path


def _save_model(graph, path, cfg, zca_path=None):
    save_weights(graph, path, metadata={"model": cfg.model.to_dict(),
                                        "preprocess": cfg.pipeline.to_dict()["preprocess"],
                                        "zca": zca_path})


def cmd_train(args):
    from .data import prepare_splits
    from .experiment import build_run_graph
    from .report import emit_report
    from .trainer import run_two_stage

    cfg = resolve_config(args)
    if not cfg.data_dir:
        raise ConfigError("train needs --data-dir")
    out = _out_dir(cfg)
    cfg.save(out / "config.json")
    size = cfg.pipeline.preprocess.image_size
    dataset = LabeledDataset.from_directory(cfg.data_dir, (size, size))
    manifest = read_manifest(cfg.manifest) if cfg.manifest else split_manifest(dataset, cfg.pipeline.split)
    splits, zca = prepare_splits(dataset, manifest, cfg.pipeline)
    zca_name = None
    if zca is not None:
        zca_name = "zca.npz"
        np.savez(out / zca_name, mean=zca.mean, whitening=zca.whitening, epsilon=zca.epsilon,
                 shape=np.array(zca.shape or ()), fitted_on=zca.fitted_on)
    graph = build_run_graph(cfg)
    graph.metadata["class_names"] = list(dataset.class_names)
    logbuf = _LogBuffer()
    augment = cfg.pipeline.augment if cfg.pipeline.augment_train else None
    try:
        report = run_two_stage(graph, cfg.stage1, cfg.stage2, splits["train"], splits["val"],
                               test_data=splits["test"], batch_size=cfg.pipeline.batch_size, seed=cfg.seed,
                               augment=augment, log=logbuf, deterministic=cfg.deterministic)
    except TrainingAborted as exc:
        logbuf.write(out / "train_log.jsonl")
        _save_model(graph, out / "aborted_checkpoint.scw", cfg, zca_name)
        exc.checkpoint_path = out / "aborted_checkpoint.scw"
        raise
    logbuf.write(out / "train_log.jsonl")
    emit_report(report, out)
    _save_model(graph, out / "weights.scw", cfg, zca_name)
    if report.test is not None:
        _write_confusion(report.test, dataset.class_names, out / "confusion_test.csv")
    final = report.final.summary() if report.final else {}
    print(json.dumps({"final": final, "test_accuracy": report.test.accuracy if report.test else None}))
    return 0


def _write_confusion(result, class_names, path):
    lines = ["true\\pred," + ",".join(class_names)]
    for name, row in zip(class_names, result.confusion):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def _load_model_archive(path):
    meta = archive_metadata(path)
    if "model" not in meta:
        raise FormatError(f"{path} has no model description; was it saved by `statecraft train`?")
    spec = ModelSpec.from_dict(meta["model"])
    graph = build_model(spec)
    load_weights(graph, path, strict=True)
    from .data import PreprocessConfig, ZcaModel

    pre = PreprocessConfig(**meta.get("preprocess", {"image_size": spec.input_size}))
    zca = None
    if meta.get("zca"):
        z = np.load(Path(path).parent / meta["zca"])
        shape = tuple(int(s) for s in z["shape"]) or None
        zca = ZcaModel(z["mean"], z["whitening"], float(z["epsilon"]), str(z["fitted_on"]), shape)
    return graph, meta, pre, zca


def cmd_evaluate(args):
    graph, meta, pre, zca = _load_model_archive(args.weights)
    dataset = LabeledDataset.from_directory(args.data_dir, (pre.image_size, pre.image_size))
    subset = apply_manifest(dataset, read_manifest(args.manifest), args.subset)
    if len(subset) == 0:
        raise ConfigError(f"subset {args.subset!r} is empty")
    x = preprocess(load_arrays(subset, pre.image_size), zca, pre)
    result = evaluate(graph, ArrayDataset(x, subset.labels, dataset.class_names), batch_size=args.batch_size)
    out = Path(args.confusion) if args.confusion else Path(args.weights).parent / f"confusion_{args.subset}.csv"
    _write_confusion(result, dataset.class_names, out)
    print(json.dumps({"subset": args.subset, "n": result.n, "loss": result.loss, "accuracy": result.accuracy,
                      "precision": result.precision.round(6).tolist(), "recall": result.recall.round(6).tolist(),
                      "confusion_csv": str(out)}))
    return 0


def cmd_predict(args):
    graph, meta, pre, zca = _load_model_archive(args.weights)
    names = meta.get("class_names") or [f"class_{i}" for i in range(graph.output_shape[-1])]
    images = np.stack([load_image(p, (pre.image_size, pre.image_size)) for p in args.images])
    probs = graph.predict_proba(preprocess(images, zca, pre)).astype(np.float64)
    probs /= probs.sum(axis=1, keepdims=True)
    k = min(args.top_k, probs.shape[1])
    for path, p in zip(args.images, probs):
        order = sorted(range(len(p)), key=lambda i: (-p[i], i))[:k]
        print(path)
        for i in order:
            print(f"  {names[i]:<16} {p[i]:.6f}")
    return 0


def cmd_params(args):
    spec = ModelSpec(name=args.model, input_size=args.input_size, num_classes=args.num_classes,
                     head_filters=args.head_filters)
    if args.model == "inception_v3" and args.input_size < 75:
        spec.input_size = 299
    graph = build_model(spec, materialize=False)
    k = graph.freeze(_boundary(args.freeze))
    if args.layers:
        print(graph.summary())
    total, trainable = graph.total_param_count, graph.trainable_param_count
    print(f"model      {graph.name} ({len(graph)} layers)")
    print(f"boundary   {args.freeze} -> layers [0, {k}) frozen")
    print(f"total      {total:,}")
    print(f"trainable  {trainable:,}")
    print(f"frozen     {total - trainable:,}")
    return 0


def cmd_ablate(args):
    from .report import emit_report, run_ablation

    cfg = resolve_config(args)
    settings = [s.strip() for s in args.settings.split(",") if s.strip()]
    out = _out_dir(cfg)
    cfg.save(out / "config.json")
    table = run_ablation(cfg, args.axis, settings, stage=args.stage)
    emit_report(table, out)
    for row in table.rows:
        print(f"{row.setting:<16} {row.status:<10} val_loss={row.val_loss} val_acc={row.val_acc} "
              f"trainable={row.trainable_params}")
    return 0


# --------------------------------------------------------------------------
# parser and entry point
# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="statecraft", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch records to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write a stratified train/val/test manifest")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--fractions", default="0.68,0.15,0.17", help="train,val,test fractions")
    p.add_argument("--seed", type=int, default=int(os.environ.get("STATECRAFT_SEED", 0)))
    p.add_argument("--out", default="split_manifest.json")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="render the synthetic pattern dataset as PNG folders")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=11)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="train a MiniInception backbone from scratch")
    add_run_flags(p)
    p.add_argument("--synthetic", action="store_true", help="pretrain on generated images")
    p.add_argument("--out", help="backbone archive path (default <out-dir>/backbone.scw)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="two-stage fine-tuning run")
    add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics and confusion matrix for one split")
    p.add_argument("--weights", required=True, help="model archive written by train")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--subset", default="test", choices=SUBSETS)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--confusion", help="confusion CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="ranked class probabilities for images")
    p.add_argument("--weights", required=True)
    p.add_argument("--top-k", type=int, default=11)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("params", help="total / trainable / frozen parameter counts")
    p.add_argument("--model", default="inception_v3", choices=("inception_v3", "mini_inception"))
    p.add_argument("--freeze", default="249", help="layer count or block name (backbone, mixed8, block2, none)")
    p.add_argument("--input-size", type=int, default=299)
    p.add_argument("--num-classes", type=int, default=11)
    p.add_argument("--head-filters", type=int, default=1024)
    p.add_argument("--layers", action="store_true", help="print the per-layer table")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ablate", help="one training run per setting of an axis")
    add_run_flags(p)
    p.add_argument("--axis", required=True, choices=("batch_size", "optimizer", "freeze_boundary", "regularizer"))
    p.add_argument("--settings", required=True, help="comma-separated values, e.g. 16,32 or dropout=0.3,l2=1e-4")
    p.add_argument("--stage", default="stage2", choices=("stage1", "stage2"),
                   help="stage whose optimizer or freeze boundary is varied")
    p.set_defaults(func=cmd_ablate)
    return parser


def _thread_limit():
    value = os.environ.get("STATECRAFT_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    warnings.simplefilter("default")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"statecraft: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except WeightsMismatchError as exc:
        print(f"statecraft: weights error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"statecraft: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAborted as exc:
        where = getattr(exc, "checkpoint_path", None)
        print(f"statecraft: training aborted: {exc}" + (f"; last checkpoint: {where}" if where else ""),
              file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
