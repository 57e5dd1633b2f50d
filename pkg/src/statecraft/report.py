"""Ablation runner and report files (report.csv, report.json, curves/<row>.csv).

CSV columns
-----------
Training report ``report.csv``: ``stage, epoch, train_loss, train_acc, val_loss,
val_acc, lr, seconds`` with one row per epoch.

Ablation ``report.csv``: ``axis, setting, status, val_loss, val_acc, test_acc,
trainable_params, provenance`` with one row per setting. ``status`` is ``ok``,
``failed`` (training aborted) or ``count_only`` (Inception V3 rows, which are
counted but not trained). ``curves/<row>.csv`` uses the training-report columns.

JSON files carry ``schema`` and ``schema_version``; every curve is a list of
``[epoch, value]`` pairs.
"""

import csv
import io
import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .config import config_diff
from .errors import ConfigError, StateError, TrainingAborted
from .optim import OptimizerConfig
from .trainer import TrainReport
from .weights import atomic_write_bytes
from .zoo import build_model

SCHEMA_VERSION = 1
EPOCH_COLUMNS = ("stage", "epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "seconds")
ABLATION_COLUMNS = ("axis", "setting", "status", "val_loss", "val_acc", "test_acc", "trainable_params", "provenance")
CURVE_METRICS = ("train_loss", "train_acc", "val_loss", "val_acc", "lr")
AXES = ("batch_size", "optimizer", "freeze_boundary", "regularizer")

# config keys each axis is allowed to change
_AXIS_KEYS = {
    "batch_size": {"pipeline.batch_size"},
    "optimizer": {f"{s}.optimizer.{k}" for s in ("stage1", "stage2") for k in OptimizerConfig.__dataclass_fields__},
    "freeze_boundary": {"stage1.freeze_boundary", "stage2.freeze_boundary"},
    "regularizer": {"model.dropout", "stage1.optimizer.l2", "stage2.optimizer.l2"},
}


@dataclass
class AblationRow:
    setting: str
    status: str
    val_loss: float = None
    val_acc: float = None
    test_acc: float = None
    trainable_params: int = None
    provenance: str = None
    curve: list = field(default_factory=list)
    error: str = None


@dataclass
class AblationTable:
    axis: str
    stage: str
    rows: list

    def to_dict(self):
        return {"schema": "statecraft.ablation", "schema_version": SCHEMA_VERSION, "axis": self.axis,
                "stage": self.stage, "rows": [_row_json(r) for r in self.rows]}


def _row_json(row):
    d = asdict(row)
    d["curves"] = _curves(row.curve)
    return d


def _curves(records):
    """{stage: {metric: [[epoch, value], ...]}} from epoch-record dicts."""
    out = {}
    for r in records:
        stage = out.setdefault(r["stage"], {m: [] for m in CURVE_METRICS})
        for m in CURVE_METRICS:
            stage[m].append([r["epoch"], r[m]])
    return out


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------


def parse_regularizer(setting):
    """'dropout=0.3', 'l2=1e-4' or 'none' -> (dropout rate, l2 coefficient)."""
    s = str(setting).strip().lower()
    if s == "none":
        return 0.0, 0.0
    m = re.fullmatch(r"(dropout|l2)=([0-9.eE+-]+)", s)
    if not m:
        raise ConfigError(f"bad regularizer setting {setting!r}; use dropout=<rate>, l2=<coef> or none")
    value = float(m.group(2))
    return (value, 0.0) if m.group(1) == "dropout" else (0.0, value)


def apply_setting(cfg, axis, setting, stage="stage2"):
    """Return a copy of ``cfg`` that differs only in the axis under study."""
    if axis == "batch_size":
        return replace(cfg, pipeline=replace(cfg.pipeline, batch_size=int(setting)))
    if axis == "optimizer":
        plan = getattr(cfg, stage)
        return replace(cfg, **{stage: replace(plan, optimizer=OptimizerConfig.preset(str(setting)))})
    if axis == "freeze_boundary":
        value = int(setting) if str(setting).isdigit() else str(setting)
        return replace(cfg, **{stage: replace(getattr(cfg, stage), freeze_boundary=value)})
    if axis == "regularizer":
        rate, l2 = parse_regularizer(setting)
        return replace(cfg, model=replace(cfg.model, dropout=rate),
                       stage1=replace(cfg.stage1, optimizer=replace(cfg.stage1.optimizer, l2=l2)),
                       stage2=replace(cfg.stage2, optimizer=replace(cfg.stage2.optimizer, l2=l2)))
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def check_row_configs(base, axis, configs):
    allowed = _AXIS_KEYS[axis]
    for cfg in configs:
        extra = [k for k in config_diff(base, cfg) if k not in allowed]
        if extra:
            raise StateError(f"ablation row differs from the base config outside axis {axis}: {extra}")


def _count_row(cfg, setting, stage):
    graph = build_model(cfg.resolved().model, materialize=False)
    graph.freeze(getattr(cfg, stage).freeze_boundary)
    return AblationRow(str(setting), "count_only", trainable_params=graph.trainable_param_count,
                       provenance=f"{stage} boundary (count only)")


def run_ablation(base, axis, settings, splits=None, stage="stage2", train_fn=None):
    """Train one model per setting under otherwise identical conditions.

    ``stage`` names the stage whose optimizer or freeze boundary is varied.
    Inception V3 configs produce count-only rows. A row that aborts is marked
    failed and the table is still returned.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    if stage not in ("stage1", "stage2"):
        raise ConfigError("stage must be stage1 or stage2")
    if len(settings) < 2:
        raise ConfigError("an ablation needs at least 2 settings")
    configs = [apply_setting(base, axis, s, stage) for s in settings]
    check_row_configs(base, axis, configs)
    if base.model.name == "inception_v3":
        return AblationTable(axis, stage, [_count_row(c, s, stage) for c, s in zip(configs, settings)])

    if train_fn is None:
        from .experiment import load_run_data, train_run

        splits = splits or load_run_data(base.resolved())
        train_fn = train_run
    rows = []
    for cfg, setting in zip(configs, settings):
        try:
            _, rep = train_fn(cfg, splits)
        except TrainingAborted as exc:
            rows.append(AblationRow(str(setting), "failed", error=str(exc)))
            continue
        rows.append(_train_row(setting, rep, axis, stage))
    return AblationTable(axis, stage, rows)


def _train_row(setting, rep, axis, stage):
    by_name = {s.name: s for s in rep.stages}
    final = rep.final
    measured = by_name[stage] if axis == "freeze_boundary" else by_name.get(final.stage if final else stage)
    return AblationRow(
        str(setting), "ok",
        val_loss=final.val_loss if final else None,
        val_acc=final.val_accuracy if final else None,
        test_acc=rep.test.accuracy if rep.test is not None else None,
        trainable_params=measured.trainable_params,
        provenance=f"{final.stage} epoch {final.epoch}" if final else "no epochs",
        curve=[asdict(r) for r in rep.history],
    )


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def _csv_bytes(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else r.get(c) for c in columns])
    return buf.getvalue().encode()


def _json_bytes(obj):
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def slug(text):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", str(text)).strip("_") or "row"


def train_report_dict(report):
    d = report.to_dict()
    d.update(schema="statecraft.train_report", schema_version=SCHEMA_VERSION,
             curves=_curves([asdict(r) for r in report.history]))
    return d


def emit_report(result, out_dir, formats=("csv", "json")):
    """Write report.csv / report.json (and curves/ for ablations); returns the paths."""
    bad = set(formats) - {"csv", "json"}
    if bad:
        raise ConfigError(f"unknown report formats {sorted(bad)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(result, TrainReport):
        if "csv" in formats:
            rows = [asdict(r) for r in result.history]
            written.append(_write(out / "report.csv", _csv_bytes(EPOCH_COLUMNS, rows)))
        if "json" in formats:
            written.append(_write(out / "report.json", _json_bytes(train_report_dict(result))))
        return written
    if isinstance(result, AblationTable):
        if "csv" in formats:
            rows = [dict(asdict(r), axis=result.axis) for r in result.rows]
            written.append(_write(out / "report.csv", _csv_bytes(ABLATION_COLUMNS, rows)))
        if "json" in formats:
            written.append(_write(out / "report.json", _json_bytes(result.to_dict())))
        curves = out / "curves"
        curves.mkdir(exist_ok=True)
        for row in result.rows:
            path = curves / f"{slug(result.axis)}_{slug(row.setting)}.csv"
            written.append(_write(path, _csv_bytes(EPOCH_COLUMNS, row.curve)))
        return written
    raise TypeError(f"cannot emit a report for {type(result).__name__}")


def _write(path, data):
    atomic_write_bytes(path, data)
    return path


def read_report(path):
    with open(path) as fh:
        d = json.load(fh)
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported report schema version {d.get('schema_version')}")
    return d
