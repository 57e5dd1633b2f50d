"""Two-stage transfer learning: train the head on a frozen backbone, then
fine-tune the top blocks, with early stopping and best-weights restoration."""

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import batches
from .errors import ConfigError, NumericError, TrainingAborted
from .evaluation import evaluate
from .optim import Optimizer, OptimizerConfig, l2_gradients, step_lr_down


@dataclass
class StagePlan:
    name: str = "stage1"
    freeze_boundary: object = "backbone"
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig.preset("adam"))
    max_epochs: int = 30
    patience: int = 5
    min_delta: float = 0.0
    monitor: str = "val_loss"
    lr_patience: int = None
    lr_factor: float = 10.0
    l2_scope: str = "all"

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig.from_dict(self.optimizer)
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.monitor != "val_loss":
            raise ConfigError("only val_loss can be monitored")
        if self.lr_patience is not None and self.lr_patience < 1:
            raise ConfigError("lr_patience must be >= 1")
        if self.l2_scope not in ("all", "head"):
            raise ConfigError("l2_scope must be all or head")

    def to_dict(self):
        d = asdict(self)
        d["optimizer"] = self.optimizer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def default_stage_plans(graph, stage1_epochs=30, stage2_epochs=30, fine_tune_boundary=None):
    """Adam on the head with the backbone frozen, then Nesterov SGD above the boundary.

    The default fine-tune boundary is 249 for Inception V3 and the end of
    ``block<n-2>`` (the top two blocks trainable) for MiniInception.
    """
    if fine_tune_boundary is None:
        if "mixed8" in graph.blocks:
            fine_tune_boundary = 249
        else:
            n = sum(1 for b in graph.blocks if b.startswith("block"))
            fine_tune_boundary = f"block{n - 2}" if n > 2 else "stem"
    stage1 = StagePlan("stage1", "backbone", OptimizerConfig.preset("adam"), max_epochs=stage1_epochs)
    stage2 = StagePlan("stage2", fine_tune_boundary, OptimizerConfig.preset("sgd"), max_epochs=stage2_epochs)
    return stage1, stage2


class EarlyStopping:
    """Counts consecutive epochs without a strict improvement of more than ``min_delta``."""

    def __init__(self, patience=5, min_delta=0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = None
        self.wait = 0

    def update(self, epoch, value):
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self):
        return self.wait >= self.patience


def reduce_lr_on_plateau(history, cfg, patience_lr=3, factor=10.0, acted=None):
    """Return ``cfg`` with its lr stepped down if val loss has plateaued, else None.

    A plateau starts at the first epoch holding the current minimum and counts
    that epoch, so ``patience_lr`` flat epochs trigger one reduction. ``acted``
    (a set, updated in place) records plateaus already reduced so each gets at
    most one step.
    """
    if len(history) < patience_lr:
        return None
    start = int(np.argmin(history))
    if len(history) - start < patience_lr:
        return None
    if acted is not None:
        if start in acted:
            return None
        acted.add(start)
    return step_lr_down(cfg, factor)


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    weights: dict
    optimizer_state: dict
    val_loss: float
    val_accuracy: float
    rng_states: dict
    lr: float

    def restore(self, graph):
        graph.load_state_dict(self.weights)
        graph.set_rng_states(self.rng_states)

    def summary(self):
        return {"stage": self.stage, "epoch": self.epoch, "val_loss": self.val_loss,
                "val_accuracy": self.val_accuracy, "lr": self.lr}


def snapshot(graph, stage, epoch, optimizer=None, val_loss=None, val_accuracy=None):
    return Checkpoint(stage, epoch, graph.state_dict(), optimizer.state_dict() if optimizer else None,
                      val_loss, val_accuracy, graph.rng_states(), optimizer.lr if optimizer else None)


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float = None

    def to_json(self):
        return json.dumps(asdict(self), separators=(", ", ": "))


@dataclass
class StageResult:
    name: str
    plan: dict
    freeze_index: int
    trainable_params: int
    history: list = field(default_factory=list)
    best: Checkpoint = None
    stopped_early: bool = False
    lr_reductions: list = field(default_factory=list)

    def to_dict(self):
        return {"name": self.name, "plan": self.plan, "freeze_index": self.freeze_index,
                "trainable_params": self.trainable_params, "history": [asdict(r) for r in self.history],
                "best": self.best.summary() if self.best else None, "stopped_early": self.stopped_early,
                "lr_reductions": self.lr_reductions}


@dataclass
class TrainReport:
    stages: list
    final: Checkpoint
    test: object = None

    @property
    def history(self):
        return [r for s in self.stages for r in s.history]

    def to_dict(self):
        return {"stages": [s.to_dict() for s in self.stages],
                "final": self.final.summary() if self.final else None,
                "test": self.test.to_dict() if self.test is not None else None}


def _default_evaluator(batch_size):
    def run(graph, data):
        return evaluate(graph, data, batch_size=batch_size)
    return run


def _l2_names(graph, params, scope):
    if scope == "all" or "backbone" not in graph.blocks:
        return {n for n, _ in params}
    head = {l.name for l in graph.layers if l.index > graph.blocks["backbone"]}
    return {n for n, _ in params if n.rsplit("/", 1)[0] in head}


def train_epoch(graph, optimizer, data, batch_size, seed, epoch_key, augment_spec=None, l2_names=()):
    params = graph.trainable_params()
    if not params:
        raise ConfigError("every layer is frozen; nothing to train")
    l2_params = [(n, p) for n, p in params if n in l2_names]
    loss_sum, correct, seen = 0.0, 0, 0
    for xb, yb in batches(data, batch_size, seed=seed, epoch=epoch_key, augment_spec=augment_spec):
        for _, p in params:
            p.grad = None
        logits = graph.forward(xb, training=True, logits=True)
        loss = T.softmax_cross_entropy(logits, targets=yb)
        loss.backward()
        optimizer.step(params, l2_gradients(l2_params, optimizer.cfg.l2))
        loss_sum += float(loss.data) * len(yb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
        seen += len(yb)
    return loss_sum / seen, correct / seen


def run_stage(graph, plan, train_data, val_data, *, batch_size=32, seed=0, augment=None, evaluator=None,
              log=None, deterministic=False, epoch_offset=0):
    """Train one stage; returns a StageResult whose ``best`` the graph is restored to.

    ``evaluator(graph, val_data)`` must return an object with ``loss`` and
    ``accuracy``; tests swap in scripted ones. On a non-finite loss the graph
    is restored to the last finite checkpoint and TrainingAborted carries it.
    """
    if len(val_data) == 0:
        raise ConfigError("validation set is empty")
    if len(train_data) == 0:
        raise ConfigError("training set is empty")
    evaluator = evaluator or _default_evaluator(batch_size)
    k = graph.freeze(plan.freeze_boundary)
    optimizer = Optimizer(plan.optimizer)
    params = graph.trainable_params()
    result = StageResult(plan.name, plan.to_dict(), k, graph.trainable_param_count)
    stopper = EarlyStopping(plan.patience, plan.min_delta)
    acted = set()
    fallback = snapshot(graph, plan.name, 0, optimizer)
    l2_names = _l2_names(graph, params, plan.l2_scope)

    for epoch in range(1, plan.max_epochs + 1):
        started = time.perf_counter()
        lr = optimizer.lr
        try:
            train_loss, train_acc = train_epoch(graph, optimizer, train_data, batch_size, seed,
                                                epoch_offset + epoch, augment, l2_names)
            ev = evaluator(graph, val_data)
            if not math.isfinite(ev.loss):
                raise NumericError(f"validation loss is {ev.loss}")
        except NumericError as exc:
            last = result.best or fallback
            last.restore(graph)
            raise TrainingAborted(f"{plan.name} epoch {epoch}: {exc}", checkpoint=last) from exc
        record = EpochRecord(plan.name, epoch, train_loss, train_acc, float(ev.loss), float(ev.accuracy), lr,
                             None if deterministic else round(time.perf_counter() - started, 3))
        result.history.append(record)
        if log:
            log(record)
        if stopper.update(epoch, record.val_loss):
            result.best = snapshot(graph, plan.name, epoch, optimizer, record.val_loss, record.val_acc)
        if stopper.should_stop:
            result.stopped_early = True
            break
        if plan.lr_patience:
            reduced = reduce_lr_on_plateau([r.val_loss for r in result.history], optimizer.cfg,
                                           plan.lr_patience, plan.lr_factor, acted)
            if reduced is not None and reduced.lr != optimizer.lr:
                optimizer.cfg = reduced
                result.lr_reductions.append(epoch)
    if result.best is not None:
        result.best.restore(graph)
    return result


def run_two_stage(graph, stage1, stage2, train_data, val_data, *, test_data=None, batch_size=32, seed=0,
                  augment=None, evaluator=None, log=None, deterministic=False):
    """Stage 1 with the backbone frozen, stage 2 from stage 1's best weights with
    a fresh optimizer; the lower of the two best checkpoints is restored at the end."""
    k1 = graph.resolve_boundary(stage1.freeze_boundary)
    k2 = graph.resolve_boundary(stage2.freeze_boundary)
    if "backbone" in graph.blocks and k1 <= graph.blocks["backbone"]:
        raise ConfigError(f"stage 1 must freeze the whole backbone (boundary >= {graph.blocks['backbone'] + 1})")
    if k2 >= k1:
        raise ConfigError("stage 2 must unfreeze more layers than stage 1")
    common = dict(batch_size=batch_size, seed=seed, augment=augment, evaluator=evaluator, log=log,
                  deterministic=deterministic)
    first = run_stage(graph, stage1, train_data, val_data, **common)
    second = run_stage(graph, stage2, train_data, val_data, epoch_offset=10_000, **common)
    final = second.best
    if first.best is not None and (final is None or first.best.val_loss <= final.val_loss):
        final = first.best
    if final is not None:
        final.restore(graph)
    test = evaluate(graph, test_data, batch_size=batch_size) if test_data is not None and len(test_data) else None
    return TrainReport([first, second], final, test)
