from types import SimpleNamespace

import numpy as np
import pytest

from statecraft import synthetic
from statecraft.data import ArrayDataset, PreprocessConfig, preprocess
from statecraft.errors import ConfigError, NumericError, TrainingAborted
from statecraft.evaluation import evaluate
from statecraft.optim import OptimizerConfig
from statecraft.trainer import (
    EarlyStopping,
    StagePlan,
    default_stage_plans,
    reduce_lr_on_plateau,
    run_stage,
    run_two_stage,
)
from statecraft.zoo import build_mini_inception


def tiny_graph(seed=0, num_classes=3, **kw):
    return build_mini_inception(input_shape=(16, 16, 3), widths=(8, 8, 8), stem_filters=8, head_filters=8,
                                num_classes=num_classes, seed=seed, **kw)


def tiny_data(num_classes=3, per_class=6, seed=0):
    imgs, labels = synthetic.make_images(num_classes, per_class, 16, seed=seed)
    x = preprocess(imgs, cfg=PreprocessConfig(image_size=16))
    return ArrayDataset(x, labels, synthetic.class_names(num_classes))


def scripted(losses):
    """Evaluator that replays ``losses`` one epoch at a time."""
    it = iter(losses)

    def run(graph, data):
        return SimpleNamespace(loss=next(it), accuracy=0.5)
    return run


def plan(name="s", boundary="backbone", epochs=10, patience=5, algo="adam", lr=1e-3, **kw):
    return StagePlan(name, boundary, OptimizerConfig.preset(algo, lr=lr), max_epochs=epochs, patience=patience, **kw)


# --- early stopping --------------------------------------------------------


@pytest.mark.criterion("early stopping and best restore")
def test_stops_after_exactly_patience_non_improving_epochs():
    data = tiny_data()
    losses = [1.0, 0.8, 0.9, 0.85, 0.8, 0.95, 0.81, 0.5, 0.4]
    res = run_stage(tiny_graph(), plan(epochs=20), data, data, batch_size=8, evaluator=scripted(losses))
    assert [r.epoch for r in res.history] == [1, 2, 3, 4, 5, 6, 7]
    assert res.stopped_early and res.best.epoch == 2 and res.best.val_loss == 0.8


def test_early_stopping_min_delta_and_ties():
    es = EarlyStopping(patience=2, min_delta=0.1)
    assert es.update(1, 1.0)
    assert not es.update(2, 0.95)
    assert not es.update(3, 0.9)
    assert es.should_stop
    es = EarlyStopping(patience=5)
    es.update(1, 1.0)
    assert not es.update(2, 1.0)


def test_runs_all_epochs_without_plateau():
    data = tiny_data()
    res = run_stage(tiny_graph(), plan(epochs=4), data, data, batch_size=8,
                    evaluator=scripted([1.0, 0.9, 0.8, 0.7]))
    assert len(res.history) == 4 and not res.stopped_early and res.best.epoch == 4


@pytest.mark.criterion("early stopping and best restore")
def test_restored_checkpoint_reevaluates_to_recorded_minimum():
    data = tiny_data()
    g = tiny_graph()
    res = run_stage(g, plan(epochs=6, patience=2, lr=3e-3), data, data, batch_size=8)
    best = min(r.val_loss for r in res.history)
    assert res.best.val_loss == best
    assert evaluate(g, data, batch_size=8).loss == best


# --- lr schedule ---------------------------------------------------------------


def test_plateau_rule():
    cfg = OptimizerConfig(algo="sgd", lr=1e-3)
    assert reduce_lr_on_plateau([1.0, 0.9], cfg, 3) is None
    assert reduce_lr_on_plateau([1.0, 0.9, 0.8], cfg, 3) is None
    out = reduce_lr_on_plateau([1.0, 0.9, 0.95, 0.92], cfg, 3)
    assert out.lr == pytest.approx(1e-4)
    acted = set()
    assert reduce_lr_on_plateau([1.0, 0.9, 0.95, 0.92], cfg, 3, acted=acted) is not None
    assert reduce_lr_on_plateau([1.0, 0.9, 0.95, 0.92, 0.93], cfg, 3, acted=acted) is None
    assert reduce_lr_on_plateau([1.0, 0.9, 0.95, 0.92, 0.93, 0.8, 0.85, 0.82], cfg, 3, acted=acted) is not None


def test_stage_applies_plateau_reductions():
    data = tiny_data()
    losses = [1.0, 0.9, 0.95, 0.96, 0.97, 0.98]
    p = plan(epochs=6, patience=10, algo="sgd", lr=1e-3, lr_patience=3)
    res = run_stage(tiny_graph(), p, data, data, batch_size=8, evaluator=scripted(losses))
    assert res.lr_reductions == [4]
    assert [r.lr for r in res.history] == pytest.approx([1e-3] * 4 + [1e-4] * 2)


# --- aborts ----------------------------------------------------------------------


def test_nan_validation_loss_aborts_with_last_finite_checkpoint():
    data = tiny_data()
    g = tiny_graph()
    with pytest.raises(TrainingAborted) as info:
        run_stage(g, plan(epochs=5), data, data, batch_size=8, evaluator=scripted([0.9, 0.7, float("nan")]))
    ck = info.value.checkpoint
    assert ck.epoch == 2 and ck.val_loss == 0.7
    now = g.state_dict()
    assert all(np.array_equal(now[k], ck.weights[k]) for k in now)


def test_abort_in_first_epoch_restores_initial_weights():
    data = tiny_data()
    g = tiny_graph()
    before = g.state_dict()

    def bad(graph, d):
        raise NumericError("scripted failure")

    with pytest.raises(TrainingAborted) as info:
        run_stage(g, plan(epochs=3, lr=1e-2), data, data, batch_size=8, evaluator=bad)
    assert info.value.checkpoint.epoch == 0
    after = g.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_empty_splits_and_all_frozen_are_config_errors():
    data = tiny_data()
    empty = data.subset([])
    with pytest.raises(ConfigError):
        run_stage(tiny_graph(), plan(), data, empty)
    with pytest.raises(ConfigError):
        run_stage(tiny_graph(), plan(), empty, data)
    g = tiny_graph()
    with pytest.raises(ConfigError, match="frozen"):
        run_stage(g, plan(boundary=len(g), epochs=1), data, data, evaluator=scripted([1.0]))


# --- two stages -------------------------------------------------------------


def test_stage_boundaries_are_validated():
    g = tiny_graph()
    data = tiny_data()
    with pytest.raises(ConfigError, match="whole backbone"):
        run_two_stage(g, plan(boundary="block2"), plan(boundary="block1"), data, data)
    with pytest.raises(ConfigError, match="unfreeze more"):
        run_two_stage(g, plan(boundary="backbone"), plan(boundary="backbone"), data, data)


def test_zero_epoch_second_stage_keeps_stage_one_best():
    g = tiny_graph()
    data = tiny_data()
    rep = run_two_stage(g, plan("stage1", epochs=3), plan("stage2", "block1", epochs=0, algo="sgd"), data, data,
                        batch_size=8, evaluator=scripted([1.0, 0.8, 0.9]))
    assert rep.final.stage == "stage1" and rep.final.epoch == 2
    assert rep.stages[1].history == [] and rep.stages[1].best is None


@pytest.mark.criterion("early stopping and best restore")
def test_global_best_selection():
    g = tiny_graph()
    data = tiny_data()
    s1, s2 = plan("stage1", epochs=3), plan("stage2", "block1", epochs=3, algo="sgd")
    rep = run_two_stage(g, s1, s2, data, data, batch_size=8, evaluator=scripted([1.0, 0.6, 0.7, 0.9, 0.65, 0.8]))
    assert rep.final.stage == "stage1" and rep.final.val_loss == 0.6
    assert rep.final.val_loss <= rep.stages[0].best.val_loss
    rep = run_two_stage(tiny_graph(), s1, s2, data, data, batch_size=8,
                        evaluator=scripted([1.0, 0.6, 0.7, 0.9, 0.6, 0.5]))
    assert rep.final.stage == "stage2" and rep.final.val_loss == 0.5
    rep = run_two_stage(tiny_graph(), s1, s2, data, data, batch_size=8,
                        evaluator=scripted([1.0, 0.6, 0.7, 0.6, 0.9, 0.9]))
    assert rep.final.stage == "stage1"


@pytest.mark.criterion("freezing contract")
def test_frozen_layers_are_bit_identical_per_stage():
    g = tiny_graph()
    data = tiny_data()
    s1, s2 = default_stage_plans(g, stage1_epochs=2, stage2_epochs=2)
    s1 = StagePlan(**{**s1.__dict__, "optimizer": OptimizerConfig.preset("adam", lr=1e-2)})
    s2 = StagePlan(**{**s2.__dict__, "optimizer": OptimizerConfig.preset("sgd", lr=1e-2)})

    snapshots = {}

    def record(rec):
        snapshots.setdefault(rec.stage, []).append(g.state_dict())

    start = g.state_dict()
    rep = run_two_stage(g, s1, s2, data, data, batch_size=8, log=record)
    k1, k2 = rep.stages[0].freeze_index, rep.stages[1].freeze_index
    assert k1 == g.blocks["backbone"] + 1 and k2 < k1
    assert rep.stages[0].trainable_params == sum(l.param_count for l in g.layers if l.index >= k1)

    def layer_keys(limit):
        return [f"{l.name}/{p}" for l in g.layers if l.index < limit for p in (*l.params, *l.state)]

    stage2_start = rep.stages[0].best.weights
    for state in snapshots["stage1"]:
        assert all(np.array_equal(state[k], start[k]) for k in layer_keys(k1))
    for state in snapshots["stage2"]:
        assert all(np.array_equal(state[k], stage2_start[k]) for k in layer_keys(k2))
    # something above each boundary actually moved
    assert any(not np.array_equal(snapshots["stage1"][-1][k], start[k]) for k in start if k not in layer_keys(k1))


def test_second_stage_uses_fresh_optimizer_and_distinct_shuffles():
    g = tiny_graph()
    data = tiny_data()
    s1 = plan("stage1", epochs=1, lr=1e-2)
    s2 = plan("stage2", "block1", epochs=1, algo="sgd", lr=1e-2)
    rep = run_two_stage(g, s1, s2, data, data, batch_size=8)
    assert rep.stages[0].history[0].lr == 1e-2 and rep.stages[1].history[0].lr == 1e-2
    assert rep.stages[1].plan["optimizer"]["algo"] == "sgd"


def test_default_plans_for_inception_and_mini():
    from statecraft.zoo import build_inception_v3

    s1, s2 = default_stage_plans(build_inception_v3())
    assert (s1.freeze_boundary, s2.freeze_boundary) == ("backbone", 249)
    assert (s1.optimizer.algo, s2.optimizer.algo, s2.optimizer.nesterov) == ("adam", "sgd", True)
    s1, s2 = default_stage_plans(tiny_graph())
    assert s2.freeze_boundary == "block1"


@pytest.mark.parametrize("kwargs", [dict(patience=0), dict(max_epochs=-1), dict(monitor="val_acc"),
                                    dict(lr_patience=0), dict(l2_scope="body")])
def test_plan_validation(kwargs):
    with pytest.raises(ConfigError):
        StagePlan(**kwargs)


def test_plan_round_trip():
    p = plan(lr_patience=3)
    assert StagePlan.from_dict(p.to_dict()) == p
