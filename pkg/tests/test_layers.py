import numpy as np
import pytest

from statecraft import tensor as T
from statecraft.errors import ConfigError, ShapeError, StateError
from statecraft.graph import GraphBuilder
from statecraft.layers import BatchNorm, Conv2D, Dense, Dropout, GlobalAvgPool, dropout
from statecraft.zoo import build_head, build_mini_inception


def _single(layer, shape, seed=0):
    b = GraphBuilder(shape)
    return b.build(layer(b.input), seed=seed)


def test_batchnorm_train_mode_normalises(f64, rng):
    g = _single(BatchNorm(), (3, 3, 4))
    x = rng.standard_normal((8, 3, 3, 4)) * 5 + 2
    out = g.forward(x, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1, atol=1e-3)


def test_batchnorm_moving_stats_update_and_inference(f64, rng):
    bn = BatchNorm(momentum=0.5)
    g = _single(bn, (2, 2, 3))
    x = rng.standard_normal((6, 2, 2, 3)) + 3
    g.forward(x, training=True)
    np.testing.assert_allclose(bn.state["moving_mean"], 0.5 * x.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(bn.state["moving_variance"], 0.5 + 0.5 * x.var(axis=(0, 1, 2)))
    mean, var = bn.state["moving_mean"], bn.state["moving_variance"]
    out = g.forward(x, training=False).data
    np.testing.assert_allclose(out, (x - mean) / np.sqrt(var + 1e-3))


def test_frozen_batchnorm_runs_in_inference_mode(f64, rng):
    bn = BatchNorm()
    g = _single(bn, (2, 2, 3))
    g.freeze(len(g))
    before = {k: v.copy() for k, v in bn.state.items()}
    g.forward(rng.standard_normal((4, 2, 2, 3)), training=True)
    for k in before:
        np.testing.assert_array_equal(bn.state[k], before[k])


def test_batchnorm_parameter_layout():
    g = _single(BatchNorm(scale=False), (4, 4, 6))
    assert sorted(g[1].params) == ["beta"]
    assert g[1].param_count == 6 and g[1].state_count == 12 and g.trainable_param_count == 6


@pytest.mark.parametrize("momentum,epsilon", [(0, 1e-3), (1, 1e-3), (0.9, 0)])
def test_batchnorm_rejects_bad_config(momentum, epsilon):
    with pytest.raises(ConfigError):
        BatchNorm(momentum=momentum, epsilon=epsilon)


def test_gap_of_constant_map(f64):
    g = _single(GlobalAvgPool(), (4, 5, 3))
    x = np.broadcast_to(np.array([1.0, -2.0, 7.0]), (2, 4, 5, 3))
    np.testing.assert_array_equal(g.forward(x).data, np.tile([1.0, -2.0, 7.0], (2, 1)))


def test_gap_rejects_empty_spatial_dims():
    b = GraphBuilder((0, 3, 2))
    with pytest.raises(ShapeError):
        GlobalAvgPool()(b.input)


def test_dropout_statistics(f64):
    rng = np.random.default_rng(0)
    x = T.Tensor(np.ones((200, 500)))
    out = dropout(x, 0.3, True, rng).data
    assert abs((out == 0).mean() - 0.3) < 0.01
    np.testing.assert_allclose(out[out != 0], 1 / 0.7)
    assert abs(out.mean() - 1) < 0.01


def test_dropout_is_identity_at_inference_and_rate_zero(f64):
    x = T.Tensor(np.arange(6.0))
    assert dropout(x, 0.3, False, np.random.default_rng(0)) is x
    assert dropout(x, 0.0, True, np.random.default_rng(0)) is x


@pytest.mark.parametrize("rate", [-0.1, 1.0])
def test_dropout_rejects_bad_rate(rate):
    with pytest.raises(ConfigError):
        Dropout(rate)


def test_dense_softmax_rows_sum_to_one(f64, rng):
    g = _single(Dense(11, activation="softmax"), (7,))
    p = g.forward(rng.standard_normal((5, 7))).data
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-12)
    assert g[1].param_count == 7 * 11 + 11


def test_logits_match_softmax_inputs(f64, rng):
    g = _single(Dense(4, activation="softmax"), (3,))
    x = rng.standard_normal((2, 3))
    z = g.forward(x, logits=True).data
    p = g.forward(x).data
    np.testing.assert_allclose(p, np.exp(z) / np.exp(z).sum(axis=1, keepdims=True))


def test_conv_layer_counts():
    g = _single(Conv2D(8, 3, use_bias=False), (5, 5, 3))
    assert g.total_param_count == 3 * 3 * 3 * 8
    g = _single(Conv2D(8, (1, 3)), (5, 5, 3))
    assert g.total_param_count == 3 * 3 * 8 + 8


def test_head_closed_form_count():
    # conv 3x3xCx1024 + bias, BN gamma/beta + moving stats, dense 1024x11 + bias
    c = 2048
    head = build_head(c, materialize=False)
    expected_trainable = 9 * c * 1024 + 1024 + 2 * 1024 + 1024 * 11 + 11
    assert head.trainable_param_count == expected_trainable == 18_888_715
    assert head.non_trainable_param_count == 2 * 1024


def test_freezing_semantics():
    g = build_mini_inception(materialize=False)
    k = g.freeze(10)
    assert k == 10
    assert g.frozen_mask() == [i < 10 for i in range(len(g))]
    assert g.freeze("block1") == g.blocks["block1"] + 1
    assert g.freeze("none") == 0 and not any(g.frozen_mask())
    assert g.freeze(len(g)) == len(g) and g.trainable_param_count == 0


@pytest.mark.parametrize("bad", [-1, 10_000, "mixed99"])
def test_freeze_rejects_bad_boundary(bad):
    g = build_mini_inception(materialize=False)
    with pytest.raises(ConfigError):
        g.freeze(bad)


def test_frozen_layers_get_no_updates_in_trainable_params():
    g = build_mini_inception()
    g.freeze("backbone")
    names = {name.split("/")[0] for name, _ in g.trainable_params()}
    assert names == {l.name for l in g.layers if l.index > g.blocks["backbone"] and l.params}


def test_counting_graph_cannot_run():
    g = build_mini_inception(materialize=False)
    with pytest.raises(StateError):
        g.forward(np.zeros((1, 64, 64, 3), dtype=np.float32))


def test_total_count_independent_of_freezing():
    g = build_mini_inception(materialize=False)
    total = g.total_param_count
    for b in ("none", "block1", "backbone", len(g)):
        g.freeze(b)
        assert g.trainable_param_count + g.non_trainable_param_count == total
