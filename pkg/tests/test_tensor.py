import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import max_relative_error, naive_conv2d, numeric_grad
from statecraft import _kernels
from statecraft import tensor as T
from statecraft.errors import NumericError, ShapeError, StateError

FD_INSTANCES = 20
FD_TOLERANCE = 1e-4


def _labels(rng, n, k):
    return rng.integers(0, k, size=n)


def _case_add(rng):
    return [rng.standard_normal((3, 4)), rng.standard_normal((4,))], lambda a, b: T.add(a, b)


def _case_mul(rng):
    return [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))], lambda a, b: T.mul(a, b)


def _case_matmul(rng):
    return [rng.standard_normal((3, 5)), rng.standard_normal((5, 2))], lambda a, b: T.matmul(a, b)


def _case_linear(rng):
    return [rng.standard_normal((4, 6)), rng.standard_normal((6, 3)), rng.standard_normal(3)], T.linear


def _case_relu(rng):
    # keep entries away from the kink so central differences are valid
    x = rng.standard_normal((3, 7))
    x[np.abs(x) < 1e-2] = 0.5
    return [x], T.relu


def _case_tanh(rng):
    return [rng.standard_normal((3, 5))], T.tanh


def _case_sigmoid(rng):
    return [rng.standard_normal((3, 5))], T.sigmoid


def _case_softmax(rng):
    return [rng.standard_normal((4, 5))], T.softmax


def _case_cross_entropy(rng):
    p = rng.uniform(0.05, 1.0, size=(4, 5))
    p /= p.sum(axis=1, keepdims=True)
    y = _labels(rng, 4, 5)
    return [p], lambda q: T.cross_entropy(q, y)


def _case_softmax_ce(rng):
    y = _labels(rng, 6, 4)
    return [rng.standard_normal((6, 4))], lambda z: T.softmax_cross_entropy(z, y)


def _case_conv_same(rng):
    stride = int(rng.integers(1, 3))
    args = [rng.standard_normal((2, 5, 5, 3)), rng.standard_normal((3, 3, 3, 2)), rng.standard_normal(2)]
    return args, lambda x, k, b: T.conv2d(x, k, b, stride=stride, padding="same")


def _case_conv_valid(rng):
    args = [rng.standard_normal((1, 6, 5, 2)), rng.standard_normal((1, 3, 2, 3))]
    return args, lambda x, k: T.conv2d(x, k, stride=(2, 1), padding="valid")


def _case_maxpool(rng):
    padding = ["valid", "same"][int(rng.integers(0, 2))]
    return [rng.standard_normal((2, 6, 6, 2))], lambda x: T.max_pool2d(x, pool=3, stride=2, padding=padding)


def _case_avgpool(rng):
    padding = ["valid", "same"][int(rng.integers(0, 2))]
    return [rng.standard_normal((2, 5, 5, 2))], lambda x: T.avg_pool2d(x, pool=3, stride=1, padding=padding)


def _case_gap(rng):
    return [rng.standard_normal((2, 3, 4, 3))], T.global_avg_pool


def _case_concat(rng):
    return ([rng.standard_normal((2, 3, 3, 2)), rng.standard_normal((2, 3, 3, 1))],
            lambda a, b: T.concat([a, b]))


def _case_reshape(rng):
    return [rng.standard_normal((2, 3, 4))], lambda x: T.reshape(x, (6, 4))


def _case_dropout(rng):
    mask = (rng.random((3, 4)) > 0.3) / 0.7
    return [rng.standard_normal((3, 4))], lambda x: T.dropout_mask(x, mask)


def _case_bn_train(rng):
    args = [rng.standard_normal((4, 2, 2, 3)) * 2 + 1, rng.standard_normal(3), rng.standard_normal(3)]
    return args, lambda x, b, g: T.batch_norm(x, b, g, training=True)[0]


def _case_bn_beta_only(rng):
    args = [rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(2)]
    return args, lambda x, b: T.batch_norm(x, b, training=True)[0]


def _case_bn_infer(rng):
    mean, var = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    args = [rng.standard_normal((2, 2, 2, 3)), rng.standard_normal(3), rng.standard_normal(3)]
    return args, lambda x, b, g: T.batch_norm(x, b, g, mean=mean, var=var, training=False)[0]


def _case_mean_sum(rng):
    return [rng.standard_normal((3, 3))], lambda x: T.mul(T.mean_all(x), T.sum_all(x))


CASES = {name[6:]: fn for name, fn in globals().items() if name.startswith("_case_")}


def gradient_error(case, seed):
    rng = np.random.default_rng(seed)
    arrays, op = case(rng)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = None

    def loss_value():
        out = op(*[T.Tensor(a) for a in arrays])
        return float((out.data * probe).sum())

    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    probe = np.random.default_rng(seed + 1).standard_normal(out.shape)
    out.backward(probe)
    numeric = numeric_grad(loss_value, arrays, h=1e-5)
    return max(max_relative_error(t.grad, g) for t, g in zip(tensors, numeric))


@pytest.mark.criterion("gradient correctness")
@pytest.mark.parametrize("name", sorted(CASES))
def test_finite_difference_gradients(name):
    errors = [gradient_error(CASES[name], seed) for seed in range(FD_INSTANCES)]
    assert max(errors) < FD_TOLERANCE, f"{name}: worst relative error {max(errors):.2e}"


# --- conv2d ---------------------------------------------------------------


def test_identity_center_kernel_returns_input(f64):
    x = np.ones((1, 3, 3, 1))
    k = np.zeros((3, 3, 1, 1))
    k[1, 1] = 1
    out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(np.zeros(1)), padding="same")
    np.testing.assert_array_equal(out.data, x)


def test_zero_input_gives_bias(f64):
    out = T.conv2d(T.Tensor(np.zeros((2, 4, 4, 3))), T.Tensor(np.ones((3, 3, 3, 2))),
                   T.Tensor(np.array([0.5, -2.0])))
    assert np.all(out.data[..., 0] == 0.5) and np.all(out.data[..., 1] == -2.0)


@pytest.mark.criterion("oracle equivalence")
@pytest.mark.parametrize("backend", ["numba", "numpy"])
@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
def test_conv_matches_loop_oracle(backend, stride, padding, rng):
    x = rng.standard_normal((2, 5, 5, 3))
    k = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    prev = _kernels.use_backend(backend)
    try:
        out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), stride=stride, padding=padding).data
    finally:
        _kernels.use_backend(prev)
    np.testing.assert_allclose(out, naive_conv2d(x, k, b, stride, padding), atol=1e-6, rtol=0)


def test_conv_even_kernel_same_padding_matches_oracle(rng):
    x = rng.standard_normal((1, 6, 7, 2))
    k = rng.standard_normal((2, 4, 2, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=1, padding="same").data
    np.testing.assert_allclose(out, naive_conv2d(x, k, None, 1, "same"), atol=1e-6)


def test_conv_bias_gradient_counts_outputs(f64, rng):
    x = T.Tensor(rng.standard_normal((2, 5, 5, 3)))
    k = T.Tensor(rng.standard_normal((3, 3, 3, 4)), requires_grad=True)
    b = T.Tensor(np.zeros(4), requires_grad=True)
    out = T.conv2d(x, k, b, stride=2)
    out.backward(np.ones(out.shape))
    np.testing.assert_array_equal(b.grad, np.full(4, 2 * 3 * 3))


def test_conv_zero_upstream_gives_zero_gradients(f64, rng):
    x = T.Tensor(rng.standard_normal((1, 4, 4, 2)), requires_grad=True)
    k = T.Tensor(rng.standard_normal((3, 3, 2, 2)), requires_grad=True)
    b = T.Tensor(np.zeros(2), requires_grad=True)
    out = T.conv2d(x, k, b)
    out.backward(np.zeros(out.shape))
    for t in (x, k, b):
        assert not np.any(t.grad)


def test_conv_backward_without_saved_activations_is_state_error(f64, rng):
    x = T.Tensor(rng.standard_normal((1, 4, 4, 2)), requires_grad=True)
    k = T.Tensor(rng.standard_normal((3, 3, 2, 2)), requires_grad=True)
    out = T.conv2d(x, k)
    out._ctx.saved = None
    with pytest.raises(StateError):
        out.backward(np.ones(out.shape))


def test_conv_shape_errors(rng):
    x = T.Tensor(rng.standard_normal((1, 4, 4, 2)))
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(x, T.Tensor(rng.standard_normal((3, 3, 3, 1))))
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(rng.standard_normal((4, 4, 2))), T.Tensor(rng.standard_normal((3, 3, 2, 1))))


def test_non_finite_input_is_numeric_error(rng):
    x = rng.standard_normal((1, 4, 4, 1))
    x[0, 1, 1, 0] = np.nan
    with pytest.raises(NumericError):
        T.conv2d(T.Tensor(x), T.Tensor(np.ones((3, 3, 1, 1))))


# --- tape -----------------------------------------------------------------


def test_gradients_accumulate_over_consumers(f64):
    x = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = T.sum_all(T.add(T.mul(x, x), x))
    y.backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_each_op_backward_runs_once(f64, monkeypatch):
    calls = []
    original = T.Mul.backward

    def counting(self, grad):
        calls.append(id(self))
        return original(self, grad)

    monkeypatch.setattr(T.Mul, "backward", counting)
    x = T.Tensor(np.ones(3), requires_grad=True)
    h = T.mul(x, x)
    T.sum_all(T.add(h, h)).backward()
    assert len(calls) == 1
    np.testing.assert_array_equal(x.grad, 4 * np.ones(3))


def test_no_grad_records_nothing(f64):
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._ctx is None


def test_default_dtype_is_float32():
    assert T.Tensor([1.0, 2.0]).dtype == np.float32
    assert T.Tensor(np.zeros(2)).dtype == np.float64


# --- backends ---------------------------------------------------------------


def _both(fn):
    outs = []
    for backend in ("numba", "numpy"):
        prev = _kernels.use_backend(backend)
        try:
            outs.append(fn())
        finally:
            _kernels.use_backend(prev)
    return outs


@settings(max_examples=25, deadline=None)
@given(h=st.integers(3, 9), w=st.integers(3, 9), k=st.integers(1, 3), s=st.integers(1, 3), seed=st.integers(0, 999))
def test_backends_agree_on_im2col_col2im_and_maxpool(h, w, k, s, seed):
    x = np.random.default_rng(seed).standard_normal((2, h, w, 3))
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    a, b = _both(lambda: _kernels.im2col(x, k, k, s, s, ho, wo))
    np.testing.assert_array_equal(a, b)
    a, b = _both(lambda: _kernels.col2im(np.ones((2 * ho * wo, k * k * 3)), x.shape, k, k, s, s, ho, wo))
    np.testing.assert_allclose(a, b, atol=1e-12)
    (ma, aa), (mb, ab) = _both(lambda: _kernels.maxpool(x, k, k, s, s, ho, wo))
    np.testing.assert_array_equal(ma, mb)
    np.testing.assert_array_equal(aa, ab)


def test_backends_agree_on_warp(rng):
    img = rng.standard_normal((9, 11, 3))
    m = np.array([[0.9, 0.1, 1.5], [-0.2, 1.1, -2.0]])
    for fill in ("nearest", "constant"):
        a, b = _both(lambda: _kernels.warp_affine(img, m, fill=fill, cval=0.25))
        np.testing.assert_allclose(a, b, atol=1e-12)
