"""Dense NHWC tensors with reverse-mode gradients for the layer set.

A :class:`Tensor` wraps a numpy array. Every differentiable op is a
:class:`Function` subclass; calling it records the producing function on the
output so :class:`GradTape` can walk the graph backwards.
"""

import contextlib
import math

import numpy as np

from . import _kernels
from .errors import DegenerateBatchError, NumericError, ShapeError, StateError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

PROB_CLAMP = 1e-7


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return plain leaf tensors."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None, _ctx=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            keep = isinstance(data, np.ndarray) and data.dtype.type in (np.float32, np.float64)
            dtype = data.dtype.type if keep else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._ctx = _ctx

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        GradTape(self).backward(grad)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{label})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class Function:
    """One differentiable op. Subclasses define ``forward`` and ``backward``.

    ``backward`` receives the upstream gradient and returns one gradient (or
    None) per tensor input, in order. ``self.needs_grad`` tells it which
    inputs actually want one.
    """

    def __init__(self, *inputs):
        self.inputs = inputs
        self.needs_grad = tuple(t.requires_grad for t in inputs)

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        inputs = tuple(_as_tensor(t) for t in inputs)
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{cls.__name__} produced non-finite values")
        track = _GRAD_ENABLED and any(fn.needs_grad)
        return Tensor(out, requires_grad=track, dtype=out.dtype, _ctx=fn if track else None)


class GradTape:
    """Topologically ordered record of the ops that produced ``root``.

    Each recorded function is visited exactly once, in reverse topological
    order; gradients for values with several consumers are summed.
    """

    def __init__(self, root):
        self.root = root
        self.order = self._toposort(root)

    @staticmethod
    def _toposort(root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return order

    def backward(self, grad=None):
        root = self.root
        if not root.requires_grad:
            raise StateError("backward() called on a tensor that does not require grad")
        if grad is None:
            if root.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(root.data)
        grads = {id(root): np.asarray(grad, dtype=root.dtype)}
        for node in reversed(self.order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            fn = node._ctx
            parent_grads = fn.backward(g)
            for parent, pg in zip(fn.inputs, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{type(fn).__name__} returned gradient {pg.shape} for input {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise and reductions
# --------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        try:
            return a + b
        except ValueError as exc:
            raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        try:
            return a * b
        except ValueError as exc:
            raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class SumAll(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class MeanAll(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.asarray(a.mean(), dtype=a.dtype)

    def backward(self, grad):
        return ((np.broadcast_to(grad, self.in_shape) / math.prod(self.in_shape)).astype(grad.dtype),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        da = grad @ self.b.T if self.needs_grad[0] else None
        db = self.a.T @ grad if self.needs_grad[1] else None
        return da, db


class Linear(Function):
    """x @ W + b in one op."""

    def forward(self, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError(f"dense: x{x.shape} W{w.shape} b{b.shape} do not conform")
        self.x, self.w = x, w
        return x @ w + b

    def backward(self, grad):
        dx = grad @ self.w.T if self.needs_grad[0] else None
        dw = self.x.T @ grad if self.needs_grad[1] else None
        db = grad.sum(axis=0) if self.needs_grad[2] else None
        return dx, dw, db


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return a * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1 - self.out**2),)


class Sigmoid(Function):
    def forward(self, a):
        self.out = 1.0 / (1.0 + np.exp(-a))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


def _softmax(a):
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Softmax(Function):
    def forward(self, a):
        self.p = _softmax(a)
        return self.p

    def backward(self, grad):
        p = self.p
        return (p * (grad - (grad * p).sum(axis=-1, keepdims=True)),)


def _targets_matrix(targets, probs_shape, dtype):
    targets = np.asarray(targets)
    n, k = probs_shape
    if targets.ndim == 1:
        if targets.shape[0] != n:
            raise ShapeError(f"{targets.shape[0]} targets for {n} rows")
        if targets.size and (targets.min() < 0 or targets.max() >= k):
            raise ShapeError(f"class index outside [0, {k})")
        onehot = np.zeros(probs_shape, dtype=dtype)
        onehot[np.arange(n), targets.astype(np.int64)] = 1
        return onehot
    if targets.shape != probs_shape:
        raise ShapeError(f"targets {targets.shape} do not match predictions {probs_shape}")
    return targets.astype(dtype)


class CrossEntropy(Function):
    """Mean categorical cross-entropy on probabilities, clamped before the log."""

    def forward(self, probs, targets=None):
        if probs.ndim != 2:
            raise ShapeError("cross_entropy expects [N, K] probabilities")
        self.y = _targets_matrix(targets, probs.shape, probs.dtype)
        self.inside = (probs > PROB_CLAMP) & (probs < 1 - PROB_CLAMP)
        self.pc = np.clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
        n = probs.shape[0]
        return np.asarray(-(self.y * np.log(self.pc)).sum() / n, dtype=probs.dtype)

    def backward(self, grad):
        n = self.pc.shape[0]
        return (grad * (-self.y / self.pc) * self.inside / n,)


class SoftmaxCrossEntropy(Function):
    """Softmax followed by clamped cross-entropy; gradient is (p - y) / N."""

    def forward(self, logits, targets=None):
        if logits.ndim != 2:
            raise ShapeError("softmax_cross_entropy expects [N, K] logits")
        self.p = _softmax(logits)
        self.y = _targets_matrix(targets, logits.shape, logits.dtype)
        pc = np.clip(self.p, PROB_CLAMP, 1 - PROB_CLAMP)
        n = logits.shape[0]
        return np.asarray(-(self.y * np.log(pc)).sum() / n, dtype=logits.dtype)

    def backward(self, grad):
        n = self.p.shape[0]
        return (grad * (self.p - self.y) / n,)


# --------------------------------------------------------------------------
# convolution and pooling
# --------------------------------------------------------------------------


def conv_output_geometry(size, k, stride, padding):
    """Output length and (before, after) padding along one spatial axis."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, (total // 2, total - total // 2)
    if padding == "valid":
        if size < k:
            raise ShapeError(f"valid window {k} larger than input {size}")
        return (size - k) // stride + 1, (0, 0)
    raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


class Conv2D(Function):
    def forward(self, x, kernel, bias, stride=1, padding="same"):
        if x.ndim != 4:
            raise ShapeError(f"conv2d input must be NHWC, got shape {x.shape}")
        if kernel.ndim != 4:
            raise ShapeError(f"conv2d kernel must be (kh, kw, Cin, Cout), got {kernel.shape}")
        kh, kw, cin, cout = kernel.shape
        if x.shape[3] != cin:
            raise ShapeError(f"conv2d: input has {x.shape[3]} channels, kernel expects {cin}")
        if bias is not None and bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        sh, sw = _pair(stride)
        if sh < 1 or sw < 1:
            raise ShapeError("conv2d stride must be >= 1")
        if not np.all(np.isfinite(x)):
            raise NumericError("conv2d input contains non-finite values")
        n, h, w, _ = x.shape
        ho, (pt, pb) = conv_output_geometry(h, kh, sh, padding)
        wo, (pl, pr) = conv_output_geometry(w, kw, sw, padding)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt or pb or pl or pr else x
        cols = _kernels.im2col(xp, kh, kw, sh, sw, ho, wo)
        k2 = kernel.reshape(kh * kw * cin, cout)
        out = cols @ k2
        if bias is not None:
            out += bias
        self.saved = (cols, k2, xp.shape, (pt, pl, h, w), (kh, kw, sh, sw, ho, wo))
        return out.reshape(n, ho, wo, cout)

    def backward(self, grad):
        if getattr(self, "saved", None) is None:
            raise StateError("conv2d backward called without saved forward activations")
        cols, k2, padded_shape, (pt, pl, h, w), (kh, kw, sh, sw, ho, wo) = self.saved
        cout = k2.shape[1]
        g2 = grad.reshape(-1, cout)
        dk = (cols.T @ g2).reshape(kh, kw, -1, cout) if self.needs_grad[1] else None
        db = g2.sum(axis=0) if len(self.needs_grad) > 2 and self.needs_grad[2] else None
        dx = None
        if self.needs_grad[0]:
            dxp = _kernels.col2im(g2 @ k2.T, padded_shape, kh, kw, sh, sw, ho, wo)
            dx = np.ascontiguousarray(dxp[:, pt : pt + h, pl : pl + w, :])
        out = (dx, dk, db) if len(self.inputs) == 3 else (dx, dk)
        return out


class MaxPool2D(Function):
    def forward(self, x, pool=3, stride=2, padding="valid"):
        kh, kw = _pair(pool)
        sh, sw = _pair(stride)
        n, h, w, c = x.shape
        ho, (pt, pb) = conv_output_geometry(h, kh, sh, padding)
        wo, (pl, pr) = conv_output_geometry(w, kw, sw, padding)
        xp = x
        if pt or pb or pl or pr:
            xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
        out, arg = _kernels.maxpool(xp, kh, kw, sh, sw, ho, wo)
        self.saved = (arg, xp.shape, (pt, pl, h, w), (kh, kw, sh, sw))
        return out

    def backward(self, grad):
        arg, padded_shape, (pt, pl, h, w), (kh, kw, sh, sw) = self.saved
        dxp = _kernels.maxpool_backward(grad, arg, padded_shape, kh, kw, sh, sw)
        return (np.ascontiguousarray(dxp[:, pt : pt + h, pl : pl + w, :]),)


class AvgPool2D(Function):
    """Average pooling; with 'same' padding the border windows average only real pixels."""

    def forward(self, x, pool=3, stride=1, padding="same"):
        kh, kw = _pair(pool)
        sh, sw = _pair(stride)
        n, h, w, c = x.shape
        ho, (pt, pb) = conv_output_geometry(h, kh, sh, padding)
        wo, (pl, pr) = conv_output_geometry(w, kw, sw, padding)
        pads = ((0, 0), (pt, pb), (pl, pr), (0, 0))
        xp = np.pad(x, pads)
        ones = np.pad(np.ones((1, h, w, 1), dtype=x.dtype), pads)
        total = np.zeros((n, ho, wo, c), dtype=x.dtype)
        count = np.zeros((1, ho, wo, 1), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                total += xp[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :]
                count += ones[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :]
        self.saved = (count, xp.shape, (pt, pl, h, w), (kh, kw, sh, sw, ho, wo))
        return total / count

    def backward(self, grad):
        count, padded_shape, (pt, pl, h, w), (kh, kw, sh, sw, ho, wo) = self.saved
        share = grad / count
        dxp = np.zeros(padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :] += share
        return (np.ascontiguousarray(dxp[:, pt : pt + h, pl : pl + w, :]),)


class GlobalAvgPool(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool expects NHWC, got {x.shape}")
        self.in_shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        n, h, w, c = self.in_shape
        return (np.broadcast_to(grad[:, None, None, :] / (h * w), self.in_shape).astype(grad.dtype),)


class Concat(Function):
    """Concatenate along the channel (last) axis."""

    def forward(self, *arrays):
        lead = arrays[0].shape[:-1]
        for a in arrays:
            if a.shape[:-1] != lead:
                raise ShapeError(f"concat: leading dims differ, {[x.shape for x in arrays]}")
        self.splits = np.cumsum([a.shape[-1] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=-1)

    def backward(self, grad):
        return tuple(np.ascontiguousarray(g) for g in np.split(grad, self.splits, axis=-1))


class DropoutMask(Function):
    def forward(self, x, mask):
        self.mask = mask
        return x * mask

    def backward(self, grad):
        return (grad * self.mask,)


class BatchNormFn(Function):
    """Per-channel normalisation over every axis but the last.

    Inputs are (x, beta) or (x, beta, gamma). In train mode the batch moments
    are stored on ``self.batch_mean`` / ``self.batch_var`` for the caller.
    """

    def forward(self, x, beta, gamma=None, mean=None, var=None, epsilon=1e-3, training=True):
        axes = tuple(range(x.ndim - 1))
        if beta.shape != (x.shape[-1],):
            raise ShapeError(f"batchnorm: beta {beta.shape} for {x.shape[-1]} channels")
        if training:
            m = math.prod(x.shape[:-1])
            if m < 2:
                raise DegenerateBatchError("batchnorm in train mode needs at least two values per channel")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.batch_mean, self.batch_var = mean, var
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = (x - mean) * inv_std
        g = np.ones_like(beta) if gamma is None else gamma
        self.saved = (xhat, inv_std.astype(x.dtype), g, axes, training)
        return (g * xhat + beta).astype(x.dtype)

    def backward(self, grad):
        xhat, inv_std, g, axes, training = self.saved
        dbeta = grad.sum(axis=axes)
        dgamma = (grad * xhat).sum(axis=axes) if len(self.inputs) > 2 else None
        dx = None
        if self.needs_grad[0]:
            dxhat = grad * g
            if training:
                m = math.prod(grad.shape[:-1])
                dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            else:
                dx = dxhat * inv_std
        out = (dx, dbeta, dgamma) if len(self.inputs) > 2 else (dx, dbeta)
        return out


# --------------------------------------------------------------------------
# functional surface
# --------------------------------------------------------------------------


def add(a, b):
    return Add.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def neg(a):
    return Neg.apply(a)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def sum_all(a):
    return SumAll.apply(a)


def mean_all(a):
    return MeanAll.apply(a)


def matmul(a, b):
    return MatMul.apply(a, b)


def linear(x, w, b):
    return Linear.apply(x, w, b)


def relu(a):
    return ReLU.apply(a)


def tanh(a):
    return Tanh.apply(a)


def sigmoid(a):
    return Sigmoid.apply(a)


def softmax(a):
    return Softmax.apply(a)


def cross_entropy(probs, targets):
    return CrossEntropy.apply(probs, targets=targets)


def softmax_cross_entropy(logits, targets):
    return SoftmaxCrossEntropy.apply(logits, targets=targets)


def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    if bias is None:
        return Conv2D.apply(x, kernel, bias=None, stride=stride, padding=padding)
    return Conv2D.apply(x, kernel, bias, stride=stride, padding=padding)


def max_pool2d(x, pool=3, stride=2, padding="valid"):
    return MaxPool2D.apply(x, pool=pool, stride=stride, padding=padding)


def avg_pool2d(x, pool=3, stride=1, padding="same"):
    return AvgPool2D.apply(x, pool=pool, stride=stride, padding=padding)


def global_avg_pool(x):
    return GlobalAvgPool.apply(x)


def concat(tensors):
    return Concat.apply(*tensors)


def dropout_mask(x, mask):
    return DropoutMask.apply(x, mask=mask)


def batch_norm(x, beta, gamma=None, mean=None, var=None, epsilon=1e-3, training=True):
    """Returns (output, function); the function carries batch moments in train mode."""
    kwargs = dict(mean=mean, var=var, epsilon=epsilon, training=training)
    inputs = (x, beta) if gamma is None else (x, beta, gamma)
    inputs = tuple(_as_tensor(t) for t in inputs)
    fn = BatchNormFn(*inputs)
    out = fn.forward(*(t.data for t in inputs), **kwargs)
    if not np.all(np.isfinite(out)):
        raise NumericError("BatchNormFn produced non-finite values")
    track = _GRAD_ENABLED and any(fn.needs_grad)
    return Tensor(out, requires_grad=track, dtype=out.dtype, _ctx=fn if track else None), fn
