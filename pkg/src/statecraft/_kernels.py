"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The backend is picked once at import from ``STATECRAFT_NUMBA`` ("0", "false"
or "off" forces numpy) and can be switched at runtime with :func:`use_backend`.
When numba is not importable the numpy path is used silently.

All image-like arrays are NHWC (or HWC for :func:`warp_affine`) and
C-contiguous.
"""

import os
import warnings

import numpy as np
from numpy.lib.stride_tricks import as_strided

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return decorator


def _env_backend():
    flag = os.environ.get("STATECRAFT_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return "numpy"
    return "numba" if HAVE_NUMBA else "numpy"


BACKEND = _env_backend()


def use_backend(name):
    """Switch kernel backend ("numba" or "numpy"); returns the previous one."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        warnings.warn("numba is not installed; staying on the numpy backend")
        return BACKEND
    previous, BACKEND = BACKEND, name
    return previous


# --------------------------------------------------------------------------
# im2col / col2im
# --------------------------------------------------------------------------


def _im2col_numpy(xp, kh, kw, sh, sw, ho, wo):
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(s0, s1 * sh, s2 * sw, s1, s2, s3),
        writeable=False,
    )
    return view.reshape(n * ho * wo, kh * kw * c)


@njit(cache=True)
def _im2col_numba(xp, kh, kw, sh, sw, ho, wo):
    n, _, _, c = xp.shape
    hp = xp.shape[1]
    flat = xp.reshape(n * hp, -1)
    cols = np.empty((n * ho * wo, kh * kw * c), dtype=xp.dtype)
    run = kw * c  # one kernel row of a patch is contiguous in NHWC
    row = 0
    for b in range(n):
        for oy in range(ho):
            y0 = b * hp + oy * sh
            for ox in range(wo):
                x0 = ox * sw * c
                for i in range(kh):
                    src = flat[y0 + i]
                    base = i * run
                    for t in range(run):
                        cols[row, base + t] = src[x0 + t]
                row += 1
    return cols


def _col2im_numpy(cols, padded_shape, kh, kw, sh, sw, ho, wo):
    n, _, _, c = padded_shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    blocks = cols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :] += blocks[:, :, :, i, j, :]
    return out


@njit(cache=True)
def _col2im_numba(cols, n, hp, wp, c, kh, kw, sh, sw, ho, wo):
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    row = 0
    for b in range(n):
        for oy in range(ho):
            y0 = oy * sh
            for ox in range(wo):
                x0 = ox * sw
                col = 0
                for i in range(kh):
                    for j in range(kw):
                        for ch in range(c):
                            out[b, y0 + i, x0 + j, ch] += cols[row, col]
                            col += 1
                row += 1
    return out


def im2col(xp, kh, kw, sh, sw, ho, wo):
    """Unfold a padded NHWC batch into rows of (kh, kw, C) patches.

    Returns an array of shape ``(N*ho*wo, kh*kw*C)`` whose column order matches
    a kernel of shape ``(kh, kw, C, Cout)`` reshaped to ``(kh*kw*C, Cout)``.
    """
    xp = np.ascontiguousarray(xp)
    if BACKEND == "numba":
        return _im2col_numba(xp, kh, kw, sh, sw, ho, wo)
    return _im2col_numpy(xp, kh, kw, sh, sw, ho, wo)


def col2im(cols, padded_shape, kh, kw, sh, sw, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the padded grid."""
    cols = np.ascontiguousarray(cols)
    if BACKEND == "numba":
        n, hp, wp, c = padded_shape
        return _col2im_numba(cols, n, hp, wp, c, kh, kw, sh, sw, ho, wo)
    return _col2im_numpy(cols, padded_shape, kh, kw, sh, sw, ho, wo)


# --------------------------------------------------------------------------
# max pooling
# --------------------------------------------------------------------------


def _maxpool_numpy(xp, kh, kw, sh, sw, ho, wo):
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(s0, s1 * sh, s2 * sw, s3, s1, s2),
        writeable=False,
    ).reshape(n, ho, wo, c, kh * kw)
    arg = view.argmax(axis=-1)
    out = np.take_along_axis(view, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


@njit(cache=True)
def _maxpool_numba(xp, kh, kw, sh, sw, ho, wo):
    n, _, _, c = xp.shape
    out = np.empty((n, ho, wo, c), dtype=xp.dtype)
    arg = np.empty((n, ho, wo, c), dtype=np.int64)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for ch in range(c):
                    best = xp[b, oy * sh, ox * sw, ch]
                    best_k = 0
                    k = 0
                    for i in range(kh):
                        for j in range(kw):
                            v = xp[b, oy * sh + i, ox * sw + j, ch]
                            if v > best:
                                best = v
                                best_k = k
                            k += 1
                    out[b, oy, ox, ch] = best
                    arg[b, oy, ox, ch] = best_k
    return out, arg


def _maxpool_backward_numpy(grad, arg, padded_shape, kh, kw, sh, sw):
    n, ho, wo, c = grad.shape
    out = np.zeros(padded_shape, dtype=grad.dtype)
    bi, oy, ox, ch = np.indices((n, ho, wo, c), sparse=False)
    ys = oy * sh + arg // kw
    xs = ox * sw + arg % kw
    np.add.at(out, (bi, ys, xs, ch), grad)
    return out


@njit(cache=True)
def _maxpool_backward_numba(grad, arg, hp, wp, kw, sh, sw):
    n, ho, wo, c = grad.shape
    out = np.zeros((n, hp, wp, c), dtype=grad.dtype)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for ch in range(c):
                    k = arg[b, oy, ox, ch]
                    out[b, oy * sh + k // kw, ox * sw + k % kw, ch] += grad[b, oy, ox, ch]
    return out


def maxpool(xp, kh, kw, sh, sw, ho, wo):
    """Windowed max over a padded NHWC batch; returns (values, argmax-in-window).

    Ties resolve to the first window position in row-major order.
    """
    xp = np.ascontiguousarray(xp)
    if BACKEND == "numba":
        return _maxpool_numba(xp, kh, kw, sh, sw, ho, wo)
    return _maxpool_numpy(xp, kh, kw, sh, sw, ho, wo)


def maxpool_backward(grad, arg, padded_shape, kh, kw, sh, sw):
    grad = np.ascontiguousarray(grad)
    if BACKEND == "numba":
        _, hp, wp, _ = padded_shape
        return _maxpool_backward_numba(grad, arg, hp, wp, kw, sh, sw)
    return _maxpool_backward_numpy(grad, arg, padded_shape, kh, kw, sh, sw)


# --------------------------------------------------------------------------
# affine warp with bilinear sampling
# --------------------------------------------------------------------------


def _warp_numpy(img, inv, nearest_fill, cval):
    h, w, c = img.shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src_y = inv[0, 0] * rows + inv[0, 1] * cols + inv[0, 2]
    src_x = inv[1, 0] * rows + inv[1, 1] * cols + inv[1, 2]
    inside = (src_y >= 0) & (src_y <= h - 1) & (src_x >= 0) & (src_x <= w - 1)
    src_y = np.clip(src_y, 0, h - 1)
    src_x = np.clip(src_x, 0, w - 1)
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (src_y - y0)[..., None]
    fx = (src_x - x0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    if not nearest_fill:
        out = np.where(inside[..., None], out, cval)
    return out.astype(img.dtype)


@njit(cache=True)
def _warp_numba(img, inv, nearest_fill, cval):
    h, w, c = img.shape
    out = np.empty_like(img)
    for r in range(h):
        for q in range(w):
            sy = inv[0, 0] * r + inv[0, 1] * q + inv[0, 2]
            sx = inv[1, 0] * r + inv[1, 1] * q + inv[1, 2]
            inside = sy >= 0 and sy <= h - 1 and sx >= 0 and sx <= w - 1
            if not inside and not nearest_fill:
                for ch in range(c):
                    out[r, q, ch] = cval
                continue
            sy = min(max(sy, 0.0), h - 1.0)
            sx = min(max(sx, 0.0), w - 1.0)
            y0 = int(np.floor(sy))
            x0 = int(np.floor(sx))
            y1 = min(y0 + 1, h - 1)
            x1 = min(x0 + 1, w - 1)
            fy = sy - y0
            fx = sx - x0
            for ch in range(c):
                top = img[y0, x0, ch] * (1 - fx) + img[y0, x1, ch] * fx
                bottom = img[y1, x0, ch] * (1 - fx) + img[y1, x1, ch] * fx
                out[r, q, ch] = top * (1 - fy) + bottom * fy
    return out


def warp_affine(img, inverse_matrix, fill="nearest", cval=0.0):
    """Resample an HWC image through an inverse affine map (output pixel -> source).

    ``inverse_matrix`` is 2x3 acting on (row, col, 1). Out-of-bounds samples
    take the nearest edge pixel, or ``cval`` when ``fill == "constant"``.
    """
    img = np.ascontiguousarray(img)
    inv = np.ascontiguousarray(inverse_matrix, dtype=np.float64)
    nearest = fill == "nearest"
    if BACKEND == "numba":
        return _warp_numba(img, inv, nearest, float(cval))
    return _warp_numpy(img, inv, nearest, float(cval))
