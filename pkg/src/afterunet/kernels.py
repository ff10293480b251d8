"""Hot numeric loops with paired numba / numpy implementations.

Every kernel exists twice: ``<name>_numba`` (compiled loops) and
``<name>_numpy`` (vectorized fallback).  The unsuffixed name dispatches on
``AFT_NUMBA`` at import time.  Both variants must agree to float rounding;
tests/test_kernels.py holds them to that.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import njit, numba_enabled

USE_NUMBA = numba_enabled()


# -- im2col / col2im (stride 1, square kernel, input already padded) --------

def im2col_numpy(xp, k):
    n, c, hp, wp = xp.shape
    ho, wo = hp - k + 1, wp - k + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n,c,ho,wo,k,k
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


@njit
def _im2col_loops(xp, k, out):
    n, c, hp, wp = xp.shape
    ho = hp - k + 1
    wo = wp - k + 1
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for y in range(ho):
                        base = y * wo
                        for x in range(wo):
                            out[b, row, base + x] = xp[b, ch, y + i, x + j]
    return out


def im2col_numba(xp, k):
    n, c, hp, wp = xp.shape
    out = np.empty((n, c * k * k, (hp - k + 1) * (wp - k + 1)), dtype=xp.dtype)
    return _im2col_loops(np.ascontiguousarray(xp), k, out)


def col2im_numpy(cols, c, hp, wp, k):
    n = cols.shape[0]
    ho, wo = hp - k + 1, wp - k + 1
    c6 = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + ho, j:j + wo] += c6[:, :, i, j]
    return out


@njit
def _col2im_loops(cols, k, out):
    n, c, hp, wp = out.shape
    ho = hp - k + 1
    wo = wp - k + 1
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for y in range(ho):
                        base = y * wo
                        for x in range(wo):
                            out[b, ch, y + i, x + j] += cols[b, row, base + x]
    return out


def col2im_numba(cols, c, hp, wp, k):
    out = np.zeros((cols.shape[0], c, hp, wp), dtype=cols.dtype)
    return _col2im_loops(np.ascontiguousarray(cols), k, out)


# -- 2x2 max pooling ----------------------------------------------------------
# argmax codes are 0..3 in row-major window order; ties go to the lowest code.

def maxpool2_forward_numpy(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int8)


@njit
def _maxpool_fwd_loops(x, out, arg):
    n, c, ho, wo = out.shape
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    best = x[b, ch, 2 * y, 2 * xx]
                    code = 0
                    for q in range(1, 4):
                        v = x[b, ch, 2 * y + q // 2, 2 * xx + q % 2]
                        if v > best:
                            best = v
                            code = q
                    out[b, ch, y, xx] = best
                    arg[b, ch, y, xx] = code
    return out, arg


def maxpool2_forward_numba(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    arg = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    return _maxpool_fwd_loops(np.ascontiguousarray(x), out, arg)


def maxpool2_backward_numpy(grad, arg):
    n, c, ho, wo = grad.shape
    onehot = arg[..., None] == np.arange(4, dtype=np.int8)
    win = np.where(onehot, grad[..., None], 0).astype(grad.dtype, copy=False)
    win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win).reshape(n, c, 2 * ho, 2 * wo)


@njit
def _maxpool_bwd_loops(grad, arg, out):
    n, c, ho, wo = grad.shape
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    q = arg[b, ch, y, xx]
                    out[b, ch, 2 * y + q // 2, 2 * xx + q % 2] = grad[b, ch, y, xx]
    return out


def maxpool2_backward_numba(grad, arg):
    n, c, ho, wo = grad.shape
    out = np.zeros((n, c, 2 * ho, 2 * wo), dtype=grad.dtype)
    return _maxpool_bwd_loops(np.ascontiguousarray(grad), np.ascontiguousarray(arg), out)


# -- trilinear sampling on a separable grid ---------------------------------

def linear_weights(coords, size):
    """Lower neighbour index and blend weight for 1D linear interpolation."""
    coords = np.clip(np.asarray(coords, dtype=np.float64), 0.0, size - 1)
    lo = np.floor(coords).astype(np.int64)
    lo = np.minimum(lo, size - 1)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, coords - lo


def trilinear_grid_numpy(a, cx, cy, cz):
    """Sample 3D array ``a`` at every point of the grid cx x cy x cz."""
    out = a.astype(np.float64)
    for axis, cs in enumerate((cx, cy, cz)):
        lo, hi, t = linear_weights(cs, a.shape[axis])
        shape = [1, 1, 1]
        shape[axis] = -1
        t = t.reshape(shape)
        out = np.take(out, lo, axis=axis) * (1.0 - t) + np.take(out, hi, axis=axis) * t
    return out


@njit
def _trilinear_loops(a, lx, hx, tx, ly, hy, ty, lz, hz, tz, out):
    for i in range(lx.shape[0]):
        for j in range(ly.shape[0]):
            for k in range(lz.shape[0]):
                c00 = a[lx[i], ly[j], lz[k]] * (1 - tz[k]) + a[lx[i], ly[j], hz[k]] * tz[k]
                c01 = a[lx[i], hy[j], lz[k]] * (1 - tz[k]) + a[lx[i], hy[j], hz[k]] * tz[k]
                c10 = a[hx[i], ly[j], lz[k]] * (1 - tz[k]) + a[hx[i], ly[j], hz[k]] * tz[k]
                c11 = a[hx[i], hy[j], lz[k]] * (1 - tz[k]) + a[hx[i], hy[j], hz[k]] * tz[k]
                c0 = c00 * (1 - ty[j]) + c01 * ty[j]
                c1 = c10 * (1 - ty[j]) + c11 * ty[j]
                out[i, j, k] = c0 * (1 - tx[i]) + c1 * tx[i]
    return out


def trilinear_grid_numba(a, cx, cy, cz):
    lx, hx, tx = linear_weights(cx, a.shape[0])
    ly, hy, ty = linear_weights(cy, a.shape[1])
    lz, hz, tz = linear_weights(cz, a.shape[2])
    out = np.empty((len(lx), len(ly), len(lz)), dtype=np.float64)
    return _trilinear_loops(np.ascontiguousarray(a, dtype=np.float64),
                            lx, hx, tx, ly, hy, ty, lz, hz, tz, out)


if USE_NUMBA:
    im2col, col2im = im2col_numba, col2im_numba
    maxpool2_forward, maxpool2_backward = maxpool2_forward_numba, maxpool2_backward_numba
    trilinear_grid = trilinear_grid_numba
else:
    im2col, col2im = im2col_numpy, col2im_numpy
    maxpool2_forward, maxpool2_backward = maxpool2_forward_numpy, maxpool2_backward_numpy
    trilinear_grid = trilinear_grid_numpy
