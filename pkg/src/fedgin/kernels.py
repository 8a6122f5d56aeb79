"""Hot numeric kernels: im2col/col2im for convolution and 2x2 max pooling.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The numba path is used when numba imports cleanly and ``FEDGIN_DISABLE_NUMBA``
is unset (or ``0``), except for im2col, where the numpy gather is faster.  Both paths accumulate in the same order, so they agree
bit-for-bit; the test-suite checks this.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DISABLED = os.environ.get("FEDGIN_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by FEDGIN_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference path


def im2col_numpy(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded input (N, C, Hp, Wp) -> columns (C*k*k, N*ho*wo)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, C, ho, wo, k, k) -> (C, k, k, N, ho, wo)
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))
    return cols.reshape(c * k * k, n * ho * wo)


def col2im_numpy(cols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add columns back onto a padded input of ``shape``."""
    n, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols6 = cols.reshape(c, k, k, n, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, i, j].transpose(1, 0, 2, 3)
    return out


def maxpool2_numpy(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def maxpool2_backward_numpy(grad: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad.shape
    blocks = np.zeros((n, c, h2, w2, 4), dtype=grad.dtype)
    np.put_along_axis(blocks, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
    return blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


# ---------------------------------------------------------------------------
# numba path

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, k, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((c * k * k, n * ho * wo), dtype=xp.dtype)
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ci * k + i) * k + j
                    for b in range(n):
                        base = b * ho * wo
                        for y in range(ho):
                            yy = y * stride + i
                            for x in range(wo):
                                cols[row, base + y * wo + x] = xp[b, ci, yy, x * stride + j]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n, c, hp, wp, k, stride, ho, wo):
        out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        for i in range(k):
            for j in range(k):
                for ci in range(c):
                    row = (ci * k + i) * k + j
                    for b in range(n):
                        base = b * ho * wo
                        for y in range(ho):
                            yy = y * stride + i
                            for x in range(wo):
                                out[b, ci, yy, x * stride + j] += cols[row, base + y * wo + x]
        return out

    @njit(cache=True)
    def _maxpool2_nb(x):
        n, c, h, w = x.shape
        out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
        idx = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
        for b in range(n):
            for ci in range(c):
                for y in range(h // 2):
                    for xx in range(w // 2):
                        best = x[b, ci, 2 * y, 2 * xx]
                        arg = 0
                        for q in range(1, 4):
                            v = x[b, ci, 2 * y + q // 2, 2 * xx + q % 2]
                            if v > best:
                                best = v
                                arg = q
                        out[b, ci, y, xx] = best
                        idx[b, ci, y, xx] = arg
        return out, idx

    @njit(cache=True)
    def _maxpool2_backward_nb(grad, idx):
        n, c, h2, w2 = grad.shape
        out = np.zeros((n, c, 2 * h2, 2 * w2), dtype=grad.dtype)
        for b in range(n):
            for ci in range(c):
                for y in range(h2):
                    for xx in range(w2):
                        q = idx[b, ci, y, xx]
                        out[b, ci, 2 * y + q // 2, 2 * xx + q % 2] = grad[b, ci, y, xx]
        return out

    def im2col_numba(xp, k, stride, ho, wo):
        return _im2col_nb(np.ascontiguousarray(xp), k, stride, ho, wo)

    def col2im_numba(cols, shape, k, stride, ho, wo):
        n, c, hp, wp = shape
        return _col2im_nb(np.ascontiguousarray(cols), n, c, hp, wp, k, stride, ho, wo)

    def maxpool2_numba(x):
        return _maxpool2_nb(np.ascontiguousarray(x))

    def maxpool2_backward_numba(grad, idx):
        return _maxpool2_backward_nb(np.ascontiguousarray(grad), np.ascontiguousarray(idx))


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"


if HAS_NUMBA:
    # im2col is a plain strided gather; numpy's copy beats the jitted loop (see benchmarks/), so it stays on numpy.
    im2col = im2col_numpy
    col2im = col2im_numba
    maxpool2 = maxpool2_numba
    maxpool2_backward = maxpool2_backward_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    maxpool2 = maxpool2_numpy
    maxpool2_backward = maxpool2_backward_numpy
