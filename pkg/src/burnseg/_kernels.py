"""Hot loops for the 3x3 convolutions and 2x2 pooling.

Every kernel has a numba implementation and a pure-numpy twin.  Set
``BURNSEG_DISABLE_NUMBA=1`` before import to force the numpy path (it is also
used when numba is missing).  Both paths add floats in the same order, so
their results are bit-identical.

``im2col``/``col2im`` work on channels-last arrays ``[N, H, W, C]``.  Row
``n*Ho*Wo + i*Wo + j``, column ``(ki*3 + kj)*C + c`` of the column matrix
holds ``x[n, i*s - p + ki, j*s - p + kj, c]`` (zero outside the image).
"""

import os

import numpy as np

KSIZE = 3

_disabled = os.environ.get("BURNSEG_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def backend():
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path

def im2col_np(x, stride, pad, out_h, out_w):
    n, h, w, c = x.shape
    need_h = (out_h - 1) * stride + KSIZE
    need_w = (out_w - 1) * stride + KSIZE
    xp = np.zeros((n, need_h, need_w, c), dtype=x.dtype)
    hh, ww = min(h, need_h - pad), min(w, need_w - pad)
    xp[:, pad:pad + hh, pad:pad + ww] = x[:, :hh, :ww]
    sn, sh, sw, sc = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, out_h, out_w, KSIZE, KSIZE, c),
        strides=(sn, stride * sh, stride * sw, sh, sw, sc),
        writeable=False,
    )
    return win.reshape(n * out_h * out_w, KSIZE * KSIZE * c)


def col2im_np(cols, shape, stride, pad, out_h, out_w):
    n, h, w, c = shape
    need_h = max((out_h - 1) * stride + KSIZE, h + pad)
    need_w = max((out_w - 1) * stride + KSIZE, w + pad)
    buf = np.zeros((n, need_h, need_w, c), dtype=cols.dtype)
    c6 = cols.reshape(n, out_h, out_w, KSIZE, KSIZE, c)
    # descending taps give the same per-pixel order as the row-major numba scan
    for ki in reversed(range(KSIZE)):
        for kj in reversed(range(KSIZE)):
            buf[:, ki:ki + stride * out_h:stride, kj:kj + stride * out_w:stride] += c6[:, :, :, ki, kj]
    return np.ascontiguousarray(buf[:, pad:pad + h, pad:pad + w])


def maxpool_fwd_np(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_bwd_np(g, arg):
    n, c, ho, wo = g.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.intp), g[..., None], axis=-1)
    return np.ascontiguousarray(
        win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, stride, pad, out_h, out_w, cols):
        n, h, w, c = x.shape
        for b in range(n):
            for i in range(out_h):
                for j in range(out_w):
                    row = (b * out_h + i) * out_w + j
                    for ki in range(3):
                        r = i * stride - pad + ki
                        for kj in range(3):
                            q = j * stride - pad + kj
                            base = (ki * 3 + kj) * c
                            if 0 <= r < h and 0 <= q < w:
                                for ch in range(c):
                                    cols[row, base + ch] = x[b, r, q, ch]
                            else:
                                for ch in range(c):
                                    cols[row, base + ch] = 0.0

    @njit(cache=True)
    def _col2im_nb(cols, out, stride, pad, out_h, out_w):
        n, h, w, c = out.shape
        for b in range(n):
            for i in range(out_h):
                for j in range(out_w):
                    row = (b * out_h + i) * out_w + j
                    for ki in range(3):
                        r = i * stride - pad + ki
                        if r < 0 or r >= h:
                            continue
                        for kj in range(3):
                            q = j * stride - pad + kj
                            if q < 0 or q >= w:
                                continue
                            base = (ki * 3 + kj) * c
                            for ch in range(c):
                                out[b, r, q, ch] += cols[row, base + ch]

    @njit(cache=True)
    def _maxpool_fwd_nb(x, out, arg):
        n, c, ho, wo = out.shape
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = x[b, ch, 2 * i, 2 * j]
                        k = 0
                        v = x[b, ch, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, ch, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, ch, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 3
                        out[b, ch, i, j] = best
                        arg[b, ch, i, j] = k

    @njit(cache=True)
    def _maxpool_bwd_nb(g, arg, dx):
        n, c, ho, wo = g.shape
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        k = arg[b, ch, i, j]
                        dx[b, ch, 2 * i + k // 2, 2 * j + k % 2] = g[b, ch, i, j]

    def im2col_nb(x, stride, pad, out_h, out_w):
        x = np.ascontiguousarray(x)
        n, _, _, c = x.shape
        cols = np.empty((n * out_h * out_w, 9 * c), dtype=x.dtype)
        _im2col_nb(x, stride, pad, out_h, out_w, cols)
        return cols

    def col2im_nb(cols, shape, stride, pad, out_h, out_w):
        out = np.zeros(shape, dtype=cols.dtype)
        _col2im_nb(np.ascontiguousarray(cols), out, stride, pad, out_h, out_w)
        return out

    def maxpool_fwd_nb(x):
        x = np.ascontiguousarray(x)
        n, c, h, w = x.shape
        out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
        arg = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
        _maxpool_fwd_nb(x, out, arg)
        return out, arg

    def maxpool_bwd_nb(g, arg):
        n, c, ho, wo = g.shape
        dx = np.zeros((n, c, 2 * ho, 2 * wo), dtype=g.dtype)
        _maxpool_bwd_nb(np.ascontiguousarray(g), arg, dx)
        return dx

    im2col = im2col_nb
    col2im = col2im_nb
    maxpool_fwd = maxpool_fwd_nb
    maxpool_bwd = maxpool_bwd_nb
else:
    im2col = im2col_np
    col2im = col2im_np
    maxpool_fwd = maxpool_fwd_np
    maxpool_bwd = maxpool_bwd_np
