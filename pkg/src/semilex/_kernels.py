"""Hot numeric kernels: convolution, 2x2 max-pooling, pairwise squared distances.

Every kernel exists twice: a plain-numpy implementation (vectorised, BLAS-backed)
and a loop implementation compiled with numba ``@njit``.  The active backend is
chosen once at import time from the ``SEMILEX_NUMBA`` environment variable:
any of ``0``, ``false``, ``off``, ``no`` selects the numpy path, everything
else (including unset) selects numba when it is importable.

Both paths compute the same quantities; results agree to floating-point
roundoff (summation order differs).  Within one backend all kernels are
deterministic.  ``benchmarks/bench_kernels.py`` times the two paths against
each other.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "NUMBA_ENABLED",
    "backend_name",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2_forward",
    "maxpool2_backward",
    "pairwise_sqdist",
]


def _numba_requested() -> bool:
    flag = os.environ.get("SEMILEX_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


if _numba_requested():
    try:
        from numba import njit as _njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _njit = None
else:
    _njit = None

NUMBA_ENABLED = _njit is not None


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"


def _f64(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _conv2d_forward_np(x, w, b):
    # x: (B, C, H, W), w: (F, C, KH, KW), b: (F,) -> (B, F, OH, OW), stride 1, no padding
    kh, kw = w.shape[2], w.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, OH, OW, F)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += b[None, :, None, None]
    return out


def _conv2d_backward_np(x, w, dout):
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = dout.shape[2], dout.shape[3]
    db = dout.sum(axis=(0, 2, 3))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # dw[f,c,p,q] = sum_{b,i,j} dout[b,f,i,j] * x[b,c,i+p,j+q]
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    dx = np.zeros_like(x)
    for p in range(kh):
        for q in range(kw):
            # (B,F,OH,OW) x (F,C) -> (B,C,OH,OW)
            dx[:, :, p:p + oh, q:q + ow] += np.tensordot(dout, w[:, :, p, q], axes=([1], [0])).transpose(0, 3, 1, 2)
    return dx, dw, db


def _maxpool2_forward_np(x):
    b, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    win = x[:, :, : 2 * oh, : 2 * ow].reshape(b, c, oh, 2, ow, 2)
    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, 4)
    idx = flat.argmax(axis=-1).astype(np.int64)  # first maximum wins, scan order (p, q)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def _maxpool2_backward_np(dout, idx, h, w):
    b, c, oh, ow = dout.shape
    flat = np.zeros((b, c, oh, ow, 4), dtype=np.float64)
    np.put_along_axis(flat, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros((b, c, h, w), dtype=np.float64)
    win = flat.reshape(b, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx[:, :, : 2 * oh, : 2 * ow] = win.reshape(b, c, 2 * oh, 2 * ow)
    return dx


def _pairwise_sqdist_np(q, e):
    # cdist evaluates per-pair differences directly, so identical rows come
    # out at exactly 0.0 (the matmul expansion would leave cancellation noise).
    from scipy.spatial.distance import cdist

    return cdist(q, e, "sqeuclidean")


# ---------------------------------------------------------------------------
# loop implementations (numba targets)
# ---------------------------------------------------------------------------

def _conv2d_forward_loops(x, w, b):
    # Loop order keeps the innermost loop on contiguous rows so it vectorises.
    nb, nc, h, width = x.shape
    nf, _, kh, kw = w.shape
    oh = h - kh + 1
    ow = width - kw + 1
    out = np.empty((nb, nf, oh, ow), dtype=np.float64)
    for n in range(nb):
        for f in range(nf):
            for i in range(oh):
                for j in range(ow):
                    out[n, f, i, j] = b[f]
            for c in range(nc):
                for p in range(kh):
                    for q in range(kw):
                        wv = w[f, c, p, q]
                        for i in range(oh):
                            for j in range(ow):
                                out[n, f, i, j] += wv * x[n, c, i + p, j + q]
    return out


def _conv2d_backward_loops(x, w, dout):
    nb, nc, h, width = x.shape
    nf, _, kh, kw = w.shape
    oh = dout.shape[2]
    ow = dout.shape[3]
    dx = np.zeros((nb, nc, h, width), dtype=np.float64)
    dw = np.zeros((nf, nc, kh, kw), dtype=np.float64)
    db = np.zeros(nf, dtype=np.float64)
    for f in range(nf):
        acc_b = 0.0
        for n in range(nb):
            for i in range(oh):
                for j in range(ow):
                    acc_b += dout[n, f, i, j]
        db[f] = acc_b
        for c in range(nc):
            for p in range(kh):
                for q in range(kw):
                    acc = 0.0
                    for n in range(nb):
                        for i in range(oh):
                            for j in range(ow):
                                acc += dout[n, f, i, j] * x[n, c, i + p, j + q]
                    dw[f, c, p, q] = acc
    for n in range(nb):
        for c in range(nc):
            for f in range(nf):
                for p in range(kh):
                    for q in range(kw):
                        wv = w[f, c, p, q]
                        for i in range(oh):
                            for j in range(ow):
                                dx[n, c, i + p, j + q] += wv * dout[n, f, i, j]
    return dx, dw, db


def _maxpool2_forward_loops(x):
    nb, nc, h, w = x.shape
    oh = h // 2
    ow = w // 2
    out = np.empty((nb, nc, oh, ow), dtype=np.float64)
    idx = np.empty((nb, nc, oh, ow), dtype=np.int64)
    for n in range(nb):
        for c in range(nc):
            for i in range(oh):
                for j in range(ow):
                    best = x[n, c, 2 * i, 2 * j]
                    arg = 0
                    for p in range(2):
                        for q in range(2):
                            v = x[n, c, 2 * i + p, 2 * j + q]
                            if v > best:
                                best = v
                                arg = 2 * p + q
                    out[n, c, i, j] = best
                    idx[n, c, i, j] = arg
    return out, idx


def _maxpool2_backward_loops(dout, idx, h, w):
    nb, nc, oh, ow = dout.shape
    dx = np.zeros((nb, nc, h, w), dtype=np.float64)
    for n in range(nb):
        for c in range(nc):
            for i in range(oh):
                for j in range(ow):
                    a = idx[n, c, i, j]
                    dx[n, c, 2 * i + a // 2, 2 * j + a % 2] = dout[n, c, i, j]
    return dx


def _pairwise_sqdist_loops(q, e):
    m, dim = q.shape
    n = e.shape[0]
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for d in range(dim):
                t = q[i, d] - e[j, d]
                s += t * t
            out[i, j] = s
    return out


if NUMBA_ENABLED:
    # reassoc/contract let LLVM vectorise the reductions without assuming
    # away NaN/Inf (divergence detection relies on them propagating).
    _FASTMATH = {"reassoc", "contract", "arcp"}
    _conv2d_forward_nb = _njit(cache=True, fastmath=_FASTMATH)(_conv2d_forward_loops)
    _conv2d_backward_nb = _njit(cache=True, fastmath=_FASTMATH)(_conv2d_backward_loops)
    _maxpool2_forward_nb = _njit(cache=True)(_maxpool2_forward_loops)
    _maxpool2_backward_nb = _njit(cache=True)(_maxpool2_backward_loops)
    _pairwise_sqdist_nb = _njit(cache=True, fastmath=_FASTMATH)(_pairwise_sqdist_loops)


# ---------------------------------------------------------------------------
# public dispatchers
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid (no padding), stride-1 cross-correlation of a NCHW batch."""
    x, w, b = _f64(x), _f64(w), _f64(b)
    if NUMBA_ENABLED:
        return _conv2d_forward_nb(x, w, b)
    return _conv2d_forward_np(x, w, b)


def conv2d_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray):
    """Gradients (dx, dw, db) of :func:`conv2d_forward`."""
    x, w, dout = _f64(x), _f64(w), _f64(dout)
    if NUMBA_ENABLED:
        return _conv2d_backward_nb(x, w, dout)
    return _conv2d_backward_np(x, w, dout)


def maxpool2_forward(x: np.ndarray):
    """2x2, stride-2 max pooling; trailing odd row/column is dropped.

    Returns the pooled map and the window-local argmax (0..3, first maximum
    wins) needed by the backward pass.
    """
    x = _f64(x)
    if NUMBA_ENABLED:
        return _maxpool2_forward_nb(x)
    return _maxpool2_forward_np(x)


def maxpool2_backward(dout: np.ndarray, idx: np.ndarray, h: int, w: int) -> np.ndarray:
    dout = _f64(dout)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if NUMBA_ENABLED:
        return _maxpool2_backward_nb(dout, idx, h, w)
    return _maxpool2_backward_np(dout, idx, h, w)


def pairwise_sqdist(queries: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between every query row and every entry row."""
    q, e = _f64(queries), _f64(entries)
    if NUMBA_ENABLED:
        return _pairwise_sqdist_nb(q, e)
    return _pairwise_sqdist_np(q, e)
