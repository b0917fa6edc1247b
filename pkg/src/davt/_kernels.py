"""Hot numeric kernels with two interchangeable backends.

The jitted path (numba ``@njit``) is used when numba imports cleanly and the
environment variable ``DAVT_NUMBA`` is not ``"0"``; otherwise the pure-numpy
twins run.  Matrix products are not here on purpose, numpy already dispatches
those to BLAS.

Both backends evaluate the same scalar expression per output element:
``bilinear_resize`` is bit-identical across backends, ``softmax_rows`` and
``gauss_cdf`` agree to a few ulps (reduction order and erf source differ).
``benchmarks/bench_kernels.py`` times the twins against each other.
"""

import math
import os

import numpy as np
from scipy.special import erf as _scipy_erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def _as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# numpy twins
# ---------------------------------------------------------------------------

def _axis_positions(n_out, n_src):
    # Corner-aligned sampling: same-size resize lands on integer positions,
    # which makes the identity resize exact.
    if n_out > 1 and n_src > 1:
        scale = (n_src - 1) / (n_out - 1)
    else:
        scale = 0.0
    pos = np.arange(n_out, dtype=np.float64) * scale
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, frac


def bilinear_resize_numpy(src, out_h, out_w):
    src = _as_f64(src)
    h, w, c = src.shape
    y0, y1, fy = _axis_positions(out_h, h)
    x0, x1, fx = _axis_positions(out_w, w)
    a = src[y0[:, None], x0[None, :], :]
    b = src[y0[:, None], x1[None, :], :]
    cc = src[y1[:, None], x0[None, :], :]
    d = src[y1[:, None], x1[None, :], :]
    fxc = fx[None, :, None]
    fyc = fy[:, None, None]
    top = a + fxc * (b - a)
    bot = cc + fxc * (d - cc)
    return top + fyc * (bot - top)


def softmax_rows_numpy(x):
    x = _as_f64(x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def gauss_cdf_numpy(x):
    x = _as_f64(x)
    return 0.5 * (1.0 + _scipy_erf(x * _INV_SQRT2))


# ---------------------------------------------------------------------------
# numba twins
# ---------------------------------------------------------------------------

_env = os.environ.get("DAVT_NUMBA", "1")
_use_numba = _env != "0"
if _use_numba:
    try:
        from numba import njit
    except ImportError:
        _use_numba = False

if _use_numba:

    @njit(cache=True)
    def _bilinear_resize_jit(src, out_h, out_w):
        h, w, c = src.shape
        out = np.empty((out_h, out_w, c), dtype=np.float64)
        sy = (h - 1) / (out_h - 1) if (out_h > 1 and h > 1) else 0.0
        sx = (w - 1) / (out_w - 1) if (out_w > 1 and w > 1) else 0.0
        for i in range(out_h):
            y = i * sy
            y0 = int(math.floor(y))
            fy = y - y0
            y1 = min(y0 + 1, h - 1)
            for j in range(out_w):
                x = j * sx
                x0 = int(math.floor(x))
                fx = x - x0
                x1 = min(x0 + 1, w - 1)
                for k in range(c):
                    a = src[y0, x0, k]
                    b = src[y0, x1, k]
                    cc = src[y1, x0, k]
                    d = src[y1, x1, k]
                    top = a + fx * (b - a)
                    bot = cc + fx * (d - cc)
                    out[i, j, k] = top + fy * (bot - top)
        return out

    @njit(cache=True)
    def _softmax_rows_jit(x):
        rows, cols = x.shape
        out = np.empty((rows, cols), dtype=np.float64)
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(cols):
                v = math.exp(x[i, j] - m)
                out[i, j] = v
                s += v
            for j in range(cols):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def _gauss_cdf_jit(x):
        out = np.empty(x.size, dtype=np.float64)
        flat = x.ravel()
        for i in range(flat.size):
            out[i] = 0.5 * (1.0 + math.erf(flat[i] * _INV_SQRT2))
        return out

    def bilinear_resize_numba(src, out_h, out_w):
        return _bilinear_resize_jit(_as_f64(src), out_h, out_w)

    def softmax_rows_numba(x):
        return _softmax_rows_jit(_as_f64(x))

    def gauss_cdf_numba(x):
        x = _as_f64(x)
        return _gauss_cdf_jit(x).reshape(x.shape)

    BACKEND = "numba"
    bilinear_resize = bilinear_resize_numba
    softmax_rows = softmax_rows_numba
    gauss_cdf = gauss_cdf_numba
else:
    BACKEND = "numpy"
    bilinear_resize_numba = None
    softmax_rows_numba = None
    gauss_cdf_numba = None
    bilinear_resize = bilinear_resize_numpy
    softmax_rows = softmax_rows_numpy
    gauss_cdf = gauss_cdf_numpy


def active_backend():
    """Name of the kernel backend selected at import time."""
    return BACKEND


# (numpy_twin, numba_twin_or_None) pairs, keyed by kernel name.
TWINS = {
    "bilinear_resize": (bilinear_resize_numpy, bilinear_resize_numba),
    "softmax_rows": (softmax_rows_numpy, softmax_rows_numba),
    "gauss_cdf": (gauss_cdf_numpy, gauss_cdf_numba),
}
