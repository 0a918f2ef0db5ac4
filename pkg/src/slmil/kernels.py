"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``SLMIL_USE_NUMBA`` is not
set to ``0``/``false``/``no``. Both paths are always importable so tests and
``benchmarks/bench_kernels.py`` can compare them directly. Kernels listed
in ``NUMPY_PREFERRED`` dispatch to numpy either way.

All kernels take C-contiguous float64 arrays; row-wise kernels work on the
last axis of a 2-D view.
"""
import math
import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def _env_enabled():
    flag = os.environ.get("SLMIL_USE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = _HAVE_NUMBA and _env_enabled()

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------- numpy path


def layer_norm_fwd_numpy(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_bwd_numpy(dy, xhat, rstd, gain):
    dg = np.sum(dy * xhat, axis=0)
    db = np.sum(dy, axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dg, db


def gelu_fwd_numpy(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def gelu_bwd_numpy(x, dy):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    th = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def softmax_rows_numpy(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd_numpy(p, dp):
    return p * (dp - np.sum(dp * p, axis=1, keepdims=True))


def pearson_fc_numpy(x):
    xc = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(xc * xc, axis=1))
    z = xc / norms[:, None]
    r = z @ z.T
    r = 0.5 * (r + r.T)
    np.clip(r, -1.0, 1.0, out=r)
    np.fill_diagonal(r, 1.0)
    return r


def midranks_numpy(values):
    """1-based ranks with ties replaced by their average rank."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    n = values.shape[0]
    # boundaries of tie groups in sorted order
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], n]
    avg = 0.5 * (starts + ends - 1) + 1.0
    ranks_sorted = np.repeat(avg, ends - starts)
    ranks = np.empty(n)
    ranks[order] = ranks_sorted
    return ranks


# ---------------------------------------------------------------- numba path

if _HAVE_NUMBA:
    _jit = numba.njit(cache=True, fastmath=False, nogil=True)

    @_jit
    def layer_norm_fwd_numba(x, gain, bias, eps):
        m, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(m)
        for i in range(m):
            s = 0.0
            for j in range(d):
                s += x[i, j]
            mu = s / d
            v = 0.0
            for j in range(d):
                c = x[i, j] - mu
                v += c * c
            r = 1.0 / math.sqrt(v / d + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gain[j] + bias[j]
        return y, xhat, rstd

    @_jit
    def layer_norm_bwd_numba(dy, xhat, rstd, gain):
        m, d = dy.shape
        dx = np.empty_like(dy)
        dg = np.zeros(d)
        db = np.zeros(d)
        for i in range(m):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = dy[i, j]
                h = xhat[i, j]
                dg[j] += g * h
                db[j] += g
                dh = g * gain[j]
                m1 += dh
                m2 += dh * h
            m1 /= d
            m2 /= d
            r = rstd[i]
            for j in range(d):
                dx[i, j] = (dy[i, j] * gain[j] - m1 - xhat[i, j] * m2) * r
        return dx, dg, db

    @_jit
    def _tanh_exp(u):
        # libm tanh is several times slower than exp inside numba loops
        if u > 20.0:
            return 1.0
        if u < -20.0:
            return -1.0
        e = math.exp(2.0 * u)
        return (e - 1.0) / (e + 1.0)

    @_jit
    def _gelu_fwd_flat(x, out):
        for i in range(x.shape[0]):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + _tanh_exp(_GELU_C * (v + _GELU_A * v * v * v)))

    @_jit
    def _gelu_bwd_flat(x, dy, out):
        for i in range(x.shape[0]):
            v = x[i]
            th = _tanh_exp(_GELU_C * (v + _GELU_A * v * v * v))
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
            out[i] = dy[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)

    def gelu_fwd_numba(x):
        out = np.empty_like(x)
        _gelu_fwd_flat(x.reshape(-1), out.reshape(-1))
        return out

    def gelu_bwd_numba(x, dy):
        out = np.empty_like(x)
        _gelu_bwd_flat(x.reshape(-1), np.ascontiguousarray(dy).reshape(-1), out.reshape(-1))
        return out

    @_jit
    def softmax_rows_numba(x):
        m, d = x.shape
        out = np.empty_like(x)
        for i in range(m):
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(d):
                out[i, j] /= s
        return out

    @_jit
    def softmax_rows_bwd_numba(p, dp):
        m, d = p.shape
        out = np.empty_like(p)
        for i in range(m):
            s = 0.0
            for j in range(d):
                s += dp[i, j] * p[i, j]
            for j in range(d):
                out[i, j] = p[i, j] * (dp[i, j] - s)
        return out

    @_jit
    def pearson_fc_numba(x):
        n, t = x.shape
        z = np.empty_like(x)
        for i in range(n):
            s = 0.0
            for k in range(t):
                s += x[i, k]
            mu = s / t
            ss = 0.0
            for k in range(t):
                c = x[i, k] - mu
                z[i, k] = c
                ss += c * c
            nrm = math.sqrt(ss)
            for k in range(t):
                z[i, k] /= nrm
        g = z @ z.T  # BLAS inside numba too
        r = np.empty((n, n))
        for i in range(n):
            r[i, i] = 1.0
            for j in range(i + 1, n):
                v = min(1.0, max(-1.0, 0.5 * (g[i, j] + g[j, i])))
                r[i, j] = v
                r[j, i] = v
        return r

    @_jit
    def midranks_numba(values):
        n = values.shape[0]
        order = np.argsort(values, kind="mergesort")
        ranks = np.empty(n)
        i = 0
        while i < n:
            j = i
            while j + 1 < n and values[order[j + 1]] == values[order[i]]:
                j += 1
            avg = 0.5 * (i + j) + 1.0
            for k in range(i, j + 1):
                ranks[order[k]] = avg
            i = j + 1
        return ranks

else:  # pragma: no cover
    layer_norm_fwd_numba = layer_norm_fwd_numpy
    layer_norm_bwd_numba = layer_norm_bwd_numpy
    gelu_fwd_numba = gelu_fwd_numpy
    gelu_bwd_numba = gelu_bwd_numpy
    softmax_rows_numba = softmax_rows_numpy
    softmax_rows_bwd_numba = softmax_rows_bwd_numpy
    pearson_fc_numba = pearson_fc_numpy
    midranks_numba = midranks_numpy


KERNEL_NAMES = (
    "layer_norm_fwd",
    "layer_norm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "softmax_rows",
    "softmax_rows_bwd",
    "pearson_fc",
    "midranks",
)


def implementations(name):
    """Return ``(numpy_impl, numba_impl)`` for a kernel name."""
    g = globals()
    return g[name + "_numpy"], g[name + "_numba"]


# numpy's vectorized exp/sort beats a scalar numba loop here (see the
# benchmark), so these stay on numpy even when numba is enabled
NUMPY_PREFERRED = frozenset({"gelu_fwd", "softmax_rows", "midranks"})


def _select():
    g = globals()
    for name in KERNEL_NAMES:
        fast = USE_NUMBA and name not in NUMPY_PREFERRED
        g[name] = g[name + ("_numba" if fast else "_numpy")]


_select()
