"""Dense float64 tensors with a reverse-mode tape, plus seeded initialization.

Operations record themselves on the active :class:`Tape` (if any) when at
least one operand requires a gradient. Outside a tape every op is a plain
forward computation, which is what inference and finite-difference probes use.

>>> w = ParamTensor([[0.5]])
>>> with Tape() as tape:
...     loss = tanh_map(matmul(w, w)).sum()
...     tape.backward(loss)
>>> round(float(w.grad[0, 0]), 6)
0.940015
"""
import math
import threading

import numpy as np

from . import kernels
from .errors import ConfigError, EvaluationError, ShapeError

LAYER_NORM_EPS = 1e-5

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records differentiable ops; one tape is owned by one training step."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def backward(self, loss, grad=None):
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=np.float64)
        for out, parents, fn in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    pg = _unbroadcast(pg, p.data.shape)
                p.grad = pg if p.grad is None else p.grad + pg
            if not isinstance(out, ParamTensor):
                out.grad = None
        self.records.clear()


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 else axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class ParamTensor(Tensor):
    """A learnable tensor with a persistent, same-shape gradient accumulator."""

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    @property
    def size(self):
        return self.data.size


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _result(data, parents, backward):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.records.append((out, parents, backward))
    return out


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"{what}: non-finite input")


# ------------------------------------------------------------ elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c):
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tanh_map(m):
    """Elementwise hyperbolic tangent."""
    m = as_tensor(m)
    _check_finite(m.data, "tanh_map")
    y = np.tanh(m.data)
    return _result(y, (m,), lambda g: (g * (1.0 - y * y),))


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = np.ascontiguousarray(x.data)
    return _result(kernels.gelu_fwd(xd), (x,), lambda g: (kernels.gelu_bwd(xd, g),))


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x):
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def logistic(x):
    x = as_tensor(x)
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def clip(x, lo, hi):
    x = as_tensor(x)
    y = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(y, (x,), lambda g: (g * inside,))


# ------------------------------------------------------------ shape ops


def reshape(x, shape):
    x = as_tensor(x)
    old = x.data.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ConfigError("stack of an empty sequence")
    data = np.stack([t.data for t in ts], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result(data, tuple(ts), back)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.data.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / float(n))


def masked_mean(x, mask, axis):
    """Mean of ``x`` over ``axis`` counting only entries where ``mask`` is 1.

    ``mask`` is a constant 0/1 array broadcastable against ``x``.
    """
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum(axis=axis, keepdims=True)
    if np.any(count == 0):
        raise ShapeError("masked_mean over an all-masked slice")
    w = mask / count
    return tsum(mul(x, w), axis=axis)


# ------------------------------------------------------------ linear algebra


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    _check_finite(a.data, "matmul")
    _check_finite(b.data, "matmul")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), back)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x``.

    A 2-D weight is applied as one GEMM over all leading axes; a batched
    weight falls back to broadcasting ``matmul``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        out = matmul(x, weight)
        return out if bias is None else add(out, bias)
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {din}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    y = x2 @ weight.data
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        y += bias.data
        parents = (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ weight.data.T).reshape(lead + (din,)) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, _unbroadcast(g2.sum(axis=0), bias.shape)

    return _result(y.reshape(lead + (dout,)), parents, back)


def softmax(v, axis=-1):
    """Numerically stabilized softmax along ``axis``."""
    v = as_tensor(v)
    if v.data.size == 0 or v.data.shape[axis] == 0:
        raise ConfigError("softmax of an empty vector")
    _check_finite(v.data, "softmax")
    moved = np.moveaxis(v.data, axis, -1)
    shp = moved.shape
    p2 = kernels.softmax_rows(np.ascontiguousarray(moved.reshape(-1, shp[-1])))
    p = np.moveaxis(p2.reshape(shp), -1, axis)

    def back(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1)).reshape(-1, shp[-1])
        return (np.moveaxis(kernels.softmax_rows_bwd(p2, gm).reshape(shp), -1, axis),)

    return _result(p, (v,), back)


def _normalize(x, eps):
    d = x.shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    ones, zeros = np.ones(d), np.zeros(d)
    _, xhat, rstd = kernels.layer_norm_fwd(x2, ones, zeros, eps)

    def back(g):
        dx, _, _ = kernels.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, ones)
        return (dx.reshape(x.shape),)

    return _result(xhat.reshape(x.shape), (x,), back)


def layer_norm(row, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    row, gain, bias = as_tensor(row), as_tensor(gain), as_tensor(bias)
    d = row.shape[-1]
    if gain.shape[-1] != d or bias.shape[-1] != d:
        raise ShapeError(f"layer_norm: row width {d}, gain {gain.shape}, bias {bias.shape}")
    if gain.ndim != 1 or bias.ndim != 1:
        return add(mul(_normalize(row, eps), gain), bias)
    x2 = np.ascontiguousarray(row.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gain.data, bias.data, eps)

    def back(g):
        dx, dg, db = kernels.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gain.data)
        return dx.reshape(row.shape), dg, db

    return _result(y.reshape(row.shape), (row, gain, bias), back)


def time_pool(x, r):
    """Non-overlapping mean pooling of the last axis by factor ``r``.

    The final window may be shorter; it is averaged over its actual length,
    so the output length is ``ceil(T / r)``.
    """
    x = as_tensor(x)
    t = x.shape[-1]
    pool = pooling_matrix(t, r)
    return _result(x.data @ pool, (x,), lambda g: (g @ pool.T,))


def pooling_matrix(t, r):
    if r < 1 or t < 1:
        raise ConfigError(f"pooling needs t >= 1 and r >= 1, got t={t}, r={r}")
    tp = -(-t // r)
    pool = np.zeros((t, tp))
    for j in range(tp):
        lo, hi = j * r, min(t, (j + 1) * r)
        pool[lo:hi, j] = 1.0 / (hi - lo)
    return pool


def dropout(x, rate, rng):
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ------------------------------------------------------------ init / rng


def make_rng(seed):
    return np.random.default_rng(seed)


def derive_seeds(root_seed, n, purpose=0):
    """``n`` independent child seeds from one root seed.

    Different ``purpose`` values give disjoint streams for the same root.
    """
    children = np.random.SeedSequence(int(root_seed), spawn_key=(int(purpose),)).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def glorot_init(shape, rng, name=None):
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if not shape or any(s <= 0 for s in shape):
        raise ConfigError(f"glorot_init needs positive dimensions, got {shape}")
    if len(shape) >= 2:
        fan_in, fan_out = shape[-2], shape[-1]
    else:
        fan_in = fan_out = shape[0]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return ParamTensor(rng.uniform(-limit, limit, size=shape), name=name)


# ------------------------------------------------------------ gradient check


def _scalar_value(out):
    val = out.data if isinstance(out, Tensor) else np.asarray(out)
    if val.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {val.shape}")
    val = float(val.reshape(()))
    if not math.isfinite(val):
        raise EvaluationError("function value is not finite")
    return val


def grad_check(fn, params, step=1e-5, floor=1e-6):
    """Worst relative disagreement between tape gradients and central differences.

    ``fn`` takes no arguments and returns a scalar Tensor computed from
    ``params``. The relative error of one coordinate is
    ``|a - n| / max(|a| + |n|, floor)``.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ConfigError(f"step must lie in [1e-6, 1e-3], got {step}")
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None if not isinstance(p, ParamTensor) else np.zeros_like(p.data)
    with Tape() as tape:
        out = fn()
        _scalar_value(out)
        tape.backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ShapeError("grad_check needs contiguous parameter storage")
        ga = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar_value(fn())
            flat[i] = orig - step
            fm = _scalar_value(fn())
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            err = abs(ga[i] - num) / max(abs(ga[i]) + abs(num), floor)
            worst = max(worst, err)
    return worst
