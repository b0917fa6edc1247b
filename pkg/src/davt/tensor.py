"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Everything is 64-bit and row-major.  Broadcasting is deliberately limited to
bias-add (matrix plus row vector) and python scalars; all other shapes must
match exactly so that mistakes surface as errors instead of silent
broadcasts.  Ops record onto the currently active :class:`Tape`; replaying
the tape in reverse is bit-deterministic because entry order and accumulation
order are fixed by execution order.
"""

from __future__ import annotations

import math
import os
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import GradientError, ShapeError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_finite_checks = os.environ.get("DAVT_DEBUG_CHECKS", "1") != "0"


def set_finite_checks(enabled):
    """Toggle the NaN/Inf assertion on op outputs (off for benchmarking)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def finite_checks_enabled():
    return _finite_checks


def _check_finite(data, where):
    if _finite_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {where}")


_active_tape = None


class Tape:
    """Execution-ordered record of differentiable ops for one backward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` exactly once.  Tapes do not nest and are confined to a
    single thread.
    """

    def __init__(self):
        self._entries = []
        self._consumed = False

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise GradientError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def __len__(self):
        return len(self._entries)

    def backward(self, loss):
        """Populate ``.grad`` on every requires_grad leaf reachable from loss.

        The loss must be a scalar recorded on this tape.  A second call on
        the same tape is an error: silent re-accumulation hides bugs.
        """
        if self._consumed:
            raise GradientError("backward already ran on this tape")
        if loss._tape is not self:
            raise GradientError("loss is detached from this tape")
        if loss.shape != ():
            raise GradientError(
                f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads = {id(loss): np.ones((), dtype=np.float64)}
        holders = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self._entries):
            g = grads.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
                holders[id(inp)] = inp
        # Whatever is left was never produced by an entry: the leaves.
        for key, g in grads.items():
            leaf = holders[key]
            if leaf.requires_grad:
                leaf.grad = np.array(g, dtype=np.float64)


class Tensor:
    """Dense n-dimensional float64 value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        """Copy of the underlying array, detached from any tape."""
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return _reduce(self, "sum")

    def mean(self):
        return _reduce(self, "mean")

    def reshape(self, shape):
        return reshape(self, shape)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _wrap(data, inputs, backward_fn, op_name):
    _check_finite(data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    out._tape = None
    if _active_tape is not None and out.requires_grad:
        _active_tape._entries.append((out, inputs, backward_fn))
        out._tape = _active_tape
    return out


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    """a + b for matching shapes, matrix + row-vector bias, or a + scalar."""
    if isinstance(b, (int, float)):
        s = float(b)

        def backward(g):
            return (g if a.requires_grad else None,)

        return _wrap(a.data + s, (a,), backward, "add")
    if a.shape == b.shape:

        def backward(g):
            return (g if a.requires_grad else None,
                    g if b.requires_grad else None)

        return _wrap(a.data + b.data, (a, b), backward, "add")
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:

        def backward(g):
            return (g if a.requires_grad else None,
                    g.sum(axis=0) if b.requires_grad else None)

        return _wrap(a.data + b.data, (a, b), backward, "add")
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return (g if a.requires_grad else None,
                -g if b.requires_grad else None)

    return _wrap(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    """Elementwise product for matching shapes, or scaling by a python scalar."""
    if isinstance(b, (int, float)):
        s = float(b)

        def backward(g):
            return (g * s if a.requires_grad else None,)

        return _wrap(a.data * s, (a,), backward, "mul")
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _wrap(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b):
    """2-D matrix product; gradients dA = g @ B^T, dB = A^T @ g."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner extents differ, {a.shape} vs {b.shape}")

    def backward(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _wrap(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x):
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.shape}")

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _wrap(np.ascontiguousarray(x.data.T), (x,), backward, "transpose")


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _wrap(x.data.reshape(shape).copy(), (x,), backward, "reshape")


def concat(parts, axis=0):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    ndim = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise ShapeError("concat: rank mismatch")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * ndim
        outs = []
        for i, p in enumerate(parts):
            if not p.requires_grad:
                outs.append(None)
                continue
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(np.ascontiguousarray(g[tuple(slicer)]))
        return tuple(outs)

    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    return _wrap(data, tuple(parts), backward, "concat")


def index_select(x, indices, axis=0):
    """Gather rows (axis 0) or columns (axis 1); duplicates accumulate in backward."""
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"index_select supports 1-D/2-D tensors, got {x.shape}")
    if axis not in (0, 1) or axis >= x.data.ndim:
        raise ShapeError(f"index_select: axis {axis} invalid for shape {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("index_select: indices must be one-dimensional")
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(
            f"index_select: index out of range for extent {n} on axis {axis}")

    def backward(g):
        gx = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(gx, idx, g)
        else:
            np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    return _wrap(np.ascontiguousarray(np.take(x.data, idx, axis=axis)),
                 (x,), backward, "index_select")


def _reduce(x, kind):
    n = x.size
    if kind == "sum":
        data = np.asarray(x.data.sum())
        factor = 1.0
    else:
        data = np.asarray(x.data.mean())
        factor = 1.0 / n
    shape = x.shape

    def backward(g):
        return (np.full(shape, float(g) * factor),)

    return _wrap(data, (x,), backward, kind)


def linear(x, w, b):
    """Affine map x @ w + b; plain composition of matmul and bias add."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def softmax(x, axis=-1):
    """Rows along ``axis`` become nonnegative and sum to one (max-shifted exp)."""
    nd = x.data.ndim
    ax = axis if axis >= 0 else nd + axis
    if ax < 0 or ax >= nd:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    if nd == 2 and ax == 1:
        p = _kernels.softmax_rows(x.data)
    elif nd == 1:
        p = _kernels.softmax_rows(x.data.reshape(1, -1)).reshape(x.shape)
    else:
        shifted = x.data - x.data.max(axis=ax, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=ax, keepdims=True)
        return (p * (g - inner),)

    return _wrap(p, (x,), backward, "softmax")


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), "
            f"got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gh = g * gain.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gh - m1 - xhat * m2)
        reduce_axes = tuple(range(x.data.ndim - 1))
        ggain = (g * xhat).sum(axis=reduce_axes) if gain.requires_grad else None
        gbias = g.sum(axis=reduce_axes) if bias.requires_grad else None
        return (gx if x.requires_grad else None, ggain, gbias)

    return _wrap(xhat * gain.data + bias.data, (x, gain, bias), backward,
                 "layer_norm")


def gelu(x):
    """Exact Gaussian-CDF gelu, x * Phi(x)."""
    phi = _kernels.gauss_cdf(x.data)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi + x.data * pdf),)

    return _wrap(x.data * phi, (x,), backward, "gelu")


def cross_entropy_with_logits(logits, label):
    """Negative log softmax probability of ``label``, via log-sum-exp."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross entropy needs a logit vector, got {logits.shape}")
    c = logits.shape[0]
    label = int(label)
    if not 0 <= label < c:
        raise ShapeError(f"label {label} out of range for {c} classes")
    m = logits.data.max()
    z = logits.data - m
    e = np.exp(z)
    total = e.sum()
    loss = np.asarray(math.log(total) - z[label])

    def backward(g):
        p = e / total
        p[label] -= 1.0
        return (p * float(g),)

    return _wrap(loss, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

GRAD_CHECK_FLOOR = 1e-5


def _central_difference(f, flat, i, eps):
    old = flat[i]
    flat[i] = old + eps
    fp = f()
    flat[i] = old - eps
    fm = f()
    flat[i] = old
    return (fp - fm) / (2.0 * eps)


def grad_check(f, x, eps=1e-5, probes=None, seed=0):
    """Worst relative error between autodiff and central differences.

    ``f`` maps the tensor to a scalar and must be deterministic; it is
    re-evaluated with single elements of ``x`` nudged by ``eps``.  The
    denominator is floored at ``GRAD_CHECK_FLOOR`` so near-zero gradients are
    compared absolutely.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    if not x.requires_grad:
        raise GradientError("grad_check target must have requires_grad set")
    with Tape() as tape:
        tape.backward(f(x))
    auto = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    n = flat.size
    if probes is None or probes >= n:
        picked = np.arange(n)
    else:
        picked = np.random.default_rng(seed).choice(n, size=probes, replace=False)
    worst = 0.0
    for i in picked:
        fd = _central_difference(lambda: f(x).item(), flat, i, eps)
        denom = max(abs(fd), abs(auto[i]), GRAD_CHECK_FLOOR)
        worst = max(worst, abs(fd - auto[i]) / denom)
    return worst


def grad_check_params(loss_fn, params, eps=1e-5, probes=200, seed=0):
    """Finite-difference check across a whole dict of named parameters.

    Probes ``probes`` coordinates sampled uniformly over the concatenation of
    all parameter tensors and returns the worst relative error.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    names = sorted(params)
    with Tape() as tape:
        tape.backward(loss_fn())
    grads = {}
    for name in names:
        p = params[name]
        grads[name] = (np.zeros_like(p.data) if p.grad is None else p.grad).reshape(-1)
    sizes = np.array([params[n].size for n in names], dtype=np.int64)
    bounds = np.cumsum(sizes)
    total = int(bounds[-1])
    rng = np.random.default_rng(seed)
    picked = rng.choice(total, size=min(probes, total), replace=False)
    worst = 0.0
    for flat_index in picked:
        slot = int(np.searchsorted(bounds, flat_index, side="right"))
        offset = int(flat_index - (bounds[slot - 1] if slot else 0))
        name = names[slot]
        flat = params[name].data.reshape(-1)
        fd = _central_difference(lambda: loss_fn().item(), flat, offset, eps)
        a = grads[name][offset]
        denom = max(abs(fd), abs(a), GRAD_CHECK_FLOOR)
        worst = max(worst, abs(fd - a) / denom)
    return worst
