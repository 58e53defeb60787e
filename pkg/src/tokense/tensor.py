"""Reverse-mode automatic differentiation on numpy arrays.

The module implements a small define-by-run tape: every operation builds a
``Tensor`` node holding its forward value, the parent nodes, and a closure
that routes the upstream gradient to those parents.  ``Tensor.backward()``
walks the graph once in reverse topological order and accumulates gradients
by summation, so a value feeding several consumers receives the sum of their
contributions.

Two precision regimes are used throughout the package: float64 for tests and
numeric oracles, float32 for training.  ``set_default_dtype`` switches the
dtype used when leaves are created from python data; operations preserve the
dtype of their inputs.

Every operation checks its output for NaN/Inf and raises ``NumericError``
on the first non-finite value; silent propagation of bad numerics is treated
as a bug, not a warning.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import NumericError, PreconditionError, ShapeError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype):
    """Set the dtype used for leaves created from python data (f32 or f64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise PreconditionError(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default leaf dtype."""
    global _DEFAULT_DTYPE
    saved = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = saved


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def _check_finite(arr, op):
    # cheap for float arrays; int arrays (token ids) are never routed here
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by op '{op}'")


class Tensor:
    """A node in the autodiff graph wrapping a numpy float array."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        if isinstance(data, Tensor):
            data = data.data
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(_DEFAULT_DTYPE)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    # -- graph machinery ----------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Backpropagate from this node.

        ``seed`` defaults to ones; a scalar output is the common case.  The
        traversal is iterative so graphs as deep as a long sequential scan
        do not hit the interpreter recursion limit.
        """
        if seed is None:
            if self.data.size != 1:
                raise PreconditionError(
                    f"backward() without a seed needs a scalar output, got shape {self.data.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != output shape {self.data.shape}")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def tensor(data, requires_grad=False, dtype=None):
    """Create a leaf tensor, using the module default dtype unless given."""
    arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def parameter(data, name=None, dtype=None):
    t = tensor(data, requires_grad=True, dtype=dtype)
    t.op = "param" if name is None else f"param:{name}"
    return t


def _make(data, op, parents, backward):
    """Build a non-leaf node; collapses to a constant when grads are off."""
    _check_finite(data, op)
    if not _GRAD_ENABLED:
        return Tensor(data, requires_grad=False, op=op)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, requires_grad=False, op=op, parents=parents)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, "add", (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, "mul", (a, b), backward)


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, "neg", (a,), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, "div", (a, b), backward)


def pow_const(a, p):
    a = _as_tensor(a)
    p = float(p)
    out_data = a.data**p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(out_data, "pow", (a,), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, "matmul", (a, b), backward)


# -- transcendental and activation functions -------------------------------


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, "exp", (a,), backward)


def log(a):
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, "log", (a,), backward)


def expm1(a):
    """exp(x) - 1, accurate for small x."""
    a = _as_tensor(a)
    out_data = np.expm1(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (out_data + 1.0))

    return _make(out_data, "expm1", (a,), backward)


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, "sqrt", (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    # stable two-sided form
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, "sigmoid", (a,), backward)


def softplus(a):
    a = _as_tensor(a)
    out_data = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)

    def backward(g):
        if a.requires_grad:
            x = a.data
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            a._accumulate(g * s)

    return _make(out_data, "softplus", (a,), backward)


def silu(a):
    a = _as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = x * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (s + x * s * (1.0 - s)))

    return _make(out_data, "silu", (a,), backward)


def relu(a):
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(out_data, "relu", (a,), backward)


def elu(a, alpha=1.0):
    a = _as_tensor(a)
    x = a.data
    out_data = np.where(x > 0, x, alpha * np.expm1(x))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.where(x > 0, 1.0, out_data + alpha))

    return _make(out_data, "elu", (a,), backward)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = np.sum(g * out_data, axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return _make(out_data, "softmax", (a,), backward)


# -- reductions ------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.dtype))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape))

    return _make(out_data, "sum", (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    if ax is None:
        count = a.size
    else:
        count = 1
        for i in ax:
            count *= a.shape[i]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- shape manipulation ----------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, "reshape", (a,), backward)


def transpose(a, axes=None):
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)

    def backward(g):
        if a.requires_grad:
            if axes is None:
                a._accumulate(np.transpose(g))
            else:
                a._accumulate(np.transpose(g, np.argsort(axes)))

    return _make(out_data, "transpose", (a,), backward)


def getitem(a, key):
    """Basic indexing (ints and slices). Fancy indexing goes through take()."""
    a = _as_tensor(a)
    out_data = a.data[key]

    def backward(g):
        if a.requires_grad:
            z = np.zeros_like(a.data)
            z[key] += g
            a._accumulate(z)

    return _make(np.ascontiguousarray(out_data), "getitem", (a,), backward)


def flip(a, axis=0):
    a = _as_tensor(a)
    out_data = np.flip(a.data, axis=axis)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.flip(g, axis=axis))

    return _make(np.ascontiguousarray(out_data), "flip", (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        offs = np.cumsum([0] + sizes)
        for t, lo, hi in zip(tensors, offs[:-1], offs[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out_data, "concat", tuple(tensors), backward)


def pad(a, pad_width):
    """Zero padding; pad_width follows np.pad, e.g. ((left, right), (0, 0))."""
    a = _as_tensor(a)
    out_data = np.pad(a.data, pad_width)

    def backward(g):
        if a.requires_grad:
            sl = tuple(slice(lo, g.shape[i] - hi if hi else None) for i, (lo, hi) in enumerate(pad_width))
            a._accumulate(g[sl])

    return _make(out_data, "pad", (a,), backward)


def where(cond, a, b):
    """Select by a boolean numpy mask; the mask itself carries no gradient."""
    cond = np.asarray(cond)
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = np.where(cond, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(out_data, "where", (a, b), backward)


def take(a, indices, axis=0):
    """Gather along axis 0 with an integer index array (embedding lookup)."""
    if axis != 0:
        raise PreconditionError("take() supports axis=0 only")
    a = _as_tensor(a)
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise PreconditionError(f"take() needs integer indices, got dtype {indices.dtype}")
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise PreconditionError(
            f"take() index out of range: [{indices.min()}, {indices.max()}] vs axis size {a.shape[0]}"
        )
    out_data = np.take(a.data, indices, axis=0)

    def backward(g):
        if a.requires_grad:
            z = np.zeros_like(a.data)
            np.add.at(z, indices, g)
            a._accumulate(z)

    return _make(out_data, "take", (a,), backward)


def upsample_zero(a, stride):
    """Insert stride-1 zeros between consecutive rows (axis 0)."""
    a = _as_tensor(a)
    if stride < 1:
        raise PreconditionError(f"stride must be >= 1, got {stride}")
    n = a.shape[0]
    out_shape = ((n - 1) * stride + 1,) + a.shape[1:]
    out_data = np.zeros(out_shape, dtype=a.dtype)
    out_data[::stride] = a.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[::stride])

    return _make(out_data, "upsample_zero", (a,), backward)


def stop_gradient(a):
    """Identity in the forward pass; the graph ends here in the backward pass."""
    a = _as_tensor(a)
    return Tensor(a.data, requires_grad=False, op="stop_gradient", parents=())


def straight_through(value, route):
    """Forward ``value`` (array or tensor), send the gradient to ``route``."""
    route = _as_tensor(route)
    data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=route.dtype)
    if data.shape != route.shape:
        raise ShapeError(f"straight_through value shape {data.shape} != route shape {route.shape}")

    def backward(g):
        if route.requires_grad:
            route._accumulate(g)

    return _make(data, "straight_through", (route,), backward)


# -- fused losses ----------------------------------------------------------


def cross_entropy_logits(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits).

    logits: (N, V); labels: (N,) ints in [0, V). Stable log-sum-exp forward,
    (softmax - onehot)/N backward.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits expects (N, V) logits, got {logits.shape}")
    n, v = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise PreconditionError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= v):
        raise PreconditionError(f"label out of range [0, {v})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    picked = x[np.arange(n), labels]
    out_data = np.asarray((lse - picked).mean(), dtype=x.dtype)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(x - m)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            logits._accumulate(g * p / n)

    return _make(out_data, "cross_entropy", (logits,), backward)


# -- composite layers ------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance, then affine."""
    mu = reduce_mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = reduce_mean(mul(xc, xc), axis=-1, keepdims=True)
    xn = div(xc, sqrt(add(var, eps)))
    return add(mul(xn, gamma), beta)


def linear_interp_rows(x, out_len):
    """Resample axis 0 to out_len rows by linear interpolation.

    End rows map exactly onto end rows, interior positions use the two
    nearest input rows with convex weights.
    """
    x = _as_tensor(x)
    n = x.shape[0]
    if n < 1 or out_len < 1:
        raise PreconditionError("linear_interp_rows needs at least one row in and out")
    if n == 1 or out_len == 1:
        idx = np.zeros(out_len, dtype=np.int64) if n == 1 else np.array([0], dtype=np.int64)
        return take(x, idx, axis=0)
    pos = np.linspace(0.0, n - 1, out_len)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, n - 2)
    w = (pos - lo).reshape((-1,) + (1,) * (x.ndim - 1)).astype(x.dtype)
    a = take(x, lo, axis=0)
    b = take(x, lo + 1, axis=0)
    return add(mul(a, 1.0 - w), mul(b, w))


# -- convolutions ----------------------------------------------------------


def conv1d(x, w, b=None, stride=1, padding=(0, 0)):
    """1-D convolution over (L, C_in) with weight (K, C_in, C_out).

    Implemented as gather-to-columns followed by a matmul so the backward
    pass rides on the primitive ops.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x (L, Cin) and w (K, Cin, Cout), got {x.shape}, {w.shape}")
    k, cin, cout = w.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv1d channel mismatch: x {x.shape} vs w {w.shape}")
    if isinstance(padding, int):
        padding = (padding, padding)
    xp = pad(x, (tuple(padding), (0, 0))) if any(padding) else x
    lp = xp.shape[0]
    t_out = (lp - k) // stride + 1
    if t_out < 1:
        raise PreconditionError(f"conv1d input too short: padded length {lp} < kernel {k}")
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = take(xp, idx, axis=0)  # (T, K, Cin)
    cols = reshape(cols, (t_out, k * cin))
    out = matmul(cols, reshape(w, (k * cin, cout)))
    if b is not None:
        out = add(out, b)
    return out


def conv1d_depthwise_causal(x, w, b=None):
    """Per-channel causal convolution: x (L, C), w (K, C); output frame t
    depends on input frames t-K+1 .. t only."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"depthwise conv expects x (L, C) and w (K, C), got {x.shape}, {w.shape}")
    k = w.shape[0]
    n = x.shape[0]
    xp = pad(x, ((k - 1, 0), (0, 0)))
    out = None
    for j in range(k):
        term = mul(getitem(xp, slice(j, j + n)), getitem(w, j))
        out = term if out is None else add(out, term)
    if b is not None:
        out = add(out, b)
    return out


def conv_transpose1d(x, w, b=None, stride=1):
    """Transposed 1-D convolution: x (T, C_in), w (K, C_in, C_out).

    Zero-stuffs the input by the stride and correlates with the time-flipped
    kernel; output length is (T - 1) * stride + K.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv_transpose1d expects x (T, Cin) and w (K, Cin, Cout), got {x.shape}, {w.shape}")
    k = w.shape[0]
    z = upsample_zero(x, stride) if stride > 1 else x
    zp = pad(z, ((k - 1, k - 1), (0, 0)))
    return conv1d(zp, flip(w, axis=0), b=b, stride=1)


# -- linear recurrence (the scan primitive) --------------------------------

_SCAN_THREADS = 1


def set_scan_threads(n):
    """Worker threads for the parallel scan; results do not depend on n."""
    global _SCAN_THREADS
    if n < 1:
        raise PreconditionError(f"thread count must be >= 1, got {n}")
    _SCAN_THREADS = int(n)


def scan_threads():
    return _SCAN_THREADS


def _affine_scan_inclusive(a, b):
    """Inclusive scan of affine maps h -> a*h + b along axis 0.

    Returns (A, B) with h_t = A_t * h_init + B_t.  Blelloch up/down sweep
    over the composition monoid (a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2);
    O(L) work, O(log L) depth.  Identity element is (1, 0).
    """
    n = a.shape[0]
    if n == 1:
        return a.copy(), b.copy()
    levels = max(1, int(math.ceil(math.log2(n))))
    m = 1 << levels
    ap = np.ones((m,) + a.shape[1:], dtype=a.dtype)
    bp = np.zeros((m,) + b.shape[1:], dtype=b.dtype)
    ap[:n] = a
    bp[:n] = b
    # up-sweep: partial composites at the right child of each subtree
    for lev in range(levels):
        s = 1 << lev
        left = ap[s - 1 :: 2 * s][: m // (2 * s)]
        lb = bp[s - 1 :: 2 * s][: m // (2 * s)]
        right = ap[2 * s - 1 :: 2 * s]
        rb = bp[2 * s - 1 :: 2 * s]
        rb[...] = right * lb + rb
        right[...] = right * left
    # down-sweep: convert to an exclusive scan
    ap[m - 1] = 1.0
    bp[m - 1] = 0.0
    for lev in range(levels - 1, -1, -1):
        s = 1 << lev
        left = ap[s - 1 :: 2 * s][: m // (2 * s)]
        lb = bp[s - 1 :: 2 * s][: m // (2 * s)]
        right = ap[2 * s - 1 :: 2 * s]
        rb = bp[2 * s - 1 :: 2 * s]
        tl = left.copy()
        tlb = lb.copy()
        left[...] = right
        lb[...] = rb
        rb[...] = rb * tl + tlb
        right[...] = right * tl
    # inclusive = element o exclusive
    inc_a = a * ap[:n]
    inc_b = a * bp[:n] + b
    return inc_a, inc_b


def _scan_forward_parallel(a, bx, h0):
    la, lb = a.shape[0], a.shape[1:]
    flat_a = a.reshape(la, -1)
    flat_b = bx.reshape(la, -1)
    nchan = flat_a.shape[1]
    out = np.empty_like(flat_b)
    threads = _SCAN_THREADS
    if threads > 1 and nchan >= 2:
        from concurrent.futures import ThreadPoolExecutor

        chunks = np.array_split(np.arange(nchan), min(threads, nchan))

        def run(cols):
            ca, cb = _affine_scan_inclusive(flat_a[:, cols], flat_b[:, cols])
            return cols, ca, cb

        with ThreadPoolExecutor(max_workers=threads) as ex:
            for cols, ca, cb in ex.map(run, chunks):
                out[:, cols] = ca * h0.reshape(-1)[cols] + cb
    else:
        ca, cb = _affine_scan_inclusive(flat_a, flat_b)
        out[...] = ca * h0.reshape(1, -1) + cb
    return out.reshape((la,) + lb)


def _scan_forward_sequential(a, bx, h0):
    h = np.empty_like(bx)
    prev = h0
    for t in range(a.shape[0]):
        prev = a[t] * prev + bx[t]
        h[t] = prev
    return h


def _scan_adjoint(a, g, parallel):
    """Solve lam_t = g_t + a_{t+1} * lam_{t+1} backwards in time."""
    n = a.shape[0]
    if parallel:
        a_shift = np.concatenate([np.ones_like(a[:1]), a[::-1][: n - 1]], axis=0)
        la, lb = _affine_scan_inclusive(a_shift, g[::-1])
        # h_init = 0 for the adjoint recurrence
        return lb[::-1].copy()
    lam = np.empty_like(g)
    nxt = np.zeros_like(g[0])
    for t in range(n - 1, -1, -1):
        nxt = g[t] + (a[t + 1] * nxt if t + 1 < n else 0.0)
        lam[t] = nxt
    return lam


def linear_recurrence(a, bx, h0=None, parallel=True):
    """h_t = a_t * h_{t-1} + bx_t with h_{-1} = h0 (zeros when omitted).

    a, bx: (L, ...) of identical shape; h0: the trailing shape or None.
    Forward runs either the work-efficient parallel scan or the literal
    left-to-right loop; both produce identical values up to float rounding
    and both are differentiable (the backward pass is itself a reversed
    linear recurrence).
    """
    a, bx = _as_tensor(a), _as_tensor(bx)
    if a.shape != bx.shape:
        raise ShapeError(f"recurrence coefficient shapes differ: a {a.shape} vs b {bx.shape}")
    if a.ndim < 1 or a.shape[0] < 1:
        raise PreconditionError("linear_recurrence needs at least one step")
    if h0 is None:
        h0_t = Tensor(np.zeros(a.shape[1:], dtype=a.dtype))
    else:
        h0_t = _as_tensor(h0)
        if h0_t.shape != a.shape[1:]:
            raise ShapeError(f"h0 shape {h0_t.shape} does not match state shape {a.shape[1:]}")
    ad, bd, h0d = a.data, bx.data, h0_t.data
    if parallel:
        h = _scan_forward_parallel(ad, bd, h0d)
    else:
        h = _scan_forward_sequential(ad, bd, h0d)

    def backward(g):
        lam = _scan_adjoint(ad, g, parallel)
        if bx.requires_grad:
            bx._accumulate(lam)
        if a.requires_grad:
            hprev = np.concatenate([h0d[None], h[:-1]], axis=0)
            a._accumulate(lam * hprev)
        if h0_t.requires_grad:
            h0_t._accumulate(ad[0] * lam[0])

    return _make(h, "linear_recurrence", (a, bx, h0_t), backward)


# -- gradient checking -----------------------------------------------------


def grad_check(f, point, eps=1e-5):
    """Compare analytic gradients of a scalar function against central
    differences at ``point``; returns the max relative error
    |analytic - fd| / max(1, |fd|) over coordinates.

    Requires float64 data and eps in [1e-6, 1e-4].
    """
    if not (1e-6 <= eps <= 1e-4):
        raise PreconditionError(f"eps {eps} outside [1e-6, 1e-4]")
    if point.dtype != np.float64:
        raise PreconditionError("grad_check needs float64 data")
    point.data = np.ascontiguousarray(point.data)
    point.requires_grad = True
    point.zero_grad()
    out = f(point)
    if out.size != 1:
        raise PreconditionError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = point.grad.copy()
    worst = 0.0
    flat = point.data.reshape(-1)
    an = analytic.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        fp = f(point).item()
        flat[i] = saved - eps
        fm = f(point).item()
        flat[i] = saved
        fd = (fp - fm) / (2.0 * eps)
        err = abs(an[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


def grad_check_all(f, points, eps=1e-5):
    """grad_check against several leaves; f is called with no arguments and
    must close over the given tensors.  Returns the worst relative error."""
    for p in points:
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.zero_grad()
    out = f()
    if out.size != 1:
        raise PreconditionError("grad_check_all needs a scalar-valued function")
    out.backward()
    grads = [None if p.grad is None else p.grad.copy() for p in points]
    worst = 0.0
    for p, g in zip(points, grads):
        an = (np.zeros_like(p.data) if g is None else g).reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            fp = f().item()
            flat[i] = saved - eps
            fm = f().item()
            flat[i] = saved
            fd = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(an[i] - fd) / max(1.0, abs(fd)))
    return worst


def reachable_ops(out):
    """Set of op names reachable from ``out`` through the recorded graph."""
    seen = set()
    ops = set()
    stack = [out]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        ops.add(node.op)
        stack.extend(node._parents)
    return ops


def reachable_tensors(out):
    """All tensors reachable from ``out`` (by identity)."""
    seen = {}
    stack = [out]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return list(seen.values())
