"""Selective state-space sequence core.

The continuous-time system h'(t) = A h(t) + B x(t), y = C h with diagonal A
is discretized per step with a zero-order hold: for step size delta,

    a_bar = exp(delta * a)
    b_bar = (delta * a)^-1 (exp(delta * a) - 1) * delta * b

and the resulting recurrence h_t = a_bar_t * h_{t-1} + b_bar_t * x_t,
y_t = c_t . h_t runs either as a literal left-to-right loop or as a
work-efficient parallel scan over affine maps; both views must agree to
float rounding, and in the time-invariant case they equal a causal
convolution with the materialized kernel (c b_bar, c a_bar b_bar,
c a_bar^2 b_bar, ...).

Selectivity makes b, c and delta functions of the input sequence: b and c
are linear maps of x, delta is softplus(bias + low-rank(x)), so each frame
gets its own discretization.  State matrices are kept diagonal and strictly
negative via a = -exp(a_log).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import PreconditionError, ShapeError
from .tensor import Tensor

# below this |delta * a| the closed-form input factor switches to its series
SERIES_SWITCH = 1e-6


@dataclass
class SelectiveSsmParams:
    """Learned tensors for one selective SSM over D channels, M states."""

    a_log: Tensor  # (D, M); a = -exp(a_log) keeps every mode strictly stable
    w_b: Tensor  # (D, M)
    w_c: Tensor  # (D, M)
    w_dt_down: Tensor  # (D, R) low-rank delta projection
    w_dt_up: Tensor  # (R, D)
    dt_bias: Tensor  # (D,)

    @property
    def channels(self):
        return self.a_log.shape[0]

    @property
    def state_dim(self):
        return self.a_log.shape[1]

    def named_tensors(self, prefix=""):
        for name in ("a_log", "w_b", "w_c", "w_dt_down", "w_dt_up", "dt_bias"):
            yield prefix + name, getattr(self, name)

    def tensors(self):
        return [t for _, t in self.named_tensors()]


def init_selective_ssm(channels, state_dim, rng, dt_rank=None, dtype=None):
    """Initialize selective SSM parameters.

    a_log starts at log(1 + m) for state index m, so the modes cover decay
    rates -1 .. -M; the delta bias is drawn so softplus(bias) lands
    log-uniformly in [1e-3, 1e-1].
    """
    if dt_rank is None:
        dt_rank = max(1, math.ceil(channels / 16))
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=channels))
    scale = channels**-0.5
    mk = lambda a: T.tensor(a, requires_grad=True, dtype=dtype)
    return SelectiveSsmParams(
        a_log=mk(np.tile(np.log(1.0 + np.arange(state_dim)), (channels, 1))),
        w_b=mk(rng.standard_normal((channels, state_dim)) * scale),
        w_c=mk(rng.standard_normal((channels, state_dim)) * scale),
        w_dt_down=mk(rng.standard_normal((channels, dt_rank)) * scale),
        w_dt_up=mk(rng.standard_normal((dt_rank, channels)) * dt_rank**-0.5),
        dt_bias=mk(np.log(np.expm1(dt))),
    )


def selective_project(x, params):
    """Input-dependent SSM coefficients for a sequence x of shape (L, D).

    Returns (b, c, delta): b, c are (L, M) linear readouts of x, delta is
    (L, D) and strictly positive through the softplus.
    """
    b = T.matmul(x, params.w_b)
    c = T.matmul(x, params.w_c)
    delta = T.softplus(T.add(T.matmul(T.matmul(x, params.w_dt_down), params.w_dt_up), params.dt_bias))
    return b, c, delta


def discretize_zoh(a_diag, b, delta):
    """Zero-order-hold discretization of a diagonal system, per frame.

    a_diag: (D, M), b: (L, M), delta: (L, D), all positive-delta; returns
    (a_bar, b_bar) of shape (L, D, M) with a_bar = exp(delta a) and
    b_bar = phi(delta a) * delta * b where phi(z) = (e^z - 1)/z.  phi
    switches to its series 1 + z/2 + z^2/6 below |z| = 1e-6 so the value
    stays continuous through z = 0.
    """
    a_diag, b, delta = T._as_tensor(a_diag), T._as_tensor(b), T._as_tensor(delta)
    if a_diag.ndim != 2 or b.ndim != 2 or delta.ndim != 2:
        raise ShapeError(
            f"discretize_zoh expects a (D, M), b (L, M), delta (L, D); got {a_diag.shape}, {b.shape}, {delta.shape}"
        )
    ld, d = delta.shape
    if b.shape[0] != ld or a_diag.shape[0] != d or b.shape[1] != a_diag.shape[1]:
        raise ShapeError(
            f"discretize_zoh inconsistent shapes: a {a_diag.shape}, b {b.shape}, delta {delta.shape}"
        )
    if np.any(delta.data <= 0):
        raise PreconditionError("discretize_zoh requires delta > 0 everywhere")
    m = a_diag.shape[1]
    z = T.mul(T.reshape(delta, (ld, d, 1)), T.reshape(a_diag, (1, d, m)))
    a_bar = T.exp(z)
    phi = _phi(z)
    b_bar = T.mul(T.mul(phi, T.reshape(delta, (ld, d, 1))), T.reshape(b, (ld, 1, m)))
    return a_bar, b_bar


def _phi(z):
    """(e^z - 1)/z with a series fallback near zero."""
    near = np.abs(z.data) < SERIES_SWITCH
    z_safe = T.where(near, T.tensor(np.ones_like(z.data)), z)
    exact = T.div(T.expm1(z_safe), z_safe)
    series = T.add(T.add(1.0, T.mul(z, 0.5)), T.mul(T.mul(z, z), 1.0 / 6.0))
    return T.where(near, series, exact)


def phi_exact(z):
    """Closed-form (e^z - 1)/z, no series switch. Test hook."""
    return np.expm1(z) / z


def phi_series(z):
    """Three-term series for (e^z - 1)/z. Test hook."""
    return 1.0 + z / 2.0 + z * z / 6.0


@dataclass
class DiscretizedSeq:
    """Per-frame discretized coefficients ready for scanning.

    a_bar: (L, D, M); b_bar_x: (L, D, M) with the input already multiplied
    in (b_bar * x, or delta * b * x in the simplified input mode);
    c: (L, M) readout weights.
    """

    a_bar: Tensor
    b_bar_x: Tensor
    c: Tensor

    def __post_init__(self):
        if self.a_bar.shape != self.b_bar_x.shape:
            raise ShapeError(f"a_bar {self.a_bar.shape} vs b_bar_x {self.b_bar_x.shape}")
        if self.a_bar.ndim != 3 or self.c.ndim != 2:
            raise ShapeError(
                f"DiscretizedSeq wants a_bar (L, D, M) and c (L, M); got {self.a_bar.shape}, {self.c.shape}"
            )
        if self.c.shape[0] != self.a_bar.shape[0] or self.c.shape[1] != self.a_bar.shape[2]:
            raise ShapeError(f"c shape {self.c.shape} does not match a_bar {self.a_bar.shape}")


# input handling for the discretized recurrence: exact zero-order hold, or
# the fused simplification b_bar_x = delta * b * x
INPUT_MODES = ("zoh", "euler")


def discretize_selective(x, params, mode="zoh"):
    """Project x to per-frame coefficients and discretize; returns DiscretizedSeq."""
    if mode not in INPUT_MODES:
        raise PreconditionError(f"unknown input mode {mode!r}; expected one of {INPUT_MODES}")
    x = T._as_tensor(x)
    ld, d = x.shape
    m = params.state_dim
    b, c, delta = selective_project(x, params)
    a_diag = T.neg(T.exp(params.a_log))
    if mode == "zoh":
        a_bar, b_bar = discretize_zoh(a_diag, b, delta)
        bbx = T.mul(b_bar, T.reshape(x, (ld, d, 1)))
    else:
        z = T.mul(T.reshape(delta, (ld, d, 1)), T.reshape(a_diag, (1, d, m)))
        a_bar = T.exp(z)
        bbx = T.mul(
            T.mul(T.reshape(delta, (ld, d, 1)), T.reshape(b, (ld, 1, m))),
            T.reshape(x, (ld, d, 1)),
        )
    return DiscretizedSeq(a_bar=a_bar, b_bar_x=bbx, c=c)


def _readout(h, c):
    ld, d, m = h.shape
    return T.reduce_sum(T.mul(h, T.reshape(c, (ld, 1, m))), axis=2)


def scan_sequential(disc, h0=None):
    """Literal left-to-right recurrence; returns y of shape (L, D)."""
    h = T.linear_recurrence(disc.a_bar, disc.b_bar_x, h0=h0, parallel=False)
    return _readout(h, disc.c)


def scan_parallel(disc, h0=None):
    """Work-efficient associative scan; same contract as scan_sequential."""
    h = T.linear_recurrence(disc.a_bar, disc.b_bar_x, h0=h0, parallel=True)
    return _readout(h, disc.c)


def materialize_kernel(a_bar, b_bar, c, length):
    """Kernel of a time-invariant system: K[l, d] = sum_m c_m a_bar^l b_bar.

    a_bar, b_bar: (D, M) scalars per channel/state, c: (M,) or (D, M);
    anything carrying a time axis is rejected, the kernel view only exists
    for frame-constant coefficients.  Returns a float ndarray (length, D).
    """
    a_bar = np.asarray(a_bar.data if isinstance(a_bar, Tensor) else a_bar, dtype=np.float64)
    b_bar = np.asarray(b_bar.data if isinstance(b_bar, Tensor) else b_bar, dtype=np.float64)
    c = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
    if a_bar.ndim != 2 or b_bar.ndim != 2 or c.ndim not in (1, 2):
        raise PreconditionError(
            "materialize_kernel needs time-invariant coefficients: "
            f"a_bar/b_bar (D, M) and c (M,) or (D, M); got {a_bar.shape}, {b_bar.shape}, {c.shape}"
        )
    if a_bar.shape != b_bar.shape:
        raise ShapeError(f"a_bar {a_bar.shape} vs b_bar {b_bar.shape}")
    d, m = a_bar.shape
    if c.shape not in ((m,), (d, m)):
        raise ShapeError(f"c shape {c.shape} incompatible with state shape {(d, m)}")
    if length < 1:
        raise PreconditionError(f"kernel length must be >= 1, got {length}")
    cb = (c if c.ndim == 2 else c[None, :]) * b_bar  # (D, M)
    kern = np.empty((length, d))
    power = np.ones_like(a_bar)
    for l in range(length):
        kern[l] = (cb * power).sum(axis=1)
        power = power * a_bar
    return kern


def kernel_convolve(x, kernel):
    """Causal per-channel convolution of x (L, D) with kernel (L_k, D)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim != 2 or kernel.ndim != 2 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"kernel_convolve shapes: x {x.shape}, kernel {kernel.shape}")
    n = x.shape[0]
    out = np.empty_like(x, dtype=np.float64)
    for ch in range(x.shape[1]):
        out[:, ch] = np.convolve(x[:, ch], kernel[:, ch])[:n]
    return out
