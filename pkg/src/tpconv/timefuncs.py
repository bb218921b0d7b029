"""Basis time functions, kernel activations and the kernel-value function.

Every TPC kernel element is ``theta1 * (act(h(theta3 * dt + theta4)) + theta2)``
computed per channel; this module owns ``h``, ``act`` and their derivatives.
All functions accept scalars or arrays.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericsError

EXP_CLAMP = 20.0
TAN_POLE_TOL = 1e-6


class TimeFunctionId(str, enum.Enum):
    LIN = "lin"
    SIN = "sin"
    COS = "cos"
    TAN = "tan"
    EXP = "exp"
    SQ = "sq"
    CUBE = "cube"
    SINH = "sinh"
    COSH = "cosh"
    TANH = "tanh"

    @classmethod
    def parse(cls, name) -> "TimeFunctionId":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown time function {name!r} (expected one of {valid})") from None


class ActivationId(str, enum.Enum):
    SIGMOID = "sigmoid"
    RELU = "relu"
    IDENTITY = "identity"
    TANH = "tanh"

    @classmethod
    def parse(cls, name) -> "ActivationId":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown activation {name!r} (expected one of {valid})") from None


ALL_FUNCTIONS = tuple(TimeFunctionId)
_CLAMPED = (TimeFunctionId.EXP, TimeFunctionId.SINH, TimeFunctionId.COSH)


def _check_tan(x):
    # distance to the nearest pole pi/2 + k*pi
    k = np.round((x - math.pi / 2) / math.pi)
    dist = np.abs(x - (math.pi / 2 + k * math.pi))
    if np.any(dist < TAN_POLE_TOL):
        raise NumericsError("tan evaluated within 1e-6 of a pole")


def eval_h(fid, x):
    fid = TimeFunctionId.parse(fid)
    x = np.asarray(x, dtype=np.float64)
    if fid is TimeFunctionId.LIN:
        out = x.copy()
    elif fid is TimeFunctionId.SIN:
        out = np.sin(x)
    elif fid is TimeFunctionId.COS:
        out = np.cos(x)
    elif fid is TimeFunctionId.TAN:
        _check_tan(x)
        out = np.tan(x)
    elif fid is TimeFunctionId.SQ:
        out = x * x
    elif fid is TimeFunctionId.CUBE:
        out = x * x * x
    elif fid is TimeFunctionId.TANH:
        out = np.tanh(x)
    else:
        xc = np.clip(x, -EXP_CLAMP, EXP_CLAMP)
        if fid is TimeFunctionId.EXP:
            out = np.exp(xc)
        elif fid is TimeFunctionId.SINH:
            out = np.sinh(xc)
        else:
            out = np.cosh(xc)
    return out[()] if out.ndim == 0 else out


def eval_h_deriv(fid, x):
    fid = TimeFunctionId.parse(fid)
    x = np.asarray(x, dtype=np.float64)
    if fid is TimeFunctionId.LIN:
        out = np.ones_like(x)
    elif fid is TimeFunctionId.SIN:
        out = np.cos(x)
    elif fid is TimeFunctionId.COS:
        out = -np.sin(x)
    elif fid is TimeFunctionId.TAN:
        _check_tan(x)
        c = np.cos(x)
        out = 1.0 / (c * c)
    elif fid is TimeFunctionId.SQ:
        out = 2.0 * x
    elif fid is TimeFunctionId.CUBE:
        out = 3.0 * x * x
    elif fid is TimeFunctionId.TANH:
        t = np.tanh(x)
        out = 1.0 - t * t
    else:
        inside = np.abs(x) <= EXP_CLAMP
        xc = np.clip(x, -EXP_CLAMP, EXP_CLAMP)
        if fid is TimeFunctionId.EXP:
            d = np.exp(xc)
        elif fid is TimeFunctionId.SINH:
            d = np.cosh(xc)
        else:
            d = np.sinh(xc)
        out = np.where(inside, d, 0.0)
    return out[()] if out.ndim == 0 else out


def activate(aid, x):
    aid = ActivationId.parse(aid)
    x = np.asarray(x, dtype=np.float64)
    if aid is ActivationId.SIGMOID:
        # split by sign to avoid overflow in exp
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
    elif aid is ActivationId.RELU:
        out = np.maximum(x, 0.0)
    elif aid is ActivationId.TANH:
        out = np.tanh(x)
    else:
        out = x.copy()
    return out[()] if out.ndim == 0 else out


def activate_deriv(aid, x):
    """Derivative of the activation at pre-activation ``x`` (ReLU uses 0 at the kink)."""
    aid = ActivationId.parse(aid)
    x = np.asarray(x, dtype=np.float64)
    if aid is ActivationId.SIGMOID:
        s = np.asarray(activate(aid, x))
        out = s * (1.0 - s)
    elif aid is ActivationId.RELU:
        out = (x > 0).astype(np.float64)
    elif aid is ActivationId.TANH:
        t = np.tanh(x)
        out = 1.0 - t * t
    else:
        out = np.ones_like(x)
    return out[()] if out.ndim == 0 else out


@dataclass
class KernelParams:
    """Trainable vectors of one TPC kernel plus its fixed function choices."""

    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray
    theta4: np.ndarray
    h: TimeFunctionId = TimeFunctionId.SIN
    sigma: ActivationId = ActivationId.SIGMOID

    def __post_init__(self):
        self.h = TimeFunctionId.parse(self.h)
        self.sigma = ActivationId.parse(self.sigma)
        thetas = [np.atleast_1d(np.asarray(t, dtype=np.float64)) for t in self.thetas()]
        if len({t.shape for t in thetas}) != 1 or thetas[0].ndim != 1:
            raise ConfigError("theta1..theta4 must be 1-D vectors of equal length")
        self.theta1, self.theta2, self.theta3, self.theta4 = thetas

    @property
    def m(self) -> int:
        return self.theta1.shape[0]

    def thetas(self):
        return (self.theta1, self.theta2, self.theta3, self.theta4)

    def parameters(self) -> np.ndarray:
        """All trainable values, flattened (always 4m of them)."""
        return np.concatenate(self.thetas())


def init_kernel(rng, m: int, z: int, h="sin", sigma="sigmoid", theta3_range=(0.5, 1.5)) -> KernelParams:
    """Fan-in scaled ``theta1``, zero ``theta2``, ``theta3`` uniform on ``theta3_range``, small ``theta4``."""
    bound = 1.0 / math.sqrt(m * (2 * z + 1))
    return KernelParams(
        theta1=rng.uniform(-bound, bound, (m,)),
        theta2=np.zeros(m),
        theta3=rng.uniform(theta3_range[0], theta3_range[1], (m,)),
        theta4=rng.uniform(-0.1, 0.1, (m,)),
        h=h,
        sigma=sigma,
    )


def g_forward(t1, t2, t3, t4, h, sigma, dt):
    """Kernel values with broadcasting between theta vectors and ``dt``.

    Returns ``(g, u, hv, s)`` so the caller can reuse intermediates in backward.
    """
    u = t3 * dt + t4
    hv = eval_h(h, u)
    s = activate(sigma, hv)
    return t1 * (s + t2), u, hv, s


def g_partials(t1, t2, h, sigma, dt, u, hv, s):
    """Partials of g w.r.t. theta1..theta4 at saved intermediates."""
    d1 = s + t2
    d2 = np.broadcast_to(t1, np.shape(u))
    du = t1 * activate_deriv(sigma, hv) * eval_h_deriv(h, u)
    return d1, d2, du * dt, du


def kernel_value(p: KernelParams, dt: float) -> np.ndarray:
    if not math.isfinite(dt):
        raise NumericsError("time difference must be finite")
    g, *_ = g_forward(*p.thetas(), p.h, p.sigma, float(dt))
    return np.asarray(g, dtype=np.float64)


def kernel_value_grads(p: KernelParams, dt: float, upstream) -> tuple[np.ndarray, ...]:
    """Gradients of ``upstream . kernel_value(p, dt)`` w.r.t. the four theta vectors."""
    upstream = np.asarray(upstream, dtype=np.float64)
    t1, t2, t3, t4 = p.thetas()
    _, u, hv, s = g_forward(t1, t2, t3, t4, p.h, p.sigma, float(dt))
    d1, d2, d3, d4 = g_partials(t1, t2, p.h, p.sigma, float(dt), u, hv, s)
    return tuple(np.asarray(upstream * d, dtype=np.float64) for d in (d1, d2, d3, d4))
