"""Time-parameterized convolution over irregularly sampled series.

For every position ``j`` the layer builds a ``m x (2z+1)`` kernel from the
time offsets ``t[j+o] - t[j]`` of the neighbouring observations and contracts
it with the observed values of that patch. Missing entries, padding slots and
(in interpolation mode) the whole centre column are excluded from both the
sum and the mean divisor.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .timefuncs import KernelParams, TimeFunctionId, g_forward, g_partials, init_kernel, kernel_value

_CHUNK_ELEMS = 4_000_000
_forward_counter = itertools.count(1)


class Aggregation(str, enum.Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass
class IrregularBatch:
    """Padded batch of irregular series.

    values, observed: ``B x m x L``; times: ``B x L``; valid_len: ``B`` lengths.
    Missing entries must be stored as zero.
    """

    values: np.ndarray
    observed: np.ndarray
    times: np.ndarray
    valid_len: np.ndarray
    ids: list = field(default_factory=list)
    labels: np.ndarray | None = None
    step_labels: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.valid_len = np.asarray(self.valid_len, dtype=np.int64)
        if self.values.ndim != 3 or self.values.shape != self.observed.shape:
            raise ShapeError(f"values {self.values.shape} and observed {self.observed.shape} must be equal B x m x L")
        B, _, L = self.values.shape
        if self.times.shape != (B, L):
            raise ShapeError(f"times shape {self.times.shape} != {(B, L)}")
        if self.valid_len.shape != (B,) or np.any(self.valid_len > L) or np.any(self.valid_len < 0):
            raise ShapeError("valid_len must hold B lengths within [0, L]")

    @property
    def shape(self):
        return self.values.shape

    def subset(self, idx) -> "IrregularBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return IrregularBatch(
            values=self.values[idx],
            observed=self.observed[idx],
            times=self.times[idx],
            valid_len=self.valid_len[idx],
            ids=[self.ids[i] for i in idx] if self.ids else [],
            labels=None if self.labels is None else self.labels[idx],
            step_labels=None if self.step_labels is None else self.step_labels[idx],
        )


@dataclass
class TpcConfig:
    m: int
    z: int
    kernels: list
    aggregation: Aggregation = Aggregation.MEAN
    mask_center: bool = False

    def __post_init__(self):
        self.aggregation = Aggregation(self.aggregation)
        if self.z < 0:
            raise ConfigError("kernel half-width z must be >= 0")
        if not self.kernels:
            raise ConfigError("a TPC layer needs at least one kernel")
        for k in self.kernels:
            if k.m != self.m:
                raise ConfigError(f"kernel has {k.m} channels, layer expects {self.m}")

    @property
    def p(self) -> int:
        return len(self.kernels)

    @property
    def size(self) -> int:
        return 2 * self.z + 1


def make_tpc_config(rng, m: int, z: int, p: int, functions: Sequence = ("sin",),
                    sigma="sigmoid", aggregation="mean", mask_center=False) -> TpcConfig:
    """Freshly initialised layer; kernel ``q`` uses ``functions[q % len(functions)]``."""
    if p < 1:
        raise ConfigError("p must be >= 1")
    functions = [TimeFunctionId.parse(f) for f in functions]
    kernels = [init_kernel(rng, m, z, functions[q % len(functions)], sigma) for q in range(p)]
    return TpcConfig(m=m, z=z, kernels=kernels, aggregation=aggregation, mask_center=mask_center)


def count_params(cfg: TpcConfig) -> int:
    return 4 * cfg.m * cfg.p


def materialize_kernel(k: KernelParams, times, j: int, z: int) -> np.ndarray:
    """Kernel matrix ``m x (2z+1)`` centred at position ``j``; out-of-range columns are zero."""
    times = np.asarray(times, dtype=np.float64)
    L = times.shape[0]
    if not 0 <= j < L:
        raise ShapeError(f"centre index {j} outside [0, {L})")
    out = np.zeros((k.m, 2 * z + 1))
    for c in range(2 * z + 1):
        pos = j + c - z
        if 0 <= pos < L:
            dt = 0.0 if pos == j else times[pos] - times[j]
            out[:, c] = kernel_value(k, dt)
    return out


@dataclass
class TpcCache:
    cfg: TpcConfig
    generation: int
    theta_snapshot: list
    dt: np.ndarray  # B x L x K
    vw: np.ndarray  # B x m x L x K, observed values (zeros where excluded)
    scale: np.ndarray  # B x L, 1 or 1/nu (0 for empty patches in mean mode)
    nu: np.ndarray  # B x L


def _stacked(cfg: TpcConfig, idx):
    return [np.stack([cfg.kernels[q].thetas()[i] for q in idx]) for i in range(4)]


def _groups(cfg: TpcConfig):
    groups: dict = {}
    for q, k in enumerate(cfg.kernels):
        groups.setdefault((k.h, k.sigma), []).append(q)
    return groups


def _chunks(B: int, per_sample: int):
    step = max(1, _CHUNK_ELEMS // max(per_sample, 1))
    for start in range(0, B, step):
        yield slice(start, min(B, start + step))


def _patches(batch: IrregularBatch, z: int, mask_center: bool):
    B, m, L = batch.values.shape
    offsets = np.arange(-z, z + 1)
    pos = np.arange(L)[:, None] + offsets[None, :]  # L x K
    in_range = (pos >= 0) & (pos < L)
    pos_c = np.clip(pos, 0, L - 1)
    lens = batch.valid_len[:, None, None]
    usable = in_range[None] & (pos_c[None] < lens) & (np.arange(L)[None, :, None] < lens)  # B x L x K
    if mask_center:
        usable[:, :, z] = False
    t = batch.times
    dt = t[:, pos_c] - t[:, :, None]
    dt = np.where(usable, dt, 0.0)
    dt[:, :, z] = 0.0
    weight = batch.observed[:, :, pos_c] * usable[:, None, :, :]  # B x m x L x K
    vw = batch.values[:, :, pos_c] * weight
    nu = weight.sum(axis=(1, 3))
    return dt, vw, nu


def tpc_forward(batch: IrregularBatch, cfg: TpcConfig):
    """Layer output ``B x L x p`` and the cache needed by :func:`tpc_backward`."""
    B, m, L = batch.values.shape
    if m != cfg.m:
        raise ShapeError(f"batch has {m} channels, layer expects {cfg.m}")
    z, K = cfg.z, cfg.size
    dt, vw, nu = _patches(batch, z, cfg.mask_center)
    if cfg.aggregation is Aggregation.MEAN:
        scale = np.divide(1.0, nu, out=np.zeros_like(nu), where=nu > 0)
    else:
        scale = np.ones_like(nu)
    out = np.zeros((B, L, cfg.p))
    for (h, sigma), idx in _groups(cfg).items():
        t1, t2, t3, t4 = _stacked(cfg, idx)  # each P x m
        for sl in _chunks(B, L * K * len(idx) * m):
            d = dt[sl][..., None, None]  # b x L x K x 1 x 1
            g, *_ = g_forward(t1, t2, t3, t4, h, sigma, d)  # b x L x K x P x m
            out[sl][:, :, idx] = np.einsum("bjkql,bljk->bjq", g, vw[sl], optimize=True)
    if cfg.aggregation is Aggregation.MEAN:
        # divide rather than multiply by 1/nu so mean is bit-identical to sum / nu
        den = nu[:, :, None]
        out = np.divide(out, den, out=np.zeros_like(out), where=den > 0)
    cache = TpcCache(
        cfg=cfg,
        generation=next(_forward_counter),
        theta_snapshot=[t.copy() for k in cfg.kernels for t in k.thetas()],
        dt=dt,
        vw=vw,
        scale=scale,
        nu=nu,
    )
    cfg._last_generation = cache.generation
    return out, cache


def tpc_backward(cache: TpcCache, grad_out) -> list:
    """Per-kernel ``(d_theta1, d_theta2, d_theta3, d_theta4)`` gradients."""
    cfg = cache.cfg
    if getattr(cfg, "_last_generation", None) != cache.generation:
        raise UsageError("stale TPC cache: another forward pass ran on this layer since")
    current = [t for k in cfg.kernels for t in k.thetas()]
    if len(current) != len(cache.theta_snapshot) or any(
        a.shape != b.shape or not np.array_equal(a, b) for a, b in zip(current, cache.theta_snapshot)
    ):
        raise UsageError("stale TPC cache: kernel parameters changed after forward")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    B, m, L, K = cache.vw.shape
    if grad_out.shape != (B, L, cfg.p):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(B, L, cfg.p)}")
    gs = grad_out * cache.scale[:, :, None]
    grads = [None] * cfg.p
    for (h, sigma), idx in _groups(cfg).items():
        t1, t2, t3, t4 = _stacked(cfg, idx)
        acc = [np.zeros_like(t1) for _ in range(4)]
        for sl in _chunks(B, L * K * len(idx) * m):
            d = cache.dt[sl][..., None, None]
            _, u, hv, s = g_forward(t1, t2, t3, t4, h, sigma, d)
            partials = g_partials(t1, t2, h, sigma, d, u, hv, s)
            # upstream for each kernel element: sum over nothing, b x L x K x P x m
            up = np.einsum("bjq,bljk->bjkql", gs[sl][:, :, idx], cache.vw[sl], optimize=True)
            for i, part in enumerate(partials):
                acc[i] += np.einsum("bjkql,bjkql->ql", up, np.broadcast_to(part, up.shape), optimize=True)
        for r, q in enumerate(idx):
            grads[q] = tuple(a[r].copy() for a in acc)
    return grads
