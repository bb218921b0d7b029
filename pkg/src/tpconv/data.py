"""Irregular-series records, synthetic generators, splitting, batching and NDJSON I/O."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .numerics import Rng
from .tpc import IrregularBatch


@dataclass
class SeriesRecord:
    id: str
    times: np.ndarray  # L
    values: np.ndarray  # m x L
    observed: np.ndarray  # m x L, 0/1
    label: int | None = None
    step_labels: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.observed = np.atleast_2d(np.asarray(self.observed, dtype=np.float64))
        if self.step_labels is not None:
            self.step_labels = np.asarray(self.step_labels, dtype=np.int64).reshape(-1)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.times.shape[0]

    def validate(self) -> "SeriesRecord":
        rid = self.id
        L = self.length
        if self.values.shape != self.observed.shape or self.values.shape[1] != L:
            raise ValidationError(
                f"inconsistent shapes: times {L}, values {self.values.shape}, observed {self.observed.shape}", rid)
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.values))):
            raise ValidationError("non-finite times or values", rid)
        if np.any(np.diff(self.times) < 0):
            raise ValidationError("times not sorted", rid)
        if not np.all((self.observed == 0) | (self.observed == 1)):
            raise ValidationError("observed must contain only 0/1", rid)
        if np.any((self.observed == 0) & (self.values != 0)):
            raise ValidationError("missing entries must be stored as 0.0", rid)
        if self.step_labels is not None and self.step_labels.shape[0] != L:
            raise ValidationError("step_labels length differs from times", rid)
        return self


@dataclass
class SyntheticConfig:
    n_samples: int = 1000
    grid_len: int = 100
    t_range: list = field(default_factory=lambda: [0.0, 1.0])
    n_ref: int = 10
    rbf_bandwidth: float = 100.0
    n_observed: int = 20
    split: list = field(default_factory=lambda: [0.8, 0.2])
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples: must be >= 1")
        if not 1 <= self.n_observed <= self.grid_len:
            raise ConfigError("n_observed: must lie in [1, grid_len]")
        if self.rbf_bandwidth <= 0:
            raise ConfigError("rbf_bandwidth: must be > 0")
        if self.n_ref < 1:
            raise ConfigError("n_ref: must be >= 1")
        if len(self.t_range) != 2 or not self.t_range[0] < self.t_range[1]:
            raise ConfigError("t_range: must be [lo, hi] with lo < hi")
        if any(f < 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split: fractions must be non-negative and sum to 1")


def rbf_weights(t, ref_times, bandwidth: float) -> np.ndarray:
    """Normalised RBF weights ``len(t) x len(ref_times)``; every row sums to one."""
    t = np.asarray(t, dtype=np.float64)[:, None]
    logits = -bandwidth * (t - np.asarray(ref_times)[None, :]) ** 2
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def _synthetic_samples(cfg: SyntheticConfig, rng: Rng):
    lo, hi = cfg.t_range
    grid = np.linspace(lo, hi, cfg.grid_len)
    ref = np.linspace(lo, hi, cfg.n_ref)
    weights = rbf_weights(grid, ref, cfg.rbf_bandwidth)
    width = len(str(cfg.n_samples - 1))
    for i in range(cfg.n_samples):
        curve = weights @ rng.normal(0.0, 1.0, (cfg.n_ref,))
        idx = np.sort(rng.choice(cfg.grid_len, cfg.n_observed))
        rec = SeriesRecord(
            id=f"syn-{i:0{width}d}",
            times=grid[idx],
            values=curve[idx][None, :],
            observed=np.ones((1, cfg.n_observed)),
        )
        yield rec, grid, curve


def generate_synthetic(cfg: SyntheticConfig, rng: Rng) -> list:
    """RBF-smoothed random curves on a regular grid, each subsampled at random grid points."""
    return [rec for rec, _, _ in _synthetic_samples(cfg, rng)]


def synthetic_curves(cfg: SyntheticConfig, rng: Rng) -> dict:
    """Ground-truth ``(grid, curve)`` per record id for the same draw as :func:`generate_synthetic`."""
    return {rec.id: (grid, curve) for rec, grid, curve in _synthetic_samples(cfg, rng)}


def generate_synthetic_classification(n: int, rng: Rng, freqs=(2.0, 3.0), grid_len: int = 100,
                                      n_observed: int = 20, noise: float = 0.1) -> list:
    """Balanced two-class set of noisy sinusoids, told apart only by frequency."""
    if n < 2:
        raise ConfigError("n: need at least two samples")
    grid = np.linspace(0.0, 1.0, grid_len)
    labels = np.array([0] * (n // 2) + [1] * (n - n // 2))[rng.permutation(n)]
    width = len(str(n - 1))
    records = []
    for i, y in enumerate(labels):
        phase = float(rng.uniform(0.0, 2.0 * math.pi))
        idx = np.sort(rng.choice(grid_len, n_observed))
        t = grid[idx]
        x = np.sin(2.0 * math.pi * freqs[int(y)] * t + phase)
        if noise > 0:
            x = x + rng.normal(0.0, noise, (n_observed,))
        records.append(SeriesRecord(f"cls-{i:0{width}d}", t, x[None, :], np.ones((1, n_observed)), label=int(y)))
    return records


def generate_synthetic_step_classification(n: int, rng: Rng, freq: float = 2.0, grid_len: int = 100,
                                           n_observed: int = 20, noise: float = 0.05) -> list:
    """Noisy sinusoids where each step is labelled 1 while the clean signal is rising."""
    grid = np.linspace(0.0, 1.0, grid_len)
    width = len(str(n - 1))
    records = []
    for i in range(n):
        phase = float(rng.uniform(0.0, 2.0 * math.pi))
        idx = np.sort(rng.choice(grid_len, n_observed))
        t = grid[idx]
        arg = 2.0 * math.pi * freq * t + phase
        x = np.sin(arg)
        if noise > 0:
            x = x + rng.normal(0.0, noise, (n_observed,))
        steps = (np.cos(arg) > 0).astype(np.int64)
        records.append(SeriesRecord(f"step-{i:0{width}d}", t, x[None, :], np.ones((1, n_observed)),
                                    step_labels=steps))
    return records


@dataclass
class TimeMap:
    lo: float
    hi: float

    def apply(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.hi == self.lo:
            return np.zeros_like(t)
        return (t - self.lo) / (self.hi - self.lo)

    def invert(self, u):
        return self.lo + np.asarray(u, dtype=np.float64) * (self.hi - self.lo)


def normalize_times(records, time_map: TimeMap | None = None):
    """Map every record's times into [0, 1] with one dataset-wide affine map.

    Returns ``(new_records, time_map)``.
    """
    if time_map is None:
        nonempty = [r.times for r in records if r.length]
        if not nonempty:
            time_map = TimeMap(0.0, 0.0)
        else:
            time_map = TimeMap(float(min(t.min() for t in nonempty)), float(max(t.max() for t in nonempty)))
    out = [
        SeriesRecord(r.id, time_map.apply(r.times), r.values, r.observed, r.label, r.step_labels)
        for r in records
    ]
    return out, time_map


def split(records, fractions, rng: Rng):
    """Shuffled three-way split; sizes are rounded except the last, which takes the rest."""
    if len(fractions) != 3:
        raise ConfigError("fractions: expected three values (train, val, test)")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("fractions: must be non-negative and sum to 1")
    n = len(records)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError(f"fractions: split of {n} records leaves an empty partition")
    order = rng.permutation(n)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple([records[i] for i in part] for part in parts)


def records_to_batch(records) -> IrregularBatch:
    if not records:
        raise ConfigError("cannot build a batch from zero records")
    m = records[0].m
    L = max(r.length for r in records)
    B = len(records)
    values = np.zeros((B, m, L))
    observed = np.zeros((B, m, L))
    times = np.zeros((B, L))
    valid = np.zeros(B, dtype=np.int64)
    have_labels = all(r.label is not None for r in records)
    have_steps = all(r.step_labels is not None for r in records)
    steps = np.full((B, L), -1, dtype=np.int64) if have_steps else None
    for b, r in enumerate(records):
        if r.m != m:
            raise ValidationError(f"has {r.m} channels, expected {m}", r.id)
        n = r.length
        values[b, :, :n] = r.values
        observed[b, :, :n] = r.observed
        times[b, :n] = r.times
        times[b, n:] = r.times[-1] if n else 0.0
        valid[b] = n
        if have_steps:
            steps[b, :n] = r.step_labels
    labels = np.array([r.label for r in records], dtype=np.int64) if have_labels else None
    return IrregularBatch(values, observed, times, valid, ids=[r.id for r in records],
                          labels=labels, step_labels=steps)


def batchify(records, batch_size: int) -> list:
    if batch_size < 1:
        raise ConfigError("batch_size: must be >= 1")
    return [records_to_batch(records[i:i + batch_size]) for i in range(0, len(records), batch_size)]


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _fmt_list(xs) -> str:
    return "[" + ",".join(_fmt(x) for x in xs) + "]"


def record_to_line(r: SeriesRecord) -> str:
    parts = [
        f'"id":{json.dumps(r.id)}',
        f'"times":{_fmt_list(r.times)}',
        '"values":[' + ",".join(_fmt_list(row) for row in r.values) + "]",
        '"observed":[' + ",".join("[" + ",".join(str(int(v)) for v in row) + "]" for row in r.observed) + "]",
    ]
    if r.label is not None:
        parts.append(f'"label":{int(r.label)}')
    if r.step_labels is not None:
        parts.append('"step_labels":[' + ",".join(str(int(v)) for v in r.step_labels) + "]")
    return "{" + ",".join(parts) + "}"


def write_ndjson(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(record_to_line(r) + "\n")


_REQUIRED = ("id", "times", "values", "observed")


def parse_record(obj, lineno=None) -> SeriesRecord:
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", lineno)
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise ParseError(f"missing key(s) {missing}", lineno)
    try:
        rec = SeriesRecord(
            id=str(obj["id"]),
            times=obj["times"],
            values=obj["values"],
            observed=obj["observed"],
            label=None if obj.get("label") is None else int(obj["label"]),
            step_labels=obj.get("step_labels"),
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"malformed field: {exc}", lineno) from None
    if rec.values.ndim != 2 or rec.observed.ndim != 2:
        raise ParseError("values and observed must be lists of channel arrays", lineno)
    return rec.validate()


def read_ndjson(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            records.append(parse_record(obj, lineno))
    return records


def metadata_path(data_path) -> Path:
    p = Path(data_path)
    return p.with_name(p.name + ".meta.json")


def write_metadata(data_path, meta: dict) -> None:
    metadata_path(data_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_metadata(data_path) -> dict:
    p = metadata_path(data_path)
    if not p.exists():
        return {}
    return json.loads(p.read_text(encoding="utf-8"))


def synthetic_config_dict(cfg: SyntheticConfig) -> dict:
    return asdict(cfg)
