"""Losses, Adam, the training loop and evaluation metrics."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import log_softmax, softmax
from .data import batchify
from .errors import ConfigError, NumericsError, ShapeError, ValidationError
from .models import TpcnnModel
from .numerics import Rng
from .tpc import IrregularBatch

log = logging.getLogger(__name__)

_EVAL_STREAM = 0x5EED_E7A1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    observed_fraction: float | None = None
    split: list = field(default_factory=lambda: [0.64, 0.16, 0.20])

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr: must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs: must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience: must be >= 0")
        if self.observed_fraction is not None and not 0 < self.observed_fraction <= 1:
            raise ConfigError("observed_fraction: must lie in (0, 1]")
        if self.observed_fraction == 1:
            self.observed_fraction = None
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError("split: expected three non-negative fractions summing to 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


# losses


def _target_mask(batch: IrregularBatch) -> np.ndarray:
    L = batch.values.shape[2]
    in_len = np.arange(L)[None, None, :] < batch.valid_len[:, None, None]
    return batch.observed * in_len


def mse_interpolation_loss(xhat, batch: IrregularBatch) -> float:
    """Mean squared error over the observed entries of ``batch``."""
    loss, _ = mse_interpolation_loss_grad(xhat, batch)
    return loss


def mse_interpolation_loss_grad(xhat, batch: IrregularBatch):
    xhat = np.asarray(xhat, dtype=np.float64)
    B, m, L = batch.values.shape
    if xhat.shape[:2] != (B, m) or xhat.shape[2] < L:
        raise ShapeError(f"reconstruction {xhat.shape} does not cover batch {batch.values.shape}")
    xhat_c = xhat[:, :, :L]
    mask = _target_mask(batch)
    count = mask.sum()
    if count == 0:
        raise ConfigError("no observed entries to score")
    diff = (xhat_c - batch.values) * mask
    grad = np.zeros_like(xhat)
    grad[:, :, :L] = 2.0 * diff / count
    return float((diff * diff).sum() / count), grad


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValidationError(f"label outside [0, {n_classes})")
    return labels


def nll_classification_loss(probs, labels, reduction: str = "mean") -> float:
    """Negative log-likelihood of the correct class (``mean`` or ``sum`` over samples)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, probs.shape[1])
    with np.errstate(divide="ignore"):
        nll = -np.log(probs[np.arange(len(labels)), labels])
    return float(nll.sum() if reduction == "sum" else nll.mean())


def step_mask(batch: IrregularBatch) -> np.ndarray:
    """Steps that count for per-step losses: inside the series with at least one observed channel."""
    L = batch.values.shape[2]
    in_len = np.arange(L)[None, :] < batch.valid_len[:, None]
    mask = in_len & (batch.observed.sum(axis=1) > 0)
    if batch.step_labels is not None:
        mask &= batch.step_labels[:, :L] >= 0
    return mask


def nll_step_loss(probs, step_labels, mask) -> float:
    """Per-step NLL averaged over masked-in steps."""
    probs = np.asarray(probs, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    labels = np.where(mask, step_labels, 0)
    labels = _check_labels(labels, probs.shape[2])
    if not mask.any():
        raise ConfigError("no scorable steps")
    picked = np.take_along_axis(probs, labels[..., None], axis=2)[..., 0]
    with np.errstate(divide="ignore"):
        return float(-np.log(picked[mask]).mean())


def _softmax_nll_grad(logits, labels, weight):
    """Loss and d/dlogits of weighted mean NLL for ``N x C`` logits."""
    logp = log_softmax(logits)
    n = weight.sum()
    loss = -(logp[np.arange(len(labels)), labels] * weight).sum() / n
    grad = np.exp(logp)
    grad[np.arange(len(labels)), labels] -= 1.0
    return float(loss), grad * (weight / n)[:, None]


def batch_loss(model: TpcnnModel, task: str, inp: IrregularBatch, target: IrregularBatch | None = None,
               need_grad: bool = True):
    """Task loss on one batch and (optionally) gradients for every parameter."""
    if task == "interp":
        target = inp if target is None else target
        z, enc_cache = model.encode(inp)
        xhat, dec_cache = model.decode(z)
        loss, dxhat = mse_interpolation_loss_grad(xhat, target)
        if not need_grad:
            return loss, None
        dz, grads = model.decode_backward(dec_cache, dxhat)
        grads.update(model.encode_backward(enc_cache, dz))
    elif task == "cls":
        if inp.labels is None:
            raise ValidationError("classification batch has no labels")
        labels = _check_labels(inp.labels, model.config.num_classes)
        z, enc_cache = model.encode(inp)
        logits, head_cache = model.logits(z)
        loss, dlogits = _softmax_nll_grad(logits, labels, np.ones(len(labels)))
        if not need_grad:
            return loss, None
        dz, grads = model.logits_backward(head_cache, dlogits)
        grads.update(model.encode_backward(enc_cache, dz))
    elif task == "step-cls":
        if inp.step_labels is None:
            raise ValidationError("per-step batch has no step labels")
        logits, cache = model.step_logits(inp)
        B, L, C = logits.shape
        Lb = inp.values.shape[2]
        mask = np.zeros((B, L), dtype=bool)
        mask[:, :Lb] = step_mask(inp)
        labels = np.zeros((B, L), dtype=np.int64)
        labels[:, :Lb] = np.where(mask[:, :Lb], inp.step_labels[:, :Lb], 0)
        labels = _check_labels(labels, C)
        if not mask.any():
            raise ConfigError("no scorable steps")
        loss, dflat = _softmax_nll_grad(logits.reshape(B * L, C), labels.reshape(-1),
                                        mask.reshape(-1).astype(np.float64))
        if not need_grad:
            return loss, None
        grads = model.step_logits_backward(cache, dflat.reshape(B, L, C))
    else:
        raise ConfigError(f"unknown task {task!r}")
    return loss, {k: grads[k] for k in model.params}


# optimizer


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


# interpolation targets


def subsample_observed(batch: IrregularBatch, fraction: float, rng: Rng):
    """Split each sample's observed entries into kept inputs and held-out targets.

    Keeps ``ceil(fraction * n_obs)`` entries but always holds out at least one.
    Samples with fewer than two observed entries are kept whole with no targets.
    """
    if not 0 < fraction < 1:
        raise ConfigError("fraction: must lie strictly between 0 and 1")
    keep = np.zeros_like(batch.observed)
    B = batch.values.shape[0]
    L = batch.values.shape[2]
    in_len = np.arange(L)[None, :] < batch.valid_len[:, None]
    for b in range(B):
        obs = np.flatnonzero((batch.observed[b] * in_len[b][None, :]).reshape(-1))
        n = obs.size
        if n < 2:
            log.warning("sample %s has %d observed entries; skipped for subsampling",
                        batch.ids[b] if batch.ids else b, n)
            keep[b] = batch.observed[b]
            continue
        n_keep = min(math.ceil(fraction * n), n - 1)
        chosen = obs[rng.choice(n, n_keep)]
        keep[b].reshape(-1)[chosen] = 1.0
    target = batch.observed * (1.0 - keep)
    inp = dataclasses.replace(batch, values=batch.values * keep, observed=keep)
    tgt = dataclasses.replace(batch, values=batch.values * target, observed=target)
    return inp, tgt


def interpolation_pairs(batches, fraction, seed: int):
    """Fixed (input, target) pairs for evaluation; the full-observation mode reconstructs every point."""
    if fraction is None:
        return [(b, b) for b in batches]
    rng = Rng(seed).spawn(_EVAL_STREAM)
    return [subsample_observed(b, fraction, rng) for b in batches]


# loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


def _eval_loss(model, task, pairs):
    total, weight = 0.0, 0.0
    for inp, tgt in pairs:
        loss, _ = batch_loss(model, task, inp, tgt, need_grad=False)
        if task == "interp":
            w = _target_mask(tgt).sum()
        elif task == "cls":
            w = inp.values.shape[0]
        else:
            w = step_mask(inp).sum()
        total += loss * w
        weight += w
    return total / weight


def _train_pairs(task, records, cfg, rng):
    order = rng.permutation(len(records))
    batches = batchify([records[i] for i in order], cfg.batch_size)
    if task == "interp" and cfg.observed_fraction is not None:
        # inputs are subsampled, the loss covers every originally observed entry
        return [(subsample_observed(b, cfg.observed_fraction, rng)[0], b) for b in batches]
    return [(b, b) for b in batches]


def train_loop(task: str, model: TpcnnModel, data, cfg: TrainConfig, on_epoch=None):
    """Minibatch Adam with early stopping on validation loss.

    ``data`` is ``(train_records, val_records)``. Returns ``(best_model, history)``
    where history holds one :class:`EpochRecord` per completed epoch.
    """
    train_records, val_records = data
    if not train_records or not val_records:
        raise ConfigError("train and validation sets must be non-empty")
    rng = Rng(cfg.seed).spawn(1)
    val_batches = batchify(val_records, cfg.batch_size)
    val_pairs = (interpolation_pairs(val_batches, cfg.observed_fraction, cfg.seed)
                 if task == "interp" else [(b, b) for b in val_batches])
    state = AdamState()
    best = model.copy()
    best_val = math.inf
    since_best = 0
    history: list[EpochRecord] = []
    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        total, count = 0.0, 0
        try:
            for inp, tgt in _train_pairs(task, train_records, cfg, rng):
                loss, grads = batch_loss(model, task, inp, tgt)
                if not math.isfinite(loss):
                    raise NumericsError(f"training loss diverged at epoch {epoch}")
                adam_step(model.params, grads, state, cfg)
                n = inp.values.shape[0]
                total += loss * n
                count += n
            val_loss = _eval_loss(model, task, val_pairs)
            if not math.isfinite(val_loss):
                raise NumericsError(f"validation loss diverged at epoch {epoch}")
        except NumericsError as exc:
            exc.checkpoint = best
            exc.history = history
            raise
        rec = EpochRecord(epoch, total / count, float(val_loss), time.perf_counter() - start)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if val_loss < best_val:
            best_val = val_loss
            best = model.copy()
            since_best = 0
        else:
            since_best += 1
        if since_best >= cfg.patience:
            break
    return best, history


# metrics


def roc_auc(labels, scores) -> float:
    """Area under the ROC curve from the Mann-Whitney rank statistic; ties get midranks."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("AUC needs both classes in the evaluation set")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_mse(model: TpcnnModel, records, batch_size: int = 64, observed_fraction=None, seed: int = 0) -> float:
    """MSE on held-out targets (every observed point when no fraction is given)."""
    pairs = interpolation_pairs(batchify(records, batch_size), observed_fraction, seed)
    sq, n = 0.0, 0.0
    for inp, tgt in pairs:
        if observed_fraction is not None:
            overlap = (inp.observed * tgt.observed).sum()
            assert overlap == 0, "evaluation targets overlap model inputs"
        z, _ = model.encode(inp)
        xhat, _ = model.decode(z)
        mask = _target_mask(tgt)
        L = tgt.values.shape[2]
        diff = (xhat[:, :, :L] - tgt.values) * mask
        sq += float((diff * diff).sum())
        n += float(mask.sum())
    if n == 0:
        raise ConfigError("no target points to score")
    return sq / n


def predict_proba(model: TpcnnModel, records, batch_size: int = 64):
    out = []
    for b in batchify(records, batch_size):
        z, _ = model.encode(b)
        out.append(softmax(model.logits(z)[0]))
    return np.concatenate(out)


def evaluate_auc(model: TpcnnModel, records, batch_size: int = 64) -> float:
    if model.config.num_classes != 2:
        raise ConfigError("AUC is defined here for binary classification only")
    probs = predict_proba(model, records, batch_size)
    labels = np.array([r.label for r in records])
    return roc_auc(labels, probs[:, 1])


def evaluate_accuracy(model: TpcnnModel, records, batch_size: int = 64) -> float:
    """Sequence accuracy, or per-step accuracy over scorable steps for the per-step task."""
    if model.config.task == "cls":
        probs = predict_proba(model, records, batch_size)
        labels = np.array([r.label for r in records])
        return float((probs.argmax(axis=1) == labels).mean())
    correct, total = 0, 0
    for b in batchify(records, batch_size):
        logits, _ = model.step_logits(b)
        L = b.values.shape[2]
        pred = logits[:, :L].argmax(axis=2)
        mask = step_mask(b)
        correct += int(((pred == b.step_labels) & mask).sum())
        total += int(mask.sum())
    if total == 0:
        raise ConfigError("no scorable steps")
    return correct / total


def evaluate(model: TpcnnModel, records, cfg: TrainConfig) -> dict:
    """Task-appropriate metrics for a record set."""
    task = model.config.task
    if task == "interp":
        return {"mse": evaluate_mse(model, records, cfg.batch_size, cfg.observed_fraction, cfg.seed)}
    if task == "cls":
        out = {"accuracy": evaluate_accuracy(model, records, cfg.batch_size)}
        if model.config.num_classes == 2:
            out["auc"] = evaluate_auc(model, records, cfg.batch_size)
        return out
    return {"accuracy": evaluate_accuracy(model, records, cfg.batch_size)}
