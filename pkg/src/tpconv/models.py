"""TPCNN encoder, decoder and classification heads built from the TPC layer and vanilla blocks.

Parameters live in one ordered ``dict[str, ndarray]`` so the optimizer, the
checkpoint writer and the gradient checker all see the same enumeration.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import blocks
from .errors import ConfigError, ShapeError
from .numerics import Rng
from .timefuncs import ActivationId, KernelParams, TimeFunctionId, init_kernel
from .tpc import Aggregation, IrregularBatch, TpcConfig, tpc_backward, tpc_forward

TASKS = ("interp", "cls", "step-cls")
CHECKPOINT_FORMAT = "tpconv-checkpoint-v1"


@dataclass
class ModelConfig:
    m: int = 1
    seq_len: int = 20
    task: str = "interp"
    z: int = 2
    p: int = 32
    functions: list = field(default_factory=lambda: ["sin"])
    sigma: str = "sigmoid"
    aggregation: str = "mean"
    conv_channels: list = field(default_factory=lambda: [64, 64])
    conv_ksize: int = 5
    latent_dim: int = 64
    head_hidden: int = 128
    num_classes: int = 2
    decoder_hidden: int | None = None
    theta3_init: list = field(default_factory=lambda: [0.5, 1.5])

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if not self.conv_channels:
            raise ConfigError("conv_channels must not be empty")
        if self.conv_ksize % 2 == 0:
            raise ConfigError("conv_ksize must be odd")
        if isinstance(self.functions, str):
            self.functions = self.functions.split("+")
        self.functions = [TimeFunctionId.parse(f).value for f in self.functions]
        self.sigma = ActivationId.parse(self.sigma).value
        self.aggregation = Aggregation(self.aggregation).value
        if len(self.theta3_init) != 2 or not self.theta3_init[0] < self.theta3_init[1]:
            raise ConfigError("theta3_init: expected [lo, hi] with lo < hi")
        self.theta3_init = [float(v) for v in self.theta3_init]
        if self.decoder_hidden is None:
            self.decoder_hidden = 4 * self.latent_dim
        if self.task != "interp" and self.num_classes < 2:
            raise ConfigError("classification needs num_classes >= 2")

    @property
    def mask_center(self) -> bool:
        return self.task == "interp"

    def kernel_function(self, q: int) -> str:
        return self.functions[q % len(self.functions)]

    def pooled_len(self) -> int:
        n = self.seq_len
        for _ in range(len(self.conv_channels) + 1):
            n = -(-n // 2)
        return n

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class TpcnnModel:
    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, rng: Rng) -> "TpcnnModel":
        c = config
        params: dict[str, np.ndarray] = {}
        kernels = [init_kernel(rng, c.m, c.z, c.kernel_function(q), c.sigma, c.theta3_init) for q in range(c.p)]
        for i in range(4):
            params[f"tpc.theta{i + 1}"] = np.stack([k.thetas()[i] for k in kernels])
        in_ch = c.p
        for i, out_ch in enumerate(c.conv_channels):
            conv = blocks.init_conv1d(rng, in_ch, out_ch, c.conv_ksize)
            params[f"conv{i}.weight"], params[f"conv{i}.bias"] = conv.weight, conv.bias
            in_ch = out_ch

        def add_linear(name, n_in, n_out):
            lp = blocks.init_linear(rng, n_in, n_out)
            params[f"{name}.weight"], params[f"{name}.bias"] = lp.weight, lp.bias

        if c.task in ("interp", "cls"):
            add_linear("proj", in_ch * c.pooled_len(), c.latent_dim)
        if c.task == "interp":
            add_linear("dec1", c.latent_dim, c.decoder_hidden)
            add_linear("dec2", c.decoder_hidden, c.m * c.seq_len)
        elif c.task == "cls":
            add_linear("head1", c.latent_dim, c.head_hidden)
            add_linear("head2", c.head_hidden, c.num_classes)
        else:
            add_linear("head1", in_ch, c.head_hidden)
            add_linear("head2", c.head_hidden, c.num_classes)
        return cls(config, params)

    # parameter views

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "TpcnnModel":
        return TpcnnModel(ModelConfig.from_dict(self.config.to_dict()),
                          {k: v.copy() for k, v in self.params.items()})

    def tpc_config(self) -> TpcConfig:
        c = self.config
        t = [self.params[f"tpc.theta{i + 1}"] for i in range(4)]
        kernels = [
            KernelParams(t[0][q], t[1][q], t[2][q], t[3][q], h=c.kernel_function(q), sigma=c.sigma)
            for q in range(c.p)
        ]
        return TpcConfig(m=c.m, z=c.z, kernels=kernels, aggregation=c.aggregation, mask_center=c.mask_center)

    def _conv(self, i):
        return blocks.Conv1dParams(self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"])

    def _linear(self, name):
        return blocks.LinearParams(self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _fit_length(self, batch: IrregularBatch) -> IrregularBatch:
        B, m, L = batch.values.shape
        if m != self.config.m:
            raise ShapeError(f"batch has {m} channels, model expects {self.config.m}")
        if L > self.config.seq_len:
            raise ShapeError(f"batch length {L} exceeds model seq_len {self.config.seq_len}")
        if L == self.config.seq_len:
            return batch
        return pad_batch(batch, self.config.seq_len)

    # encoder

    def encode(self, batch: IrregularBatch, pool: bool = True):
        """Latent ``B x d`` (pool=True) or per-step features ``B x C x L`` (pool=False)."""
        batch = self._fit_length(batch)
        caches = []
        h, tc = tpc_forward(batch, self.tpc_config())
        caches.append(("tpc", tc))
        h = h.transpose(0, 2, 1)
        if pool:
            h, pc = blocks.maxpool1d(h)
            caches.append(("pool", pc))
        for i in range(len(self.config.conv_channels)):
            h, cc = blocks.conv1d(h, self._conv(i))
            caches.append((f"conv{i}", cc))
            h, ac = blocks.activation(h, "relu")
            caches.append(("act", ac))
            if pool:
                h, pc = blocks.maxpool1d(h)
                caches.append(("pool", pc))
        if not pool:
            return h, caches
        flat_shape = h.shape
        h, lc = blocks.linear(h.reshape(h.shape[0], -1), self._linear("proj"))
        caches.append(("flatten", flat_shape))
        caches.append(("proj", lc))
        return h, caches

    def encode_backward(self, caches, grad) -> dict:
        grads: dict[str, np.ndarray] = {}
        for name, cache in reversed(caches):
            if name == "proj":
                grad, g = blocks.linear_backward(cache, grad)
                grads["proj.weight"], grads["proj.bias"] = g["weight"], g["bias"]
            elif name == "flatten":
                grad = grad.reshape(cache)
            elif name == "pool":
                grad = blocks.maxpool1d_backward(cache, grad)
            elif name == "act":
                grad = blocks.activation_backward(cache, grad)
            elif name.startswith("conv"):
                grad, g = blocks.conv1d_backward(cache, grad)
                grads[f"{name}.weight"], grads[f"{name}.bias"] = g["weight"], g["bias"]
            else:
                kg = tpc_backward(cache, grad.transpose(0, 2, 1))
                for i in range(4):
                    grads[f"tpc.theta{i + 1}"] = np.stack([k[i] for k in kg])
        return grads

    # decoder and heads

    def _mlp(self, x, first, second):
        h, c1 = blocks.linear(x, self._linear(first))
        a, ca = blocks.activation(h, "relu")
        out, c2 = blocks.linear(a, self._linear(second))
        return out, (c1, ca, c2)

    def _mlp_backward(self, caches, grad, first, second):
        c1, ca, c2 = caches
        grads = {}
        grad, g = blocks.linear_backward(c2, grad)
        grads[f"{second}.weight"], grads[f"{second}.bias"] = g["weight"], g["bias"]
        grad = blocks.activation_backward(ca, grad)
        grad, g = blocks.linear_backward(c1, grad)
        grads[f"{first}.weight"], grads[f"{first}.bias"] = g["weight"], g["bias"]
        return grad, grads

    def decode(self, z):
        c = self.config
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != c.latent_dim:
            raise ShapeError(f"latent shape {z.shape} incompatible with latent_dim {c.latent_dim}")
        out, cache = self._mlp(z, "dec1", "dec2")
        return out.reshape(z.shape[0], c.m, c.seq_len), cache

    def decode_backward(self, cache, grad):
        grad = np.asarray(grad).reshape(grad.shape[0], -1)
        return self._mlp_backward(cache, grad, "dec1", "dec2")

    def logits(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"latent shape {z.shape} incompatible with latent_dim {self.config.latent_dim}")
        return self._mlp(z, "head1", "head2")

    def logits_backward(self, cache, grad):
        return self._mlp_backward(cache, grad, "head1", "head2")

    def step_logits(self, batch: IrregularBatch):
        feats, enc_caches = self.encode(batch, pool=False)
        B, C, L = feats.shape
        flat = feats.transpose(0, 2, 1).reshape(B * L, C)
        out, head_cache = self._mlp(flat, "head1", "head2")
        return out.reshape(B, L, -1), (enc_caches, head_cache, (B, C, L))

    def step_logits_backward(self, cache, grad):
        enc_caches, head_cache, (B, C, L) = cache
        grad = np.asarray(grad).reshape(B * L, -1)
        dflat, grads = self._mlp_backward(head_cache, grad, "head1", "head2")
        dfeat = dflat.reshape(B, L, C).transpose(0, 2, 1)
        grads.update(self.encode_backward(enc_caches, dfeat))
        return grads


def pad_batch(batch: IrregularBatch, length: int) -> IrregularBatch:
    """Right-pad to ``length`` with unobserved slots that repeat the last timestamp."""
    B, m, L = batch.values.shape
    extra = length - L
    if extra < 0:
        raise ShapeError(f"cannot pad length {L} down to {length}")
    last = batch.times[:, -1:] if L else np.zeros((B, 1))
    step_labels = batch.step_labels
    if step_labels is not None:
        step_labels = np.concatenate([step_labels, np.full((B, extra), -1, dtype=step_labels.dtype)], axis=1)
    return IrregularBatch(
        values=np.concatenate([batch.values, np.zeros((B, m, extra))], axis=2),
        observed=np.concatenate([batch.observed, np.zeros((B, m, extra))], axis=2),
        times=np.concatenate([batch.times, np.repeat(last, extra, axis=1)], axis=1),
        valid_len=batch.valid_len,
        ids=batch.ids,
        labels=batch.labels,
        step_labels=step_labels,
    )


def encode(batch, model: TpcnnModel):
    return model.encode(batch)


def decode(z, model: TpcnnModel):
    return model.decode(z)[0]


def classify(z, model: TpcnnModel):
    return blocks.softmax(model.logits(z)[0])


def classify_per_step(batch, model: TpcnnModel):
    return blocks.softmax(model.step_logits(batch)[0])


def interpolation_forward(batch, model: TpcnnModel):
    if not model.config.mask_center:
        raise ConfigError("interpolation requires a model built for the 'interp' task")
    z, _ = model.encode(batch)
    return model.decode(z)[0]


class _ZeroRng:
    """Stand-in generator for computing parameter shapes without drawing numbers."""

    def uniform(self, lo, hi, shape=()):
        return np.zeros(shape)


def save_checkpoint(model: TpcnnModel, path, extra: dict | None = None) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[TpcnnModel, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {meta.get('format')!r}")
        params = {k[len("param/"):]: data[k].astype(np.float64) for k in data.files if k.startswith("param/")}
    config = ModelConfig.from_dict(meta["config"])
    expected = TpcnnModel.init(config, _ZeroRng()).params
    if list(expected) != list(params):
        raise ShapeError("checkpoint parameter names do not match its config")
    for name, arr in expected.items():
        if params[name].shape != arr.shape:
            raise ShapeError(f"checkpoint tensor {name} has shape {params[name].shape}, config implies {arr.shape}")
    return TpcnnModel(config, params), meta.get("extra", {})
