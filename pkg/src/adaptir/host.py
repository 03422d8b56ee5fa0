"""Frozen toy transformer restoration model with per-layer adapter slots.

Pipeline: task-specific CNN head (two 3x3 convs, the second stride-2, so
a 32x32 input becomes a 16x16 feature map / 256 tokens), pre-norm
transformer body over the flattened sequence, skip connection from the
shallow feature, and a task-specific tail (3x3 conv into depth-to-space).
The tail's upsampling factor is 2*s for an SR-by-s task and 2 for
same-size tasks, undoing the head's downsampling.

Adapters plug in three ways: feature-map adapters (the three-branch
module) at a configurable position/form, LoRA on the query/value
projections, and bottleneck adapters after the attention and MLP
sublayers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .adapter import AdaptIR, AdaptIRConfig, ConfigError, _uniform
from .baselines import BottleneckAdapter, LoRALayer
from .data import parse_task

__all__ = [
    "HostConfig",
    "HostModel",
    "InsertionSpec",
    "AdapterStack",
    "LoRAStack",
    "BottleneckStack",
    "host_forward",
    "freeze",
    "trainable_parameters",
    "host_checksum",
]

HEAD_DOWNSAMPLE = 2


@dataclass
class HostConfig:
    embed: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    feat_h: int = 16
    feat_w: int = 16
    tasks: tuple[str, ...] = ("sr2", "noise25")
    seed: int = 0
    dtype: str = "f32"

    def validate(self) -> None:
        if self.embed % self.heads != 0:
            raise ConfigError(f"embed {self.embed} not divisible by heads {self.heads}")
        if not self.tasks:
            raise ConfigError("at least one task is required")
        for t in self.tasks:
            parse_task(t)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    @property
    def input_hw(self) -> tuple[int, int]:
        return (self.feat_h * HEAD_DOWNSAMPLE, self.feat_w * HEAD_DOWNSAMPLE)


@dataclass(frozen=True)
class InsertionSpec:
    position: str = "mlp"        # "mlp" | "attention"
    form: str = "parallel"       # "parallel" | "sequential"

    def __post_init__(self):
        if self.position not in ("mlp", "attention"):
            raise ConfigError(f"unknown insertion position {self.position!r}")
        if self.form not in ("parallel", "sequential"):
            raise ConfigError(f"unknown insertion form {self.form!r}")


class HostModel:
    def __init__(self, config: HostConfig):
        config.validate()
        self.config = config
        self.frozen = False
        self.task_scales = {t: parse_task(t).sr_scale for t in config.tasks}
        self.params: dict[str, Tensor] = self._init_params()

    def _init_params(self) -> dict[str, Tensor]:
        cfg = self.config
        c, dt = cfg.embed, cfg.np_dtype
        rng = np.random.default_rng(cfg.seed)
        p: dict[str, np.ndarray] = {}
        for t in cfg.tasks:
            p[f"head.{t}.conv1_w"] = _uniform(rng, (c, 3, 3, 3), 27, dt)
            p[f"head.{t}.conv1_b"] = np.zeros(c, dtype=dt)
            p[f"head.{t}.conv2_w"] = _uniform(rng, (c, c, 3, 3), 9 * c, dt)
            p[f"head.{t}.conv2_b"] = np.zeros(c, dtype=dt)
        hid = c * cfg.mlp_ratio
        for i in range(cfg.layers):
            pre = f"body.{i}."
            p[pre + "ln1_g"] = np.ones(c, dtype=dt)
            p[pre + "ln1_b"] = np.zeros(c, dtype=dt)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = _uniform(rng, (c, c), c, dt)
                p[pre + name.replace("w", "b")] = np.zeros(c, dtype=dt)
            p[pre + "ln2_g"] = np.ones(c, dtype=dt)
            p[pre + "ln2_b"] = np.zeros(c, dtype=dt)
            p[pre + "mlp_w1"] = _uniform(rng, (hid, c), c, dt)
            p[pre + "mlp_b1"] = np.zeros(hid, dtype=dt)
            p[pre + "mlp_w2"] = _uniform(rng, (c, hid), hid, dt)
            p[pre + "mlp_b2"] = np.zeros(c, dtype=dt)
        for t in cfg.tasks:
            f = HEAD_DOWNSAMPLE * self.task_scales[t]
            p[f"tail.{t}.conv_w"] = _uniform(rng, (3 * f * f, c, 3, 3), 9 * c, dt)
            p[f"tail.{t}.conv_b"] = np.zeros(3 * f * f, dtype=dt)
        return {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def resolve_task(self, task: str) -> str:
        """Map a (possibly unregistered) task onto a registered head/tail.

        Unseen degradations reuse the head/tail of a registered task with
        the same output geometry, mirroring how a pretrained model is
        transferred to a new degradation.
        """
        if task in self.task_scales:
            return task
        scale = parse_task(task).sr_scale
        for t, s in self.task_scales.items():
            if s == scale:
                return t
        raise KeyError(
            f"task {task!r} not registered and no registered task has scale {scale}")


# -- adapter stacks (one instance per transformer layer) --------------------


class AdapterStack:
    """Per-layer feature-map adapters plus their insertion wiring."""

    def __init__(self, host_config: HostConfig, adapter_config: AdaptIRConfig | None = None,
                 insertion: InsertionSpec = InsertionSpec(),
                 branches: tuple[bool, bool, bool] = (True, True, True)):
        if adapter_config is None:
            adapter_config = AdaptIRConfig(channels=host_config.embed)
        if adapter_config.channels != host_config.embed:
            raise ConfigError(
                f"adapter channels {adapter_config.channels} != host embed {host_config.embed}")
        self.insertion = insertion
        self.layers = []
        for i in range(host_config.layers):
            cfg = AdaptIRConfig(**{**adapter_config.__dict__,
                                   "seed": adapter_config.seed + i})
            self.layers.append(AdaptIR(cfg, branches=branches))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, ad in enumerate(self.layers):
            for k, v in ad.parameters().items():
                out[f"layer{i}.{k}"] = v
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters().values())


class LoRAStack:
    def __init__(self, host_config: HostConfig, ranks: list[int] | int = 4,
                 alpha: float | None = None, seed: int = 0):
        if isinstance(ranks, int):
            ranks = [ranks] * host_config.layers
        if len(ranks) != host_config.layers:
            raise ConfigError("one rank per layer required")
        self.layers = [LoRALayer(host_config.embed, r, alpha, seed=seed + i,
                                 dtype=host_config.np_dtype)
                       for i, r in enumerate(ranks)]

    def parameters(self) -> dict[str, Tensor]:
        return {f"layer{i}.{k}": v for i, l in enumerate(self.layers)
                for k, v in l.params.items()}

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters().values())


class BottleneckStack:
    def __init__(self, host_config: HostConfig, hidden: list[int] | int = 4, seed: int = 0):
        if isinstance(hidden, int):
            hidden = [hidden] * (2 * host_config.layers)
        if len(hidden) != 2 * host_config.layers:
            raise ConfigError("two hidden widths per layer required (attn + mlp)")
        self.layers = []
        for i in range(host_config.layers):
            self.layers.append((
                BottleneckAdapter(host_config.embed, hidden[2 * i], seed=seed + 2 * i,
                                  dtype=host_config.np_dtype),
                BottleneckAdapter(host_config.embed, hidden[2 * i + 1], seed=seed + 2 * i + 1,
                                  dtype=host_config.np_dtype),
            ))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (attn_ad, mlp_ad) in enumerate(self.layers):
            for k, v in attn_ad.params.items():
                out[f"layer{i}.attn.{k}"] = v
            for k, v in mlp_ad.params.items():
                out[f"layer{i}.mlp.{k}"] = v
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters().values())


# -- forward -----------------------------------------------------------------


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, T.transpose(w, (1, 0))) + b


def _tokens_to_map(x: Tensor, c: int, h: int, w: int) -> Tensor:
    n = x.shape[0]
    return T.reshape(T.transpose(x, (0, 2, 1)), (n, c, h, w))


def _map_to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return T.transpose(T.reshape(x, (n, c, h * w)), (0, 2, 1))


def _attention(x_norm: Tensor, p: dict[str, Tensor], pre: str, heads: int,
               lora: LoRALayer | None) -> Tensor:
    n, t, c = x_norm.shape
    dh = c // heads
    wq, wv = p[pre + "wq"], p[pre + "wv"]
    if lora is not None:
        wq = lora.effective("q", wq)
        wv = lora.effective("v", wv)
    q = _linear(x_norm, wq, p[pre + "bq"])
    k = _linear(x_norm, p[pre + "wk"], p[pre + "bk"])
    v = _linear(x_norm, wv, p[pre + "bv"])

    def split(z):
        return T.transpose(T.reshape(z, (n, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, t, c))
    return _linear(ctx, p[pre + "wo"], p[pre + "bo"])


def _apply_feature_adapter(adapter: AdaptIR, tokens: Tensor, c: int, h: int, w: int) -> Tensor:
    return _map_to_tokens(adapter(_tokens_to_map(tokens, c, h, w)))


def _layer_forward(x: Tensor, model: HostModel, i: int, adapter, insertion: InsertionSpec,
                   feat_hw: tuple[int, int]) -> Tensor:
    cfg = model.config
    p = model.params
    pre = f"body.{i}."
    c = cfg.embed
    h, w = feat_hw

    slot = None
    lora = None
    bottlenecks = None
    if isinstance(adapter, AdapterStack):
        slot = adapter.layers[i]
        insertion = adapter.insertion
    elif isinstance(adapter, LoRAStack):
        lora = adapter.layers[i]
    elif isinstance(adapter, BottleneckStack):
        bottlenecks = adapter.layers[i]
    elif adapter is not None:
        raise ConfigError(f"unknown adapter type {type(adapter).__name__}")

    x_norm = T.layernorm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
    attn_out = _attention(x_norm, p, pre, cfg.heads, lora)
    if bottlenecks is not None:
        attn_out = bottlenecks[0](attn_out)
    if slot is not None and insertion.position == "attention":
        if insertion.form == "parallel":
            attn_out = attn_out + _apply_feature_adapter(slot, x_norm, c, h, w)
        else:
            attn_out = attn_out + _apply_feature_adapter(slot, attn_out, c, h, w)
    x = x + attn_out

    x_norm2 = T.layernorm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
    mlp_out = _linear(T.gelu(_linear(x_norm2, p[pre + "mlp_w1"], p[pre + "mlp_b1"])),
                      p[pre + "mlp_w2"], p[pre + "mlp_b2"])
    if bottlenecks is not None:
        mlp_out = bottlenecks[1](mlp_out)
    if slot is not None and insertion.position == "mlp":
        if insertion.form == "parallel":
            mlp_out = mlp_out + _apply_feature_adapter(slot, x_norm2, c, h, w)
        else:
            mlp_out = mlp_out + _apply_feature_adapter(slot, mlp_out, c, h, w)
    return x + mlp_out


def host_forward(img: Tensor, task: str, model: HostModel, adapter=None,
                 insertion: InsertionSpec = InsertionSpec()) -> Tensor:
    """Head -> flatten -> adapted transformer layers -> skip -> tail."""
    cfg = model.config
    reg = model.resolve_task(task)
    p = model.params
    n, ci, hi, wi = img.shape
    if ci != 3:
        raise T.ShapeError(f"expected RGB input, got {ci} channels")
    if hi % HEAD_DOWNSAMPLE or wi % HEAD_DOWNSAMPLE:
        raise T.ShapeError(f"input {hi}x{wi} incompatible with head downsampling")

    x = T.gelu(T.conv2d(img, p[f"head.{reg}.conv1_w"], p[f"head.{reg}.conv1_b"]))
    shallow = T.conv2d(x, p[f"head.{reg}.conv2_w"], p[f"head.{reg}.conv2_b"],
                       stride=HEAD_DOWNSAMPLE)
    fh, fw = shallow.shape[2], shallow.shape[3]

    tokens = _map_to_tokens(shallow)
    for i in range(cfg.layers):
        tokens = _layer_forward(tokens, model, i, adapter, insertion, (fh, fw))
    body = _tokens_to_map(tokens, cfg.embed, fh, fw)

    feat = body + shallow  # skip connection before the tail
    f = HEAD_DOWNSAMPLE * model.task_scales[reg]
    out = T.conv2d(feat, p[f"tail.{reg}.conv_w"], p[f"tail.{reg}.conv_b"])
    return T.depth_to_space(out, f)


# -- freezing -------------------------------------------------------------------


def freeze(model: HostModel) -> HostModel:
    for t in model.params.values():
        t.requires_grad = False
        t.grad = None
    model.frozen = True
    return model


def trainable_parameters(model: HostModel, adapter=None) -> dict[str, Tensor]:
    """Exactly the adapter's parameters; host parameters are excluded."""
    if not model.frozen:
        raise ConfigError("host must be frozen before parameter-efficient training")
    return {} if adapter is None else dict(adapter.parameters())


def host_checksum(model: HostModel) -> str:
    """SHA-256 over all host parameters in declared order."""
    h = hashlib.sha256()
    for name, t in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
