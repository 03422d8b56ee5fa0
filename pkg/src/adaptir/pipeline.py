"""Training and evaluation: host pretraining, parameter-efficient
fine-tuning, the AdamW/milestone schedule, the ablation harness and the
finite-difference gradient audit.

All randomness flows from a single root seed through named substreams
(corpus, shuffle, crop, degrade, eval, init), so a (seed, config) pair
fully determines every checkpoint byte and every report row.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor, finite_diff_grad, no_grad
from .adapter import AdaptIR, AdaptIRConfig, ConfigError
from .host import (HostConfig, HostModel, InsertionSpec, AdapterStack, LoRAStack,
                   BottleneckStack, host_forward, freeze, trainable_parameters,
                   host_checksum)
from .data import (DegradationSpec, parse_task, synth_image, degrade, derive_seed,
                   epoch_order)
from .metrics import MetricReport, psnr, ssim
from .serialize import load_checkpoint, save_checkpoint

__all__ = [
    "save_host",
    "load_host",
    "save_adapter",
    "load_adapter",
    "l1_loss",
    "lr_at",
    "TrainState",
    "adamw_step",
    "pretrain",
    "finetune",
    "FinetuneResult",
    "evaluate",
    "build_adapter",
    "ablate",
    "gradcheck",
    "MILESTONE_FRACTIONS",
]

# half-life epochs {250, 400, 450, 475} of a 500-epoch run, kept as
# fractions so shorter desk-scale runs inherit the same schedule shape
MILESTONE_FRACTIONS = (0.5, 0.8, 0.9, 0.95)

LQ_SIZE = 32  # training crop / evaluation input edge on the degraded side


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    if pred.shape != target.shape:
        raise T.ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return T.tmean(T.tabs(pred - target))


def lr_at(epoch: int, base_lr: float, total_epochs: int,
          milestones: tuple[float, ...] = MILESTONE_FRACTIONS) -> float:
    """Step schedule: halve at each milestone fraction of the run."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    passed = sum(1 for frac in milestones if epoch >= frac * total_epochs)
    return base_lr * (0.5 ** passed)


@dataclass
class TrainState:
    base_lr: float
    total_epochs: int
    seed: int
    step: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: TrainState, params: dict[str, Tensor],
               grads: dict[str, np.ndarray], lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> dict[str, Tensor]:
    """One decoupled-weight-decay Adam step, updating params in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + lr * weight_decay * p.data
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return params


# -- deterministic batching ---------------------------------------------------


def _train_corpus(spec: DegradationSpec, seed: int, n: int) -> list[np.ndarray]:
    size = (LQ_SIZE + 16) * spec.sr_scale
    return [synth_image(derive_seed(seed, "corpus", spec.task_id(), i), size)
            for i in range(n)]


def _epoch_batches(corpus, spec: DegradationSpec, seed: int, epoch: int,
                   batch_size: int):
    """Deterministic shuffled 32x32-crop batches of (lq, hq) pairs."""
    n = len(corpus)
    order = epoch_order(seed, epoch, n)
    crop_rng = np.random.default_rng(derive_seed(seed, "crop", epoch))
    s = spec.sr_scale
    hq_crop = LQ_SIZE * s
    for start in range(0, n - n % batch_size, batch_size):
        lqs, hqs = [], []
        for idx in order[start:start + batch_size]:
            img = corpus[idx]
            max_off = img.shape[1] - hq_crop
            oy, ox = (crop_rng.integers(0, max_off // s + 1, 2) * s)
            hq = img[:, oy:oy + hq_crop, ox:ox + hq_crop]
            per_sample = replace(spec, seed=derive_seed(seed, "degrade", epoch, int(idx)))
            lq, hq = degrade(hq, per_sample)
            lqs.append(lq)
            hqs.append(hq)
        yield (Tensor(np.stack(lqs)), Tensor(np.stack(hqs)))


# -- pretraining ---------------------------------------------------------------


def pretrain(host_config: HostConfig, epochs: int = 30, seed: int = 0,
             base_lr: float = 2e-3, batch_size: int = 8,
             images_per_task: int = 16, weight_decay: float = 0.0):
    """Train every host parameter on a round-robin multi-task mixture,
    then freeze.  Returns (frozen model, per-epoch loss log)."""
    if not host_config.tasks:
        raise ConfigError("pretraining needs at least one task")
    model = HostModel(host_config)
    specs = {t: parse_task(t) for t in host_config.tasks}
    corpora = {t: _train_corpus(specs[t], derive_seed(seed, "task", t), images_per_task)
               for t in host_config.tasks}
    state = TrainState(base_lr=base_lr, total_epochs=epochs, seed=seed)
    log: list[tuple[int, str, float]] = []
    for epoch in range(epochs):
        state.epoch = epoch
        lr = lr_at(epoch, base_lr, epochs)
        for t in host_config.tasks:
            losses = []
            for lq, hq in _epoch_batches(corpora[t], specs[t],
                                         derive_seed(seed, "task", t), epoch, batch_size):
                pred = host_forward(lq, t, model)
                loss = l1_loss(pred, hq)
                loss.backward()
                grads = {k: p.grad for k, p in model.params.items()}
                adamw_step(state, model.params, grads, lr,
                           weight_decay=weight_decay)
                for p in model.params.values():
                    p.grad = None
                losses.append(loss.item())
            log.append((epoch, t, float(np.mean(losses))))
    return freeze(model), log


# -- evaluation -----------------------------------------------------------------


def _psnr_mode(spec: DegradationSpec) -> str:
    return "rgb" if spec.kind == "noise" else "y_channel"


def evaluate(model: HostModel, adapter, task: str, n: int = 16, seed: int = 0,
             insertion: InsertionSpec = InsertionSpec()):
    """Mean PSNR/SSIM over a held-out synthetic set (seeds disjoint from
    training by substream tag)."""
    spec = parse_task(task)
    s = spec.sr_scale
    psnrs, ssims = [], []
    mode = _psnr_mode(spec)
    for i in range(n):
        hq = synth_image(derive_seed(seed, "eval", task, i), LQ_SIZE * s)
        lq, hq = degrade(hq, replace(spec, seed=derive_seed(seed, "eval-noise", i)))
        with no_grad():
            pred = host_forward(Tensor(lq[None]), task, model, adapter=adapter,
                                insertion=insertion)
        pred_img = np.clip(pred.data[0], 0.0, 1.0).astype(np.float32)
        psnrs.append(psnr(pred_img, hq, mode=mode))
        ssims.append(ssim(pred_img, hq))
    return float(np.mean(psnrs)), float(np.mean(ssims))


# -- adapter construction with budget equalization ----------------------------


def _distribute(total: int, units: int) -> list[int]:
    base, extra = divmod(max(total, units), units)
    return [base + (1 if i < extra else 0) for i in range(units)]


def build_adapter(host_config: HostConfig, method: str, seed: int = 0,
                  adapter_config: AdaptIRConfig | None = None,
                  insertion: InsertionSpec = InsertionSpec(),
                  branches: tuple[bool, bool, bool] = (True, True, True)):
    """Construct the requested method's adapter stack.

    The baselines are sized by a budget equalizer to match the default
    three-branch stack's trainable count within a few percent, mirroring
    equal-budget comparisons.
    """
    if adapter_config is None:
        adapter_config = AdaptIRConfig(channels=host_config.embed, seed=seed)
    if method == "adaptir":
        return AdapterStack(host_config, adapter_config, insertion=insertion,
                            branches=branches)
    target = AdapterStack(host_config, adapter_config).param_count()
    c, l = host_config.embed, host_config.layers
    if method == "lora":
        ranks = _distribute(round(target / (4 * c)), l)
        return LoRAStack(host_config, ranks=ranks, seed=seed)
    if method == "bottleneck":
        per_width = 2 * c + 1  # down row + bias + up column, per hidden unit
        widths_total = round((target - 2 * l * c) / per_width)
        hidden = _distribute(widths_total, 2 * l)
        return BottleneckStack(host_config, hidden=hidden, seed=seed)
    raise ConfigError(f"unknown method {method!r} (adaptir | lora | bottleneck)")


# -- fine-tuning -----------------------------------------------------------------


@dataclass
class FinetuneResult:
    adapter: object
    report: MetricReport
    psnr_before: float
    ssim_before: float
    checksum_before: str
    checksum_after: str
    steps: int


def _train_adapter(model: HostModel, adapter, task: str, epochs: int, seed: int,
                   base_lr: float, batch_size: int, images: int,
                   insertion: InsertionSpec, weight_decay: float = 0.0) -> int:
    spec = parse_task(task)
    corpus = _train_corpus(spec, derive_seed(seed, "ft"), images)
    params = trainable_parameters(model, adapter)
    state = TrainState(base_lr=base_lr, total_epochs=epochs, seed=seed)
    for epoch in range(epochs):
        lr = lr_at(epoch, base_lr, epochs)
        for lq, hq in _epoch_batches(corpus, spec, derive_seed(seed, "ft"),
                                     epoch, batch_size):
            pred = host_forward(lq, task, model, adapter=adapter, insertion=insertion)
            loss = l1_loss(pred, hq)
            loss.backward()
            grads = {k: p.grad for k, p in params.items()}
            adamw_step(state, params, grads, lr, weight_decay=weight_decay)
            for p in params.values():
                p.grad = None
    return state.step


def finetune(model: HostModel, method: str, task: str, epochs: int = 25,
             seed: int = 0, base_lr: float = 2e-3, batch_size: int = 8,
             images: int = 16, eval_n: int = 8,
             adapter_config: AdaptIRConfig | None = None,
             insertion: InsertionSpec = InsertionSpec(),
             branches: tuple[bool, bool, bool] = (True, True, True),
             adapter=None) -> FinetuneResult:
    """Train only the adapter on a frozen host; reports held-out metrics
    before and after along with freeze-contract checksums."""
    if not model.frozen:
        raise ConfigError("finetune requires a frozen host")
    parse_task(task)  # validate early
    if adapter is None:
        adapter = build_adapter(model.config, method, seed=derive_seed(seed, "init"),
                                adapter_config=adapter_config, insertion=insertion,
                                branches=branches)
    checksum_before = host_checksum(model)
    t0 = time.perf_counter()
    psnr_before, ssim_before = evaluate(model, None, task, n=eval_n, seed=seed,
                                        insertion=insertion)
    steps = _train_adapter(model, adapter, task, epochs, seed, base_lr,
                           batch_size, images, insertion)
    psnr_after, ssim_after = evaluate(model, adapter, task, n=eval_n, seed=seed,
                                      insertion=insertion)
    wall = time.perf_counter() - t0
    trainable = sum(t.size for t in adapter.parameters().values())
    report = MetricReport(task=task, psnr=psnr_after, ssim=ssim_after,
                          trainable_params=trainable,
                          total_params=model.param_count() + trainable,
                          steps=steps, wall_time=wall)
    return FinetuneResult(adapter=adapter, report=report,
                          psnr_before=psnr_before, ssim_before=ssim_before,
                          checksum_before=checksum_before,
                          checksum_after=host_checksum(model), steps=steps)


# -- ablation harness ------------------------------------------------------------


ABLATION_AXES = ("efficiency", "components", "insertion")


def ablate(model: HostModel, task: str, axes: str, epochs: int = 6, seed: int = 0,
           base_lr: float = 2e-3, images: int = 8, eval_n: int = 4,
           adapter_config: AdaptIRConfig | None = None):
    """One short fine-tune per configuration of the requested axis, with a
    shared seed; emits (label, MetricReport) rows."""
    if adapter_config is None:
        adapter_config = AdaptIRConfig(channels=model.config.embed)
    base = replace(adapter_config, seed=derive_seed(seed, "init"))
    rows: list[tuple[str, MetricReport]] = []

    def run(label, cfg=base, insertion=InsertionSpec(), branches=(True, True, True)):
        res = finetune(model, "adaptir", task, epochs=epochs, seed=seed,
                       base_lr=base_lr, images=images, eval_n=eval_n,
                       adapter_config=cfg, insertion=insertion, branches=branches)
        rows.append((label, res.report))

    if axes == "efficiency":
        run("(0) baseline")
        run("(1) w/o decomposition in LIM", replace(base, lim_decompose=False))
        run("(2) w/o depth-separable in LIM",
            replace(base, lim_decompose=False, lim_depthwise=False))
        run("(3) w/o depth-separable in FAM",
            replace(base, lim_decompose=False, lim_depthwise=False, fam_depthwise=False))
        run("(4) w/o CSM & w/o depth-separable",
            replace(base, lim_decompose=False, lim_depthwise=False, fam_depthwise=False),
            branches=(True, True, False))
    elif axes == "components":
        run("csm", branches=(False, False, True))
        run("fam+csm", branches=(False, True, True))
        run("lim+fam", branches=(True, True, False))
        run("lim+fam+csm", branches=(True, True, True))
    elif axes == "insertion":
        for pos in ("mlp", "attention"):
            for form in ("parallel", "sequential"):
                run(f"{pos}/{form}", insertion=InsertionSpec(pos, form))
    else:
        raise ConfigError(f"unknown ablation axis {axes!r} (one of {ABLATION_AXES})")
    return rows


# -- checkpoint glue --------------------------------------------------------------


def save_host(path, model: HostModel) -> None:
    cfg = asdict(model.config)
    cfg["tasks"] = list(model.config.tasks)
    save_checkpoint(path, "host", cfg, model.params)


def load_host(path, frozen: bool = True) -> HostModel:
    kind, cfg, arrays = load_checkpoint(path)
    if kind != "host":
        raise ConfigError(f"expected a host checkpoint, got kind {kind!r}")
    cfg["tasks"] = tuple(cfg["tasks"])
    model = HostModel(HostConfig(**cfg))
    if set(arrays) != set(model.params):
        raise ConfigError("checkpoint fields do not match the host configuration")
    for name, arr in arrays.items():
        model.params[name].data = arr.astype(model.params[name].dtype)
    return freeze(model) if frozen else model


def save_adapter(path, adapter, host_config: HostConfig) -> None:
    hc = asdict(host_config)
    hc["tasks"] = list(host_config.tasks)
    if isinstance(adapter, AdapterStack):
        first = adapter.layers[0]
        cfg = {"method": "adaptir", "host": hc,
               "adapter": asdict(first.config),
               "insertion": [adapter.insertion.position, adapter.insertion.form],
               "branches": [first.enable_lim, first.enable_fam, first.enable_csm]}
    elif isinstance(adapter, LoRAStack):
        cfg = {"method": "lora", "host": hc,
               "ranks": [l.rank for l in adapter.layers],
               "alpha": [l.alpha for l in adapter.layers]}
    elif isinstance(adapter, BottleneckStack):
        hidden = [w for pair in adapter.layers
                  for w in (pair[0].params["down_w"].shape[0],
                            pair[1].params["down_w"].shape[0])]
        cfg = {"method": "bottleneck", "host": hc, "hidden": hidden}
    else:
        raise ConfigError(f"cannot serialize adapter of type {type(adapter).__name__}")
    save_checkpoint(path, "adapter", cfg, adapter.parameters())


def load_adapter(path):
    """Rebuild an adapter stack from its checkpoint.

    Returns (adapter, insertion, method)."""
    kind, cfg, arrays = load_checkpoint(path)
    if kind != "adapter":
        raise ConfigError(f"expected an adapter checkpoint, got kind {kind!r}")
    hc = dict(cfg["host"])
    hc["tasks"] = tuple(hc["tasks"])
    host_config = HostConfig(**hc)
    method = cfg["method"]
    insertion = InsertionSpec()
    if method == "adaptir":
        insertion = InsertionSpec(*cfg["insertion"])
        adapter = AdapterStack(host_config, AdaptIRConfig(**cfg["adapter"]),
                               insertion=insertion, branches=tuple(cfg["branches"]))
    elif method == "lora":
        adapter = LoRAStack(host_config, ranks=cfg["ranks"])
        for layer, alpha in zip(adapter.layers, cfg["alpha"]):
            layer.alpha = alpha
    elif method == "bottleneck":
        adapter = BottleneckStack(host_config, hidden=cfg["hidden"])
    else:
        raise ConfigError(f"unknown adapter method {method!r}")
    params = adapter.parameters()
    if set(arrays) != set(params):
        raise ConfigError("checkpoint fields do not match the adapter configuration")
    for name, arr in arrays.items():
        params[name].data = arr.astype(params[name].dtype)
    return adapter, insertion, method


# -- gradient audit ---------------------------------------------------------------


def gradcheck(seed: int = 0, eps: float = 1e-5, threshold: float = 1e-4,
              input_shape: tuple[int, int, int, int] = (2, 8, 8, 8)):
    """Autodiff vs central finite differences on a fixed f64 adapter.

    Parameters are jittered away from the zero-output initialization so
    every branch carries gradient.  Returns (name, rel_err, ok) rows.
    """
    cfg = AdaptIRConfig(channels=input_shape[1], reduction=2, lim_rank=2,
                        seed=seed, dtype="f64")
    adapter = AdaptIR(cfg)
    rng = np.random.default_rng(derive_seed(seed, "gradcheck"))
    for p in adapter.params.values():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    x = Tensor(rng.standard_normal(input_shape))
    target = Tensor(rng.standard_normal(input_shape))

    def loss_value() -> Tensor:
        return l1_loss(adapter(x), target)

    loss = loss_value()
    loss.backward()
    rows = []
    for name, p in adapter.params.items():
        fd = finite_diff_grad(lambda _t: loss_value(), p, eps)
        ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(ad)), 1e-6)
        rel = float((np.abs(ad - fd) / denom).max())
        rows.append((name, rel, rel <= threshold))
    return rows
