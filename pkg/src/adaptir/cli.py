"""Command-line entry point binding the library into reproducible runs.

Runs are described by a flat ``key=value`` config file plus a handful of
overriding flags.  Every command writes the fully resolved config next to
its outputs, so a run directory is self-describing and byte-reproducible
from its own ``resolved.cfg``.
"""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import pipeline as P
from .adapter import AdaptIRConfig, ConfigError
from .data import PPMError, derive_seed, parse_task, save_ppm, synth_image, degrade
from .host import HostConfig, InsertionSpec, host_forward, host_checksum
from .metrics import MetricReport
from .pipeline import LQ_SIZE
from .tensor import ContractError, ShapeError, Tensor, no_grad

# every recognized config key with its parser and default
_KEYS = {
    "seed": (int, 0),
    "out": (str, "runs/default"),
    "method": (str, "adaptir"),
    "task": (str, "second_order_s2_sig25"),
    "epochs": (int, 25),
    "base_lr": (float, 2e-3),
    "batch_size": (int, 8),
    "weight_decay": (float, 0.0),
    "images": (int, 16),
    "eval_n": (int, 8),
    "axes": (str, "components"),
    "host_checkpoint": (str, ""),
    "adapter_checkpoint": (str, ""),
    "dump_images": (int, 2),
    "host.embed": (int, 64),
    "host.layers": (int, 4),
    "host.heads": (int, 4),
    "host.mlp_ratio": (int, 4),
    "host.feat_h": (int, 16),
    "host.feat_w": (int, 16),
    "host.tasks": (str, "sr2,noise25"),
    "adapter.reduction": (int, 8),
    "adapter.lim_rank": (int, 4),
    "adapter.kernel": (int, 3),
    "insertion.position": (str, "mlp"),
    "insertion.form": (str, "parallel"),
}

_ERRORS = (ConfigError, ContractError, ShapeError, PPMError, ValueError,
           FileNotFoundError)


def _parse_config_file(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _KEYS[key][0](value)
    return values


def _resolve(config_path, **overrides) -> dict:
    cfg = {k: default for k, (_, default) in _KEYS.items()}
    if config_path:
        cfg.update(_parse_config_file(config_path))
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(cfg: dict, out: Path) -> None:
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    (out / "resolved.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _host_config(cfg: dict) -> HostConfig:
    return HostConfig(embed=cfg["host.embed"], layers=cfg["host.layers"],
                      heads=cfg["host.heads"], mlp_ratio=cfg["host.mlp_ratio"],
                      feat_h=cfg["host.feat_h"], feat_w=cfg["host.feat_w"],
                      tasks=tuple(t.strip() for t in cfg["host.tasks"].split(",") if t.strip()),
                      seed=cfg["seed"])


def _adapter_config(cfg: dict) -> AdaptIRConfig:
    return AdaptIRConfig(channels=cfg["host.embed"], reduction=cfg["adapter.reduction"],
                         lim_rank=cfg["adapter.lim_rank"], kernel=cfg["adapter.kernel"],
                         seed=derive_seed(cfg["seed"], "init"))


def _insertion(cfg: dict) -> InsertionSpec:
    return InsertionSpec(cfg["insertion.position"], cfg["insertion.form"])


def _load_host(cfg: dict):
    path = cfg["host_checkpoint"] or str(Path(cfg["out"]) / "host.ckpt")
    if not Path(path).is_file():
        raise FileNotFoundError(f"host checkpoint not found: {path}")
    return P.load_host(path)


def _write_reports(out: Path, name: str, rows: list[tuple[str, MetricReport]]) -> None:
    lines = ["label," + ",".join(MetricReport.CSV_FIELDS)]
    lines += [f"{label},{rep.csv_row()}" for label, rep in rows]
    (out / name).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _dump_qualitative(out: Path, model, adapter, insertion, task: str,
                      cfg: dict) -> None:
    spec = parse_task(task)
    for i in range(cfg["dump_images"]):
        hq = synth_image(derive_seed(cfg["seed"], "eval", task, i),
                         LQ_SIZE * spec.sr_scale)
        lq, hq = degrade(hq, replace(spec, seed=derive_seed(cfg["seed"], "eval-noise", i)))
        with no_grad():
            pred = host_forward(Tensor(lq[None]), task, model, adapter=adapter,
                                insertion=insertion)
        save_ppm(lq, out / f"sample{i}_lq.ppm")
        save_ppm(hq, out / f"sample{i}_hq.ppm")
        save_ppm(np.clip(pred.data[0], 0, 1).astype(np.float32),
                 out / f"sample{i}_pred.ppm")


def _fail(exc: Exception) -> "click.ClickException":
    return click.ClickException(f"{type(exc).__name__}: {exc}")


_shared = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                 default=None, help="flat key=value config file"),
    click.option("--seed", type=int, default=None),
    click.option("--out", type=str, default=None, help="output directory"),
]


def _with_shared(extra=()):
    def deco(fn):
        for opt in [*extra, *_shared]:
            fn = opt(fn)
        return fn
    return deco


@click.group()
def main():
    """Parameter-efficient restoration adapter experiments."""


@main.command("pretrain")
@_with_shared([click.option("--epochs", type=int, default=None)])
def cmd_pretrain(config_path, seed, out, epochs):
    """Train the multi-task host from scratch and freeze it."""
    try:
        cfg = _resolve(config_path, seed=seed, out=out, epochs=epochs)
        out_dir = _out_dir(cfg)
        _write_resolved(cfg, out_dir)
        host_cfg = _host_config(cfg)
        model, log = P.pretrain(host_cfg, epochs=cfg["epochs"], seed=cfg["seed"],
                                base_lr=cfg["base_lr"], batch_size=cfg["batch_size"],
                                images_per_task=cfg["images"],
                                weight_decay=cfg["weight_decay"])
        P.save_host(out_dir / "host.ckpt", model)
        rows = ["epoch,task,loss"] + [f"{e},{t},{l:.6f}" for e, t, l in log]
        (out_dir / "pretrain_log.csv").write_text("\n".join(rows) + "\n",
                                                  encoding="utf-8", newline="\n")
        click.echo(f"host: {model.param_count()} params, checksum {host_checksum(model)}")
        click.echo(f"wrote {out_dir}/host.ckpt")
    except _ERRORS as exc:
        raise _fail(exc)


@main.command("finetune")
@_with_shared([click.option("--method", type=str, default=None),
               click.option("--task", type=str, default=None),
               click.option("--epochs", type=int, default=None)])
def cmd_finetune(config_path, seed, out, method, task, epochs):
    """Train one adapter method on a frozen host checkpoint."""
    try:
        cfg = _resolve(config_path, seed=seed, out=out, method=method,
                       task=task, epochs=epochs)
        out_dir = _out_dir(cfg)
        _write_resolved(cfg, out_dir)
        model = _load_host(cfg)
        insertion = _insertion(cfg)
        res = P.finetune(model, cfg["method"], cfg["task"], epochs=cfg["epochs"],
                         seed=cfg["seed"], base_lr=cfg["base_lr"],
                         batch_size=cfg["batch_size"], images=cfg["images"],
                         eval_n=cfg["eval_n"], adapter_config=_adapter_config(cfg),
                         insertion=insertion)
        P.save_adapter(out_dir / "adapter.ckpt", res.adapter, model.config)
        _write_reports(out_dir, "report.csv", [(cfg["method"], res.report)])
        _dump_qualitative(out_dir, model, res.adapter, insertion, cfg["task"], cfg)
        ratio = res.report.trainable_params / res.report.total_params
        click.echo(f"psnr before {res.psnr_before:.3f} dB -> after {res.report.psnr:.3f} dB")
        click.echo(f"trainable/total: {res.report.trainable_params}/"
                   f"{res.report.total_params} ({100 * ratio:.2f}%)")
        click.echo(f"host checksum before {res.checksum_before}")
        click.echo(f"host checksum after  {res.checksum_after}")
        if res.checksum_before != res.checksum_after:
            raise ContractError("freeze contract violated: host parameters changed")
    except _ERRORS as exc:
        raise _fail(exc)


@main.command("eval")
@_with_shared([click.option("--task", type=str, default=None)])
def cmd_eval(config_path, seed, out, task):
    """Evaluate a frozen host (plus optional adapter) on held-out images."""
    try:
        cfg = _resolve(config_path, seed=seed, out=out, task=task)
        out_dir = _out_dir(cfg)
        _write_resolved(cfg, out_dir)
        model = _load_host(cfg)
        adapter, insertion = None, _insertion(cfg)
        trainable = 0
        if cfg["adapter_checkpoint"]:
            adapter, insertion, _ = P.load_adapter(cfg["adapter_checkpoint"])
            trainable = adapter.param_count()
        mean_psnr, mean_ssim = P.evaluate(
            model, adapter, cfg["task"], n=cfg["eval_n"], seed=cfg["seed"],
            insertion=insertion)
        report = MetricReport(task=cfg["task"], psnr=mean_psnr, ssim=mean_ssim,
                              trainable_params=trainable,
                              total_params=model.param_count() + trainable, steps=0)
        _write_reports(out_dir, "report.csv", [("eval", report)])
        _dump_qualitative(out_dir, model, adapter, insertion, cfg["task"], cfg)
        click.echo(f"{cfg['task']}: psnr {mean_psnr:.3f} dB, ssim {mean_ssim:.4f}")
    except _ERRORS as exc:
        raise _fail(exc)


@main.command("gradcheck")
@click.option("--seed", type=int, default=0)
def cmd_gradcheck(seed):
    """Finite-difference audit of every adapter parameter (f64)."""
    rows = P.gradcheck(seed=seed)
    width = max(len(name) for name, _, _ in rows)
    failed = [(n, r) for n, r, ok in rows if not ok]
    for name, rel, ok in rows:
        click.echo(f"{name:<{width}}  rel_err {rel:.3e}  {'ok' if ok else 'FAIL'}")
    if failed:
        worst = max(failed, key=lambda nr: nr[1])
        raise click.ClickException(
            f"gradient check failed: {worst[0]} rel err {worst[1]:.3e} > 1e-4")
    click.echo("all parameter groups pass (rel err <= 1e-4)")


@main.command("paramcount")
@_with_shared()
def cmd_paramcount(config_path, seed, out):
    """Print host and per-method trainable parameter counts."""
    try:
        cfg = _resolve(config_path, seed=seed, out=out)
        host_cfg = _host_config(cfg)
        from .host import HostModel
        total = HostModel(host_cfg).param_count()
        click.echo(f"host total: {total}")
        for method in ("adaptir", "lora", "bottleneck"):
            n = P.build_adapter(host_cfg, method, seed=cfg["seed"],
                                adapter_config=_adapter_config(cfg)).param_count()
            click.echo(f"{method:<10} trainable: {n:>6}  ratio {100 * n / total:.2f}%")
    except _ERRORS as exc:
        raise _fail(exc)


@main.command("ablate")
@_with_shared([click.option("--task", type=str, default=None),
               click.option("--epochs", type=int, default=None),
               click.option("--axes", type=str, default=None)])
def cmd_ablate(config_path, seed, out, task, epochs, axes):
    """Run one ablation axis (efficiency | components | insertion)."""
    try:
        cfg = _resolve(config_path, seed=seed, out=out, task=task,
                       epochs=epochs, axes=axes)
        out_dir = _out_dir(cfg)
        _write_resolved(cfg, out_dir)
        model = _load_host(cfg)
        rows = P.ablate(model, cfg["task"], cfg["axes"], epochs=cfg["epochs"],
                        seed=cfg["seed"], base_lr=cfg["base_lr"],
                        images=cfg["images"], eval_n=cfg["eval_n"],
                        adapter_config=_adapter_config(cfg))
        _write_reports(out_dir, f"ablation_{cfg['axes']}.csv", rows)
        width = max(len(label) for label, _ in rows)
        for label, rep in rows:
            click.echo(f"{label:<{width}}  psnr {rep.psnr:7.3f}  ssim {rep.ssim:.4f}"
                       f"  params {rep.trainable_params}")
    except _ERRORS as exc:
        raise _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
