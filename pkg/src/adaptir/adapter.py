"""The three-branch adapter: channel-reducing down-projection, a local
low-rank depthwise convolution branch, a global frequency-affine branch,
a channel-shift branch, and a zero-initialized up-projection.

Initialization rules that make a fresh adapter an exact no-op: the
frequency affine maps start as the identity (unit weight, zero bias) and
the up-projection starts at exactly zero, so the adapter's output is the
zero tensor until training moves it.

Ablation knobs mirror the efficiency study: the local branch's kernel can
be stored full instead of factorized, and the local / frequency branches
can trade their depth-separable form for full channel mixing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError
from .fft import ComplexSpectrum, rfft2, irfft2

__all__ = ["AdaptIRConfig", "AdaptIR", "ConfigError"]


class ConfigError(ValueError):
    pass


@dataclass
class AdaptIRConfig:
    channels: int = 64
    reduction: int = 8
    lim_rank: int = 4
    kernel: int = 3
    ffn_hidden: int | None = None  # defaults to channels // reduction
    seed: int = 0
    dtype: str = "f32"
    # ablation toggles (defaults reproduce the standard design)
    lim_decompose: bool = True
    lim_depthwise: bool = True
    fam_depthwise: bool = True

    def validate(self) -> None:
        c, g = self.channels, self.reduction
        if g < 1 or c % g != 0:
            raise ConfigError(f"reduction {g} must divide channels {c}")
        cg = c // g
        if cg < 1:
            raise ConfigError(f"intrinsic width {cg} must be >= 1")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.lim_decompose and not 1 <= self.lim_rank <= min(cg, self.kernel ** 2):
            raise ConfigError(
                f"lim_rank {self.lim_rank} outside [1, min(C/gamma={cg}, K^2={self.kernel ** 2})]"
            )
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype}")
        if not self.lim_decompose:
            pass  # full kernel is stored directly
        if not self.lim_depthwise and self.lim_decompose:
            raise ConfigError("full-channel local branch is only supported undecomposed")

    @property
    def intrinsic(self) -> int:
        return self.channels // self.reduction

    @property
    def hidden(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else self.intrinsic

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class AdaptIR:
    """One adapter instance operating on N x C x H x W feature maps."""

    def __init__(self, config: AdaptIRConfig,
                 branches: tuple[bool, bool, bool] = (True, True, True)):
        config.validate()
        if not any(branches):
            raise ConfigError("at least one branch must be enabled")
        self.config = config
        self.enable_lim, self.enable_fam, self.enable_csm = branches
        self.params: dict[str, Tensor] = self._init_params()

    # -- construction ---------------------------------------------------

    def _init_params(self) -> dict[str, Tensor]:
        cfg = self.config
        c, cg, k, h = cfg.channels, cfg.intrinsic, cfg.kernel, cfg.hidden
        dt = cfg.np_dtype
        rng = np.random.default_rng(cfg.seed)
        p: dict[str, np.ndarray] = {}

        p["down_w"] = _uniform(rng, (cg, c, 1, 1), c, dt)
        p["down_b"] = np.zeros(cg, dtype=dt)
        if self.enable_lim:
            if cfg.lim_decompose:
                p["lim_u"] = _uniform(rng, (cg, cfg.lim_rank), cfg.lim_rank, dt)
                p["lim_v"] = _uniform(rng, (k * k, cfg.lim_rank), cfg.lim_rank, dt)
            elif cfg.lim_depthwise:
                p["lim_kernel"] = _uniform(rng, (cg, 1, k, k), k * k, dt)
            else:
                p["lim_kernel"] = _uniform(rng, (cg, cg, k, k), cg * k * k, dt)
        if self.enable_fam:
            if cfg.fam_depthwise:
                p["fam_mag_w"] = np.ones(cg, dtype=dt)
                p["fam_mag_b"] = np.zeros(cg, dtype=dt)
                p["fam_pha_w"] = np.ones(cg, dtype=dt)
                p["fam_pha_b"] = np.zeros(cg, dtype=dt)
                p["fam_scale_w"] = _uniform(rng, (cg,), 1, dt)
                p["fam_scale_b"] = np.zeros(cg, dtype=dt)
            else:
                eye = np.eye(cg, dtype=dt)
                p["fam_mag_w"] = eye.copy()
                p["fam_mag_b"] = np.zeros(cg, dtype=dt)
                p["fam_pha_w"] = eye.copy()
                p["fam_pha_b"] = np.zeros(cg, dtype=dt)
                p["fam_scale_w"] = _uniform(rng, (cg, cg), cg, dt)
                p["fam_scale_b"] = np.zeros(cg, dtype=dt)
        if self.enable_csm:
            p["csm_mask_w"] = _uniform(rng, (1, cg, 1, 1), cg, dt)
            p["csm_mask_b"] = np.zeros(1, dtype=dt)
            p["csm_ffn_w1"] = _uniform(rng, (h, cg), cg, dt)
            p["csm_ffn_b1"] = np.zeros(h, dtype=dt)
            p["csm_ffn_w2"] = _uniform(rng, (cg, h), h, dt)
            p["csm_ffn_b2"] = np.zeros(cg, dtype=dt)
        p["up_w"] = np.zeros((c, cg, 1, 1), dtype=dt)
        p["up_b"] = np.zeros(c, dtype=dt)
        return {name: Tensor(arr, requires_grad=True) for name, arr in p.items()}

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def masked(self, enable_lim: bool, enable_fam: bool, enable_csm: bool) -> "AdaptIR":
        """Forward variant with branches toggled; shares parameter tensors.

        Disabled branches contribute exact zeros and drop out of the
        parameter listing; a branch can only be enabled if it was built.
        """
        if not (enable_lim or enable_fam or enable_csm):
            raise ConfigError("at least one branch must be enabled")
        for want, have, name in ((enable_lim, self.enable_lim, "lim"),
                                 (enable_fam, self.enable_fam, "fam"),
                                 (enable_csm, self.enable_csm, "csm")):
            if want and not have:
                raise ConfigError(f"branch {name} was not constructed")
        clone = object.__new__(AdaptIR)
        clone.config = self.config
        clone.enable_lim, clone.enable_fam, clone.enable_csm = (
            enable_lim, enable_fam, enable_csm)
        drop = []
        if not enable_lim:
            drop.append("lim_")
        if not enable_fam:
            drop.append("fam_")
        if not enable_csm:
            drop.append("csm_")
        clone.params = {k: v for k, v in self.params.items()
                        if not any(k.startswith(d) for d in drop)}
        return clone

    # -- branches ---------------------------------------------------------

    def down_project(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.config.channels:
            raise ShapeError(
                f"expected {self.config.channels} channels, got {x.shape[1]}")
        return T.conv2d(x, self.params["down_w"], self.params["down_b"])

    def compose_kernel(self) -> Tensor:
        """Local-branch kernel; factorized as U V^T when decomposition is on."""
        cfg = self.config
        if not cfg.lim_decompose:
            return self.params["lim_kernel"]
        w2d = T.matmul(self.params["lim_u"],
                       T.transpose(self.params["lim_v"], (1, 0)))
        return T.reshape(w2d, (cfg.intrinsic, 1, cfg.kernel, cfg.kernel))

    def lim_forward(self, x_intrin: Tensor) -> Tensor:
        cg = self.config.intrinsic
        if x_intrin.shape[1] != cg:
            raise ShapeError(f"expected {cg} intrinsic channels, got {x_intrin.shape[1]}")
        kernel = self.compose_kernel()
        groups = cg if self.config.lim_depthwise else 1
        return T.conv2d(x_intrin, kernel, None, groups=groups)

    def _freq_affine(self, t: Tensor, w: Tensor, b: Tensor) -> Tensor:
        # t is N x Cg x H x Wh; depthwise form scales each channel,
        # the full form mixes channels per frequency bin.
        if self.config.fam_depthwise:
            cg = self.config.intrinsic
            return t * T.reshape(w, (1, cg, 1, 1)) + T.reshape(b, (1, cg, 1, 1))
        moved = T.transpose(t, (0, 2, 3, 1))
        mixed = T.matmul(moved, T.transpose(w, (1, 0))) + b
        return T.transpose(mixed, (0, 3, 1, 2))

    def fam_forward(self, x_intrin: Tensor, include_scale: bool = True) -> Tensor:
        p = self.params
        spec = rfft2(x_intrin)
        mag = T.hypot(spec.real, spec.imag)
        pha = T.atan2(spec.imag, spec.real)
        mag = self._freq_affine(mag, p["fam_mag_w"], p["fam_mag_b"])
        pha = self._freq_affine(pha, p["fam_pha_w"], p["fam_pha_b"])
        out = irfft2(ComplexSpectrum(mag * T.cos(pha), mag * T.sin(pha),
                                     spec.original_width))
        if include_scale:
            out = self._freq_affine(out, p["fam_scale_w"], p["fam_scale_b"])
        return out

    def csm_forward(self, x_intrin: Tensor) -> Tensor:
        p = self.params
        cg = self.config.intrinsic
        if x_intrin.shape[1] != cg:
            raise ShapeError(f"expected {cg} intrinsic channels, got {x_intrin.shape[1]}")
        mask = T.softmax_spatial(
            T.conv2d(x_intrin, p["csm_mask_w"], p["csm_mask_b"]))
        pooled = T.tsum(mask * x_intrin, axis=(2, 3))  # N x Cg
        hidden = T.gelu(T.matmul(pooled, T.transpose(p["csm_ffn_w1"], (1, 0)))
                        + p["csm_ffn_b1"])
        shift = T.matmul(hidden, T.transpose(p["csm_ffn_w2"], (1, 0))) + p["csm_ffn_b2"]
        n = x_intrin.shape[0]
        return T.reshape(shift, (n, cg, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        """Adapter output (the caller adds it to the frozen sublayer output)."""
        xi = self.down_project(x)
        ensem: Tensor | None = None
        for enabled, branch in ((self.enable_lim, self.lim_forward),
                                (self.enable_fam, self.fam_forward),
                                (self.enable_csm, self.csm_forward)):
            if not enabled:
                continue
            out = branch(xi)
            ensem = out if ensem is None else ensem + out
        if ensem.shape[-2:] != xi.shape[-2:]:
            # only the channel vector survived; broadcast it over H x W
            ensem = ensem + Tensor(np.zeros((1, 1) + xi.shape[-2:], dtype=xi.dtype))
        return T.conv2d(ensem, self.params["up_w"], self.params["up_b"])

    __call__ = forward
