"""Procedural image synthesis, degradation operators and PPM/PGM I/O.

Everything here is a pure, seeded function: images are CHW float32
arrays in [0, 1], 8-bit quantization happens only at the file boundary,
and every degradation is a deterministic function of (image, spec, seed).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegradationSpec",
    "parse_task",
    "synth_image",
    "downsample_bicubic",
    "add_gaussian_noise",
    "degrade",
    "load_ppm",
    "save_ppm",
    "derive_seed",
    "epoch_order",
    "PPMError",
]


class PPMError(ValueError):
    pass


def derive_seed(root: int, *parts) -> int:
    """Stable named substream: fold (root, parts) through SHA-256."""
    h = hashlib.sha256(repr((int(root),) + tuple(parts)).encode()).digest()
    return int.from_bytes(h[:8], "little")


def epoch_order(corpus_seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic per-epoch reshuffle of n items."""
    return np.random.default_rng(derive_seed(corpus_seed, "shuffle", epoch)).permutation(n)


# -- degradation specs ----------------------------------------------------


@dataclass(frozen=True)
class DegradationSpec:
    """Declarative degradation chain.

    kinds: ``sr`` (bicubic downsample by ``scale``), ``noise`` (Gaussian,
    ``sigma`` on the 0-255 scale), ``second_order`` (downsample THEN
    noise), ``darken`` (multiply by ``factor`` then gamma curve).
    """

    kind: str
    scale: int = 1
    sigma: float = 0.0
    factor: float = 1.0
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sr", "noise", "second_order", "darken"):
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.kind in ("sr", "second_order") and self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def sr_scale(self) -> int:
        """Spatial shrink factor of the degraded image (1 for same-size)."""
        return self.scale if self.kind in ("sr", "second_order") else 1

    def task_id(self) -> str:
        if self.kind == "sr":
            return f"sr{self.scale}"
        if self.kind == "noise":
            return f"noise{_fmt(self.sigma)}"
        if self.kind == "second_order":
            return f"second_order_s{self.scale}_sig{_fmt(self.sigma)}"
        return f"darken_f{_fmt(self.factor)}_g{_fmt(self.gamma)}"


def _fmt(x: float) -> str:
    return f"{x:g}"


_TASK_RES = [
    (re.compile(r"^sr(\d+)$"), lambda m: DegradationSpec("sr", scale=int(m[1]))),
    (re.compile(r"^noise([\d.]+)$"), lambda m: DegradationSpec("noise", sigma=float(m[1]))),
    (re.compile(r"^second_order_s(\d+)_sig([\d.]+)$"),
     lambda m: DegradationSpec("second_order", scale=int(m[1]), sigma=float(m[2]))),
    (re.compile(r"^darken_f([\d.]+)_g([\d.]+)$"),
     lambda m: DegradationSpec("darken", factor=float(m[1]), gamma=float(m[2]))),
]


def parse_task(spec: str) -> DegradationSpec:
    """Parse task ids like sr2, noise25, second_order_s2_sig25, darken_f0.2_g1.2."""
    for pattern, build in _TASK_RES:
        m = pattern.match(spec)
        if m:
            return build(m)
    raise ValueError(f"unrecognized task spec {spec!r}")


# -- synthesis --------------------------------------------------------------


def synth_image(seed: int, size: int, channels: int = 3) -> np.ndarray:
    """Deterministic procedural texture with smooth and structured content.

    Mixes linear gradients, a band-limited cosine field, random rectangles
    and a hard edge, then normalizes into [0, 1].
    """
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    rng = np.random.default_rng(derive_seed(seed, "synth"))
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.zeros((channels, size, size))

    for c in range(channels):
        gx, gy = rng.uniform(-1, 1, 2)
        img[c] = gx * xx + gy * yy
    for _ in range(4):
        fx, fy = rng.uniform(0.5, 4.0, 2) * rng.choice([-1, 1], 2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.1, 0.5, channels)
        wave = np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
        img += amp[:, None, None] * wave
    for _ in range(rng.integers(3, 7)):
        y0, x0 = rng.integers(0, size - 4, 2)
        hgt = int(rng.integers(3, max(4, size // 2)))
        wdt = int(rng.integers(3, max(4, size // 2)))
        img[:, y0:y0 + hgt, x0:x0 + wdt] += rng.uniform(-0.8, 0.8, channels)[:, None, None]
    # one hard half-plane edge for sharp structure
    nx, ny = rng.uniform(-1, 1, 2)
    off = rng.uniform(0.3, 0.7)
    img += 0.4 * rng.uniform(-1, 1) * (nx * xx + ny * yy > off * (nx + ny))

    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# -- bicubic resampling -------------------------------------------------------


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return np.where(ax <= 1,
                    (a + 2) * ax3 - (a + 3) * ax2 + 1,
                    np.where(ax < 2, a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, 0.0))


def _resample_matrix(n_in: int, s: int) -> np.ndarray:
    """Row-stochastic (n_in/s) x n_in matrix: anti-aliased cubic, replicated borders."""
    n_out = n_in // s
    out = np.zeros((n_out, n_in))
    radius = 2 * s
    for i in range(n_out):
        u = (i + 0.5) * s - 0.5
        lo = int(np.floor(u - radius)) + 1
        taps = np.arange(lo, lo + 2 * radius)
        w = _cubic((taps - u) / s) / s
        w = w / w.sum()
        np.add.at(out[i], np.clip(taps, 0, n_in - 1), w)
    return out


def downsample_bicubic(img: np.ndarray, s: int) -> np.ndarray:
    """Anti-aliased bicubic downsample by integer factor ``s``."""
    c, h, w = img.shape
    if h % s != 0 or w % s != 0:
        raise ValueError(f"dims {h}x{w} not divisible by scale {s}")
    if s == 1:
        return img.copy()
    mh = _resample_matrix(h, s)
    mw = _resample_matrix(w, s)
    out = np.einsum("oh,chw,pw->cop", mh, img.astype(np.float64), mw)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def add_gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """i.i.d. Gaussian noise with sigma given on the 0-255 scale."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img
    rng = np.random.default_rng(derive_seed(seed, "noise"))
    noisy = img + (sigma / 255.0) * rng.standard_normal(img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def degrade(img: np.ndarray, spec: DegradationSpec) -> tuple[np.ndarray, np.ndarray]:
    """Apply a degradation chain; returns (low-quality, high-quality)."""
    hq = img
    if spec.kind == "sr":
        lq = downsample_bicubic(img, spec.scale)
    elif spec.kind == "noise":
        lq = add_gaussian_noise(img, spec.sigma, spec.seed)
    elif spec.kind == "second_order":
        # downsample strictly before noise
        lq = add_gaussian_noise(downsample_bicubic(img, spec.scale), spec.sigma, spec.seed)
    else:  # darken
        lq = np.clip((img * spec.factor) ** spec.gamma, 0.0, 1.0).astype(np.float32)
    return lq, hq


# -- portable pixmap I/O -------------------------------------------------------


def save_ppm(img: np.ndarray, path) -> None:
    """Write P6 (3-channel) or P5 (1-channel), maxval 255, binary payload."""
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected CHW with 1 or 3 channels, got {img.shape}")
    c, h, w = img.shape
    magic = b"P6" if c == 3 else b"P5"
    q = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    payload = q.transpose(1, 2, 0).tobytes() if c == 3 else q[0].tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(payload)


def load_ppm(path) -> np.ndarray:
    """Read binary P6/P5 with maxval 255 back into CHW float32 in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos:pos + 1].isspace():
                pos += 1
            elif raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PPMError(f"truncated header at byte {start}")
        return raw[start:pos]

    magic = token()
    if magic == b"P3":
        raise PPMError("ASCII PPM (P3) is not supported, use binary P6")
    if magic not in (b"P6", b"P5"):
        raise PPMError(f"unknown magic {magic!r} at byte 0")
    channels = 3 if magic == b"P6" else 1
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise PPMError(f"malformed header near byte {pos}: {exc}") from None
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval} (only 255)")
    pos += 1  # single whitespace byte after maxval
    need = w * h * channels
    payload = raw[pos:pos + need]
    if len(payload) != need:
        raise PPMError(
            f"truncated payload at byte {pos + len(payload)}: need {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)
