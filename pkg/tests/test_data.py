"""Degradation pipeline and PPM I/O: separable-resampling oracle, noise
statistics, task-spec parsing, byte-level image round trips."""

import io
import numpy as np
import pytest

from adaptir.data import (DegradationSpec, PPMError, add_gaussian_noise, degrade,
                          derive_seed, downsample_bicubic, epoch_order, load_ppm,
                          parse_task, save_ppm, synth_image)


def test_derive_seed_is_stable_and_sensitive():
    a = derive_seed(0, "corpus", 1)
    assert a == derive_seed(0, "corpus", 1)
    assert a != derive_seed(0, "corpus", 2)
    assert a != derive_seed(1, "corpus", 1)
    assert 0 <= a < 2 ** 63


def test_epoch_order_is_a_permutation_and_varies_by_epoch():
    o0 = epoch_order(5, 0, 16)
    o1 = epoch_order(5, 1, 16)
    assert sorted(o0) == list(range(16))
    assert not np.array_equal(o0, o1)
    assert np.array_equal(o0, epoch_order(5, 0, 16))


def test_synth_image_properties():
    img = synth_image(3, 48)
    assert img.shape == (3, 48, 48)
    assert img.dtype == np.float32
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert np.array_equal(img, synth_image(3, 48))
    assert not np.array_equal(img, synth_image(4, 48))


# -- task parsing -----------------------------------------------------------------


def test_parse_task_round_trips():
    for token in ("sr2", "sr4", "noise25", "noise0",
                  "second_order_s2_sig25", "darken_f0.2_g1.2"):
        spec = parse_task(token)
        assert spec.task_id() == token
    assert parse_task("sr2").sr_scale == 2
    assert parse_task("noise25").sr_scale == 1
    assert parse_task("second_order_s3_sig10").scale == 3
    d = parse_task("darken_f0.5_g1.0")
    assert (d.factor, d.gamma) == (0.5, 1.0)


def test_parse_task_rejects_garbage():
    for bad in ("sr", "sr0", "noise", "blur3", "second_order", "darken_f_g"):
        with pytest.raises(ValueError):
            parse_task(bad)


# -- bicubic downsampling -----------------------------------------------------------


def cubic_kernel(x, a=-0.5):
    x = abs(float(x))
    if x < 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x < 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def downsample_1d_oracle(row, s):
    """Direct antialiased bicubic resampling of one row: kernel stretched
    by the scale factor, taps clipped to the border, weights normalized."""
    n = len(row)
    out = np.zeros(n // s)
    for o in range(n // s):
        center = (o + 0.5) * s - 0.5
        lo = int(np.floor(center)) - 2 * s + 1
        acc = wsum = 0.0
        for t in range(lo, lo + 4 * s):
            w = cubic_kernel((t - center) / s)
            src = min(max(t, 0), n - 1)
            acc += w * row[src]
            wsum += w
        out[o] = acc / wsum
    return out


@pytest.mark.parametrize("s", [2, 3, 4])
def test_downsample_matches_separable_oracle(s):
    rng = np.random.default_rng(s)
    img = rng.random((3, 4 * s, 4 * s)).astype(np.float32)
    got = downsample_bicubic(img, s)
    assert got.shape == (3, 4, 4)
    # separable oracle: resample columns, then rows
    tmp = np.stack([[downsample_1d_oracle(img[c, :, j], s) for j in range(4 * s)]
                    for c in range(3)])           # (3, W, H/s) columns first
    tmp = tmp.transpose(0, 2, 1)                  # (3, H/s, W)
    expect = np.stack([[downsample_1d_oracle(tmp[c, i, :], s) for i in range(4)]
                       for c in range(3)])
    expect = np.clip(expect, 0.0, 1.0)
    assert np.abs(got - expect).max() < 1e-5


def test_downsample_preserves_constant_images():
    img = np.full((3, 12, 12), 0.37, dtype=np.float32)
    out = downsample_bicubic(img, 2)
    assert np.abs(out - 0.37).max() < 1e-6


def test_downsample_scale_one_is_identity():
    img = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
    out = downsample_bicubic(img, 1)
    assert np.array_equal(out, img)
    assert out is not img  # a copy, not an alias


# -- noise ---------------------------------------------------------------------------


def test_gaussian_noise_moments():
    img = np.full((3, 128, 128), 0.5, dtype=np.float32)
    noisy = add_gaussian_noise(img, sigma=25.0, seed=7)
    resid = noisy - img
    assert abs(resid.mean()) < 1e-3
    assert abs(resid.std() - 25.0 / 255.0) < 1e-3
    assert noisy.min() >= 0.0 and noisy.max() <= 1.0
    assert np.array_equal(noisy, add_gaussian_noise(img, 25.0, 7))
    assert not np.array_equal(noisy, add_gaussian_noise(img, 25.0, 8))


def test_gaussian_noise_sigma_zero_identity():
    img = np.random.default_rng(1).random((3, 8, 8)).astype(np.float32)
    assert np.array_equal(add_gaussian_noise(img, 0.0, 3), img)


# -- degradation chains ------------------------------------------------------


def test_degrade_shapes_and_hq_passthrough():
    img = synth_image(0, 32)
    lq, hq = degrade(img, parse_task("sr2"))
    assert lq.shape == (3, 16, 16) and hq.shape == (3, 32, 32)
    assert np.array_equal(hq, img)
    lq, _ = degrade(img, DegradationSpec(kind="noise", sigma=25.0, seed=4))
    assert lq.shape == img.shape


def test_second_order_is_downsample_then_noise():
    img = synth_image(1, 32)
    spec = DegradationSpec(kind="second_order", scale=2, sigma=25.0, seed=9)
    lq, _ = degrade(img, spec)
    expect = add_gaussian_noise(downsample_bicubic(img, 2), 25.0, 9)
    assert np.array_equal(lq, expect)


def test_darken_closed_form():
    img = synth_image(2, 16)
    spec = DegradationSpec(kind="darken", factor=0.2, gamma=1.2)
    lq, _ = degrade(img, spec)
    assert np.allclose(lq, np.clip((img * 0.2) ** 1.2, 0, 1), atol=1e-6)


# -- PPM I/O --------------------------------------------------------------------


def test_ppm_round_trip(tmp_path):
    img = synth_image(5, 16)
    path = tmp_path / "x.ppm"
    save_ppm(img, path)
    back = load_ppm(path)
    # quantization to 8 bits is the only loss
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-7
    save_ppm(back, tmp_path / "y.ppm")
    assert (tmp_path / "y.ppm").read_bytes() == path.read_bytes()


def test_ppm_bytes_hand_fixture(tmp_path):
    img = np.zeros((3, 1, 2), dtype=np.float32)
    img[:, 0, 0] = [1.0, 0.0, 0.0]           # red
    img[:, 0, 1] = [0.0, 0.5, 1.0]           # teal-ish
    path = tmp_path / "f.ppm"
    save_ppm(img, path)
    expect = b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 128, 255])
    assert path.read_bytes() == expect


def test_pgm_grayscale(tmp_path):
    img = np.linspace(0, 1, 16, dtype=np.float32).reshape(1, 4, 4)
    path = tmp_path / "g.pgm"
    save_ppm(img, path)
    assert path.read_bytes().startswith(b"P5\n4 4\n255\n")
    back = load_ppm(path)
    assert back.shape == (1, 4, 4)
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-7


def test_ppm_comments_and_whitespace(tmp_path):
    raw = b"P6 # binary pixmap\n# comment line\n 2\t1 \n255\n" + bytes(6)
    path = tmp_path / "c.ppm"
    path.write_bytes(raw)
    img = load_ppm(path)
    assert img.shape == (3, 1, 2)
    assert np.all(img == 0.0)


def test_ppm_rejects_ascii_and_bad_maxval(tmp_path):
    p3 = tmp_path / "a.ppm"
    p3.write_bytes(b"P3\n1 1\n255\n255 0 0\n")
    with pytest.raises(PPMError):
        load_ppm(p3)
    deep = tmp_path / "d.ppm"
    deep.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(PPMError):
        load_ppm(deep)
    short = tmp_path / "s.ppm"
    short.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(PPMError):
        load_ppm(short)
