"""Three-branch adapter: parameter counting oracle, zero-init no-op,
per-branch compositional oracles in plain numpy, branch masking."""

import numpy as np
import pytest

from adaptir import fft as F
from adaptir import tensor as T
from adaptir.adapter import AdaptIR, AdaptIRConfig, ConfigError
from adaptir.tensor import Tensor, no_grad


def count_oracle(cfg: AdaptIRConfig) -> int:
    """Independent arithmetic for the trainable parameter count."""
    c, cg, k, r, h = (cfg.channels, cfg.channels // cfg.reduction, cfg.kernel,
                      cfg.lim_rank, cfg.channels // cfg.reduction
                      if cfg.ffn_hidden is None else cfg.ffn_hidden)
    n = c * cg + cg                       # down projection 1x1 (+bias)
    if cfg.lim_decompose:
        n += cg * r + k * k * r           # U and V factors
    else:
        cin = 1 if cfg.lim_depthwise else cg
        n += cg * cin * k * k             # full depthwise/dense kernel
    if cfg.fam_depthwise:
        n += 4 * cg                       # per-channel mag/pha scale+shift
        n += 2 * cg                       # post-iFFT scale layer
    else:
        n += 2 * (cg * cg + cg)           # full-channel affine matrices
        n += cg * cg + cg                 # full-channel scale layer
    n += cg + 1                           # CSM mask conv 1x1 (cg -> 1 map)
    n += h * cg + h + cg * h + cg         # CSM two-layer FFN
    n += cg * c + c                       # up projection 1x1 (+bias)
    return n


def test_default_count_is_1365_and_matches_oracle():
    cfg = AdaptIRConfig(channels=64, reduction=8, lim_rank=4)
    ad = AdaptIR(cfg)
    assert ad.param_count() == count_oracle(cfg) == 1365


@pytest.mark.parametrize("kwargs", [
    {},
    {"lim_decompose": False},
    {"lim_decompose": False, "lim_depthwise": False},
    {"fam_depthwise": False},
    {"channels": 32, "reduction": 4, "lim_rank": 2},
    {"ffn_hidden": 16},
])
def test_count_matches_oracle_across_configs(kwargs):
    cfg = AdaptIRConfig(channels=kwargs.pop("channels", 64), **kwargs)
    assert AdaptIR(cfg).param_count() == count_oracle(cfg)


def test_zero_init_output_is_exactly_zero():
    rng = np.random.default_rng(0)
    ad = AdaptIR(AdaptIRConfig(channels=16, reduction=4, lim_rank=2, seed=3))
    x = Tensor(rng.standard_normal((2, 16, 8, 8)).astype(np.float32))
    with no_grad():
        out = ad(x)
    assert out.shape == x.shape
    assert np.all(out.data == 0.0)


def randomized(cfg, seed=0):
    ad = AdaptIR(cfg)
    rng = np.random.default_rng(seed)
    for p in ad.params.values():
        p.data = p.data + 0.2 * rng.standard_normal(p.shape)
    return ad


def test_config_validation():
    with pytest.raises(ConfigError):
        AdaptIRConfig(channels=64, reduction=7).validate()
    with pytest.raises(ConfigError):
        AdaptIRConfig(channels=64, kernel=4).validate()
    with pytest.raises(ConfigError):
        AdaptIRConfig(channels=64, lim_rank=0).validate()
    with pytest.raises(ConfigError):
        AdaptIR(AdaptIRConfig(channels=64), branches=(False, False, False))


# -- compositional branch oracles in plain numpy ---------------------------------


def np_conv_same(x, w, b=None, groups=1):
    out = T.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b),
                   groups=groups)
    return out.data


def test_lim_branch_equals_numpy_composition():
    cfg = AdaptIRConfig(channels=8, reduction=2, lim_rank=2, dtype="f64")
    ad = randomized(cfg, 1)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 8, 6, 6))
    with no_grad():
        xi = ad.down_project(Tensor(x))
        got = ad.lim_forward(xi).data
    p = {k: v.data for k, v in ad.params.items()}
    cg, k = 4, 3
    kernel = (p["lim_u"] @ p["lim_v"].T).reshape(cg, 1, k, k)
    expect = np_conv_same(xi.data, kernel, groups=cg)
    assert np.abs(got - expect).max() < 1e-12


def test_lim_full_rank_kernel_used_directly():
    cfg = AdaptIRConfig(channels=8, reduction=2, lim_decompose=False, dtype="f64")
    ad = randomized(cfg, 3)
    rng = np.random.default_rng(4)
    xi = Tensor(rng.standard_normal((1, 4, 5, 5)))
    with no_grad():
        got = ad.lim_forward(xi).data
    expect = np_conv_same(xi.data, ad.params["lim_kernel"].data, groups=4)
    assert np.abs(got - expect).max() < 1e-12


def test_composed_kernel_rank_bounded():
    for r in (1, 2, 4):
        cfg = AdaptIRConfig(channels=64, reduction=8, lim_rank=r, dtype="f64")
        ad = randomized(cfg, r)
        m = ad.params["lim_u"].data @ ad.params["lim_v"].data.T
        sv = np.linalg.svd(m, compute_uv=False)
        assert np.all(sv[r:] < 1e-10)


def test_fam_branch_equals_numpy_composition():
    cfg = AdaptIRConfig(channels=8, reduction=2, dtype="f64")
    ad = randomized(cfg, 5)
    rng = np.random.default_rng(6)
    xi = Tensor(rng.standard_normal((2, 4, 6, 6)))
    with no_grad():
        got = ad.fam_forward(xi, include_scale=False).data
    p = {k: v.data for k, v in ad.params.items()}
    # numpy oracle: affine on the stored half spectrum in polar form, then
    # Hermitian completion and an inverse FFT
    spec = np.fft.fft2(xi.data) / 36.0
    half = spec[..., : 6 // 2 + 1].copy()
    # structurally real bins carry an exact zero imaginary part, so their
    # phase is atan2(+0, re); scrub the fp dust np.fft leaves there
    for (bi, bj) in [(0, 0), (0, 3), (3, 0), (3, 3)]:
        half[..., bi, bj] = half[..., bi, bj].real
    hm = np.abs(half) * p["fam_mag_w"].reshape(1, 4, 1, 1) + p["fam_mag_b"].reshape(1, 4, 1, 1)
    hp = np.angle(half) * p["fam_pha_w"].reshape(1, 4, 1, 1) + p["fam_pha_b"].reshape(1, 4, 1, 1)
    newhalf = hm * np.cos(hp) + 1j * hm * np.sin(hp)
    full = np.zeros_like(spec)
    full[..., :4] = newhalf
    rows = (6 - np.arange(6)) % 6
    full[..., 4:] = np.conj(newhalf[..., rows, :][..., :, [2, 1]])
    expect = np.fft.ifft2(full * 36.0).real
    assert np.abs(got - expect).max() < 1e-10


def test_fam_identity_at_init_pre_scale():
    ad = AdaptIR(AdaptIRConfig(channels=16, reduction=4, seed=9))
    rng = np.random.default_rng(10)
    xi = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
    with no_grad():
        out = ad.fam_forward(xi, include_scale=False)
    assert np.abs(out.data - xi.data).max() < 1e-5


def test_fam_full_channel_identity_init():
    ad = AdaptIR(AdaptIRConfig(channels=16, reduction=4, fam_depthwise=False, seed=9))
    assert np.allclose(ad.params["fam_mag_w"].data, np.eye(4))
    rng = np.random.default_rng(11)
    xi = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
    with no_grad():
        out = ad.fam_forward(xi, include_scale=False)
    assert np.abs(out.data - xi.data).max() < 1e-5


def test_csm_branch_equals_numpy_composition():
    cfg = AdaptIRConfig(channels=8, reduction=2, dtype="f64")
    ad = randomized(cfg, 7)
    rng = np.random.default_rng(8)
    xi = rng.standard_normal((2, 4, 5, 5))
    with no_grad():
        got = ad.csm_forward(Tensor(xi)).data
    p = {k: v.data for k, v in ad.params.items()}

    def gelu(z):
        from scipy.special import erf
        return z * 0.5 * (1.0 + erf(z / np.sqrt(2.0)))

    mask = np_conv_same(xi, p["csm_mask_w"], p["csm_mask_b"])
    expect = np.zeros((2, 4, 1, 1))
    for n in range(2):
        m = mask[n].reshape(-1)
        sm = np.exp(m - m.max())
        sm /= sm.sum()
        pooled = (xi[n].reshape(4, -1) * sm).sum(axis=1)
        h = gelu(p["csm_ffn_w1"] @ pooled + p["csm_ffn_b1"])
        expect[n, :, 0, 0] = p["csm_ffn_w2"] @ h + p["csm_ffn_b2"]
    assert np.abs(got - expect).max() < 1e-12


def test_forward_is_sum_of_branches_through_up_projection():
    cfg = AdaptIRConfig(channels=8, reduction=2, dtype="f64")
    ad = randomized(cfg, 12)
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((2, 8, 6, 6)))
    with no_grad():
        full = ad(x).data
        xi = ad.down_project(x)
        ens = (ad.lim_forward(xi) + ad.fam_forward(xi)).data + ad.csm_forward(xi).data
        expect = np_conv_same(ens, ad.params["up_w"].data, ad.params["up_b"].data)
    assert np.abs(full - expect).max() < 1e-12


def test_branch_masking_isolates_and_excludes_params():
    cfg = AdaptIRConfig(channels=8, reduction=2, dtype="f64")
    ad = randomized(cfg, 14)
    rng = np.random.default_rng(15)
    x = Tensor(rng.standard_normal((1, 8, 6, 6)))
    with no_grad():
        lim_only = ad.masked(True, False, False)
        xi = ad.down_project(x)
        expect = np_conv_same(ad.lim_forward(xi).data, ad.params["up_w"].data,
                              ad.params["up_b"].data)
        assert np.abs(lim_only(x).data - expect).max() < 1e-12
    # masked variants share tensors but drop disabled-branch params
    names = set(lim_only.parameters())
    assert not any(n.startswith(("fam_", "csm_")) for n in names)
    assert lim_only.parameters()["lim_u"] is ad.params["lim_u"]
    # count ordering: csm-only < fam+csm < lim+fam+csm
    c1 = ad.masked(False, False, True).param_count()
    c2 = ad.masked(False, True, True).param_count()
    c3 = ad.masked(True, True, True).param_count()
    assert c1 < c2 < c3 == ad.param_count()


def test_gradients_flow_to_every_parameter():
    cfg = AdaptIRConfig(channels=8, reduction=2, dtype="f64")
    ad = randomized(cfg, 16)
    rng = np.random.default_rng(17)
    x = Tensor(rng.standard_normal((2, 8, 6, 6)))
    T.tsum(T.tabs(ad(x))).backward()
    for name, p in ad.params.items():
        assert p.grad is not None, name
        assert np.any(p.grad != 0.0), name
