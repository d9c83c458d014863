import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from torchvision.ops import deform_conv2d

from exposhift.cose import (
    DEFORM_MODES,
    CoseModule,
    OffsetBundle,
    bilinear_sample,
    color_deformable_conv,
    color_deformable_conv_reference,
    kernel_grid,
)


def _random_bundle(g, b, h, w, n=9, scale=1.5, dtype=torch.float32):
    dp = scale * torch.randn(b, 2 * n, h, w, generator=g, dtype=dtype)
    dc = 0.3 * torch.randn(b, 3 * n, h, w, generator=g, dtype=dtype)
    dm = torch.rand(b, n, h, w, generator=g, dtype=dtype)
    return OffsetBundle(dp, dc, dm)


def test_kernel_grid_is_row_major():
    assert kernel_grid(3)[:4] == [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
    assert len(kernel_grid(5)) == 25


def test_bilinear_sample_exact_at_integers_and_zero_outside():
    feat = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4)
    np.testing.assert_array_equal(bilinear_sample(feat, 1, 2), feat[:, 1, 2])
    np.testing.assert_allclose(bilinear_sample(feat, 0.5, 0.5), feat[:, :2, :2].mean(axis=(1, 2)))
    np.testing.assert_array_equal(bilinear_sample(feat, -5, 0), [0, 0])


def test_bilinear_sample_continuous():
    feat = np.random.default_rng(0).random((3, 5, 5))
    a = bilinear_sample(feat, 2.0 - 1e-9, 1.3)
    b = bilinear_sample(feat, 2.0 + 1e-9, 1.3)
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_degenerate_offsets_equal_plain_conv():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 16, 16, generator=g)
    w = torch.randn(3, 3, 3, 3, generator=g)
    zero = OffsetBundle(torch.zeros(2, 18, 16, 16), torch.zeros(2, 27, 16, 16), torch.ones(2, 9, 16, 16))
    y = color_deformable_conv(x, zero, w)
    assert float((y - F.conv2d(x, w, padding=1)).abs().max()) <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_matches_loop_reference(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 3, 6, 7, generator=g, dtype=torch.float64)
    w = torch.randn(3, 3, 3, 3, generator=g, dtype=torch.float64)
    bd = _random_bundle(g, 1, 6, 7, dtype=torch.float64)
    y = color_deformable_conv(x, bd, w)[0].numpy()
    ref = color_deformable_conv_reference(x[0], bd.dp[0], bd.dc[0], bd.dm[0], w)
    np.testing.assert_allclose(y, ref, atol=1e-10)


def test_matches_torchvision_modulated_deform_conv_when_dc_is_zero():
    g = torch.Generator().manual_seed(7)
    x = torch.rand(2, 3, 10, 9, generator=g, dtype=torch.float64)
    w = torch.randn(3, 3, 3, 3, generator=g, dtype=torch.float64)
    bd = _random_bundle(g, 2, 10, 9, dtype=torch.float64)
    bd = OffsetBundle(bd.dp, torch.zeros_like(bd.dc), bd.dm)
    ours = color_deformable_conv(x, bd, w)
    ref = deform_conv2d(x, bd.dp, w, padding=1, mask=bd.dm)
    assert float((ours - ref).abs().max()) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_color_offset_shift_is_linear(seed, d0, d1, d2):
    # a constant delta added to every dc shifts the output by (sum_n dm_n) * delta
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 3, 5, 5, generator=g, dtype=torch.float64)
    w = torch.randn(3, 3, 3, 3, generator=g, dtype=torch.float64)
    bd = _random_bundle(g, 1, 5, 5, dtype=torch.float64)
    delta = torch.tensor([d0, d1, d2], dtype=torch.float64)
    shifted = OffsetBundle(bd.dp, bd.dc + delta.repeat(9).view(1, 27, 1, 1), bd.dm)
    diff = color_deformable_conv(x, shifted, w) - color_deformable_conv(x, bd, w)
    expected = bd.dm.sum(dim=1, keepdim=True) * delta.view(1, 3, 1, 1)
    assert float((diff - expected).abs().max()) <= 1e-10


def test_bundle_shape_mismatch_rejected():
    x = torch.rand(1, 3, 4, 4)
    bad = OffsetBundle(torch.zeros(1, 8, 4, 4), torch.zeros(1, 27, 4, 4), torch.ones(1, 9, 4, 4))
    with pytest.raises(ValueError):
        color_deformable_conv(x, bad, torch.randn(3, 3, 3, 3))


def test_zero_heads_identity_kernel_gives_half_input():
    mod = CoseModule("full")
    with torch.no_grad():
        mod.weight.zero_()
        mod.weight[:, :, 1, 1] = torch.eye(3)
    fx = torch.rand(1, 3, 8, 8)
    with torch.no_grad():
        out = mod(torch.rand(1, 3, 8, 8), fx)
    assert torch.allclose(out, 0.5 * fx, atol=1e-7)


@pytest.mark.parametrize("mode", DEFORM_MODES)
def test_modes_build_expected_heads(mode):
    mod = CoseModule(mode)
    heads = {k for k in ("offset_head", "color_head", "modulation_head") if getattr(mod, k) is not None}
    expected = {
        "none": set(),
        "spatial": {"offset_head"},
        "spatial+modulation": {"offset_head", "modulation_head"},
        "spatial+color": {"offset_head", "color_head"},
        "full": {"offset_head", "color_head", "modulation_head"},
    }[mode]
    assert heads == expected
    x = torch.rand(2, 3, 8, 8)
    with torch.no_grad():
        assert mod(torch.rand_like(x), x).shape == x.shape


def test_none_mode_is_plain_conv():
    mod = CoseModule("none")
    x = torch.rand(1, 3, 8, 8)
    with torch.no_grad():
        assert torch.equal(mod(x, x), F.conv2d(x, mod.weight, padding=1))


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        CoseModule("spatial+everything")


def test_gradients_reach_all_offset_heads():
    mod = CoseModule("full")
    with torch.no_grad():
        for h in (mod.offset_head, mod.color_head, mod.modulation_head):
            h.weight.normal_(0, 0.1)
    fx = torch.rand(1, 3, 8, 8)
    mod(torch.rand_like(fx), fx).square().sum().backward()
    for h in (mod.offset_head, mod.color_head, mod.modulation_head):
        assert float(h.weight.grad.abs().sum()) > 0
