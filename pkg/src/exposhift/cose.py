"""Color shift estimation: deformable convolution over space and color.

For every output pixel ``p0`` and kernel tap ``n``::

    y(p0) = sum_n (W_n @ x(p0 + p_n + dp_n) + dc_n) * dm_n

where ``x(.)`` is bilinear sampling with zero padding, ``W_n`` the 3x3
channel-mixing matrix of tap ``n``, ``dc_n`` a per-tap RGB offset and
``dm_n`` a modulation scalar in [0, 1].

Offset layout follows the usual modulated-deformable convention: ``dp``
holds ``(dy, dx)`` interleaved per tap, ``dc`` holds an RGB triple per tap,
taps are enumerated row-major over ``{-1, 0, 1}^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DEFORM_MODES = ("none", "spatial", "spatial+modulation", "spatial+color", "full")


def kernel_grid(k: int = 3) -> list[tuple[int, int]]:
    r = k // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


@dataclass
class OffsetBundle:
    dp: torch.Tensor  # (B, 2N, H, W)
    dc: torch.Tensor  # (B, 3N, H, W)
    dm: torch.Tensor  # (B, N, H, W)

    @property
    def taps(self) -> int:
        return self.dm.shape[1]


def bilinear_sample(feat, y: float, x: float) -> np.ndarray:
    """Sample a ``(C, H, W)`` array at fractional ``(y, x)``, zero outside.

    Scalar reference used by the loop oracles; not vectorized on purpose.
    """
    feat = np.asarray(feat, dtype=np.float64)
    c, h, w = feat.shape
    y0, x0 = math.floor(y), math.floor(x)
    ly, lx = y - y0, x - x0
    out = np.zeros(c)
    for yy, wy in ((y0, 1.0 - ly), (y0 + 1, ly)):
        for xx, wx in ((x0, 1.0 - lx), (x0 + 1, lx)):
            if 0 <= yy < h and 0 <= xx < w and wy * wx != 0.0:
                out += wy * wx * feat[:, yy, xx]
    return out


def sample_taps(x: torch.Tensor, dp: torch.Tensor, k: int = 3) -> torch.Tensor:
    """Bilinearly sample ``x`` at every deformed tap location.

    Returns ``(B, N, C, H, W)``. Differentiable in both ``x`` and ``dp``.
    """
    b, c, h, w = x.shape
    grid = kernel_grid(k)
    n = len(grid)
    dp = dp.view(b, n, 2, h, w)
    iy = torch.arange(h, dtype=x.dtype, device=x.device).view(1, 1, h, 1)
    ix = torch.arange(w, dtype=x.dtype, device=x.device).view(1, 1, 1, w)
    ky = torch.tensor([g[0] for g in grid], dtype=x.dtype, device=x.device).view(1, n, 1, 1)
    kx = torch.tensor([g[1] for g in grid], dtype=x.dtype, device=x.device).view(1, n, 1, 1)
    py = iy + ky + dp[:, :, 0]
    px = ix + kx + dp[:, :, 1]
    y0 = torch.floor(py.detach())
    x0 = torch.floor(px.detach())
    ly, lx = py - y0, px - x0
    y0, x0 = y0.long(), x0.long()

    flat = x.reshape(b, 1, c, h * w).expand(b, n, c, h * w)
    out = x.new_zeros(b, n, c, h, w)
    for dy, wy in ((0, 1.0 - ly), (1, ly)):
        for dx, wx in ((0, 1.0 - lx), (1, lx)):
            yy, xx = y0 + dy, x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            idx = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1)).view(b, n, 1, h * w).expand(b, n, c, h * w)
            vals = torch.gather(flat, 3, idx).view(b, n, c, h, w)
            out = out + vals * (wy * wx * valid).unsqueeze(2)
    return out


def color_deformable_conv(x: torch.Tensor, bundle: OffsetBundle, weight: torch.Tensor) -> torch.Tensor:
    """Apply the space-and-color deformable convolution.

    ``x`` is ``(B, 3, H, W)``, ``weight`` is ``(3, 3, k, k)`` (out, in, ky, kx).
    """
    b, c, h, w = x.shape
    k = weight.shape[-1]
    n = k * k
    if bundle.dp.shape[1] != 2 * n or bundle.dc.shape[1] != weight.shape[0] * n or bundle.dm.shape[1] != n:
        raise ValueError("offset bundle does not match the kernel size")
    taps = sample_taps(x, bundle.dp, k)
    w_taps = weight.reshape(weight.shape[0], c, n)
    mixed = torch.einsum("oin,bnihw->bnohw", w_taps, taps)
    mixed = mixed + bundle.dc.view(b, n, weight.shape[0], h, w)
    return (mixed * bundle.dm.unsqueeze(2)).sum(dim=1)


def color_deformable_conv_reference(x, dp, dc, dm, weight) -> np.ndarray:
    """Per-pixel, per-tap loop evaluation; inputs are unbatched numpy arrays."""
    x, dp, dc, dm, weight = (np.asarray(a, dtype=np.float64) for a in (x, dp, dc, dm, weight))
    cout = weight.shape[0]
    k = weight.shape[-1]
    _, h, w = x.shape
    y = np.zeros((cout, h, w))
    for i in range(h):
        for j in range(w):
            acc = np.zeros(cout)
            for n, (ky, kx) in enumerate(kernel_grid(k)):
                s = bilinear_sample(x, i + ky + dp[2 * n, i, j], j + kx + dp[2 * n + 1, i, j])
                wn = weight[:, :, ky + k // 2, kx + k // 2]
                acc += (wn @ s + dc[cout * n:cout * (n + 1), i, j]) * dm[n, i, j]
            y[:, i, j] = acc
    return y


class CoseModule(nn.Module):
    """Predicts an offset bundle from ``(F_N, F_x)`` and applies it to ``F_x``."""

    def __init__(self, deform_mode: str = "full", kernel_size: int = 3, channels: int = 3):
        super().__init__()
        if deform_mode not in DEFORM_MODES:
            raise ValueError(f"deform_mode must be one of {DEFORM_MODES}, got {deform_mode!r}")
        self.deform_mode = deform_mode
        self.kernel_size = k = kernel_size
        self.taps = n = k * k
        self.channels = channels
        self.weight = nn.Parameter(torch.empty(channels, channels, k, k))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

        def head(cout: int) -> nn.Conv2d:
            conv = nn.Conv2d(2 * channels, cout, k, padding=k // 2)
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
            return conv

        uses = {
            "none": (),
            "spatial": ("offset",),
            "spatial+modulation": ("offset", "modulation"),
            "spatial+color": ("offset", "color"),
            "full": ("offset", "color", "modulation"),
        }[deform_mode]
        self.offset_head = head(2 * n) if "offset" in uses else None
        self.color_head = head(channels * n) if "color" in uses else None
        self.modulation_head = head(n) if "modulation" in uses else None

    def predict_offsets(self, fn: torch.Tensor, fx: torch.Tensor) -> OffsetBundle:
        if fn.shape != fx.shape:
            raise ValueError(f"pseudo-normal {tuple(fn.shape)} and feature {tuple(fx.shape)} shapes differ")
        z = torch.cat([fn, fx], dim=1)
        b, _, h, w = z.shape
        n = self.taps
        dp = self.offset_head(z) if self.offset_head is not None else z.new_zeros(b, 2 * n, h, w)
        dc = self.color_head(z) if self.color_head is not None else z.new_zeros(b, self.channels * n, h, w)
        if self.modulation_head is not None:
            dm = torch.sigmoid(self.modulation_head(z))
        else:
            dm = z.new_ones(b, n, h, w)
        return OffsetBundle(dp, dc, dm)

    def forward(self, fn: torch.Tensor, fx: torch.Tensor) -> torch.Tensor:
        if self.deform_mode == "none":
            return F.conv2d(fx, self.weight, padding=self.kernel_size // 2)
        return color_deformable_conv(fx, self.predict_offsets(fn, fx), self.weight)
