"""Illumination maps, brighten/darken transforms and the pseudo-normal generator."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_FLOOR = 1e-3


class ShapeError(ValueError):
    pass


def _conv_block(cin: int, cout: int, convs: int = 2) -> nn.Sequential:
    layers: list[nn.Module] = []
    for k in range(convs):
        layers += [nn.Conv2d(cin if k == 0 else cout, cout, 3, padding=1), nn.LeakyReLU(0.2, inplace=True)]
    return nn.Sequential(*layers)


class IlluminationExtractor(nn.Module):
    """UNet mapping an image to an illumination map in ``[floor, 1]``.

    ``depth`` pooling stages with widths ``width * 2**k``, double-conv
    encoder stages, single-conv bottleneck and decoder stages, skips by
    concatenation. The head is a sigmoid rescaled onto ``[floor, 1]``.
    """

    def __init__(self, depth: int = 3, width: int = 16, out_channels: int = 1, floor: float = DEFAULT_FLOOR):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = depth
        self.floor = floor
        widths = [width * 2**k for k in range(depth + 1)]
        self.enc = nn.ModuleList()
        cin = 3
        for w in widths[:-1]:
            self.enc.append(_conv_block(cin, w))
            cin = w
        self.bottleneck = _conv_block(widths[-2], widths[-1], convs=1)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for k in reversed(range(depth)):
            self.up.append(nn.ConvTranspose2d(widths[k + 1], widths[k], 2, stride=2))
            self.dec.append(_conv_block(2 * widths[k], widths[k], convs=1))
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        m = 2**self.depth
        if h % m or w % m:
            raise ShapeError(f"spatial size {h}x{w} is not divisible by {m}; pad the input first")
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.floor + (1.0 - self.floor) * torch.sigmoid(self.head(x))


def brighten(img: torch.Tensor, lum: torch.Tensor, floor: float = DEFAULT_FLOOR) -> torch.Tensor:
    """``img / max(lum, floor)``; a 1-channel ``lum`` broadcasts over RGB."""
    return img / lum.clamp(min=floor)


def darken(img: torch.Tensor, lum: torch.Tensor, floor: float = DEFAULT_FLOOR) -> torch.Tensor:
    """``1 - (1 - img) / max(lum, floor)``, where ``lum`` comes from the inverted image."""
    return 1.0 - (1.0 - img) / lum.clamp(min=floor)


class PseudoNormalGenerator(nn.Module):
    """Fuses brightened, darkened and input images into a pseudo-normal map.

    Each of the three inputs goes through the same 1x1 embedding; the
    embeddings are concatenated and passed through three 3x3 convolutions,
    with a residual connection from the input image. ``embed`` may be a
    module owned by someone else (weight tying with the modulation block).
    """

    def __init__(self, width: int = 16, embed: nn.Conv2d | None = None, embed_dim: int = 8):
        super().__init__()
        if embed is None:
            self.embed = nn.Conv2d(3, embed_dim, 1)
            self.shared_embed = None
        else:
            # keep the shared conv out of this module's parameter tree
            self.embed = None
            self.shared_embed = [embed]
            embed_dim = embed.out_channels
        self.body = nn.Sequential(
            nn.Conv2d(3 * embed_dim, width, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def _embed(self, x: torch.Tensor) -> torch.Tensor:
        conv = self.embed if self.embed is not None else self.shared_embed[0]
        return conv(x)

    def forward(self, fb: torch.Tensor, fd: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
        if not (fb.shape[-2:] == fd.shape[-2:] == img.shape[-2:]):
            raise ShapeError("brightened, darkened and input maps must share spatial size")
        feats = torch.cat([self._embed(fb), self._embed(fd), self._embed(img)], dim=1)
        return img + self.body(feats)
