"""Training objectives: pseudo-normal supervision plus the four-term output loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 0.2
    lambda4: float = 0.04
    lambda_p: float = 1.0
    lambda_o: float = 1.0
    use_ssim: bool = True
    use_vgg: bool = True
    use_pseudo: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, bool) and v < 0:
                raise ValueError(f"{f.name} must be non-negative, got {v}")


def l1_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return (pred - gt).abs().mean()


def pseudo_loss(fn: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return l1_loss(fn, gt)


def cosine_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Mean over pixels of ``1 - cos`` between RGB vectors (channel axis ``-3``)."""
    num = (pred * gt).sum(dim=-3)
    den = pred.norm(dim=-3).clamp(min=eps) * gt.norm(dim=-3).clamp(min=eps)
    return (1.0 - num / den).mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Per-window SSIM (valid positions only) for ``(B, C, H, W)`` inputs."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c = a.shape[1]
    win = gaussian_window(dtype=a.dtype).to(a.device).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(x):
        return F.conv2d(x, win, groups=c)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def ssim_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    pred, gt = _batched(pred).clamp(0, 1), _batched(gt).clamp(0, 1)
    return 1.0 - ssim_map(pred, gt).mean()


class PerceptualExtractor(nn.Module):
    """Frozen feature pyramid; subclasses fill ``self.stages``."""

    stages: nn.ModuleList

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out

    def freeze(self) -> "PerceptualExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


class RandomConvExtractor(PerceptualExtractor):
    """Seeded random-filter stand-in for a pretrained network."""

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = (16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        cin = 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(cin, w, 3, padding=1, bias=False)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (cin * 9)) ** 0.5)
            layers = [conv, nn.ReLU()]
            if i > 0:
                layers.insert(0, nn.AvgPool2d(2))
            stages.append(nn.Sequential(*layers))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.freeze()


class VGGExtractor(PerceptualExtractor):
    """VGG-16 features up to relu1_2, relu2_2 and relu3_3 from a local weights file."""

    _CUTS = (4, 9, 16)

    def __init__(self, weights_path: str | Path):
        super().__init__()
        from torchvision.models import vgg16

        weights_path = Path(weights_path)
        if not weights_path.is_file():
            raise FileNotFoundError(f"VGG weights not found: {weights_path}")
        net = vgg16()
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
        feats = net.features
        bounds = (0,) + self._CUTS
        self.stages = nn.ModuleList(nn.Sequential(*feats[a:b]) for a, b in zip(bounds, bounds[1:]))
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.freeze()

    def features(self, x):
        return super().features((x - self.mean) / self.std)


def build_extractor(weights_path: str | Path | None = None, allow_fallback: bool = True, seed: int = 0):
    """VGG-16 features from a local weights file, else a frozen random-conv stand-in."""
    if weights_path is not None:
        try:
            return VGGExtractor(weights_path)
        except (FileNotFoundError, RuntimeError) as exc:
            if not allow_fallback:
                raise
            log.warning("cannot load VGG weights (%s); using random-conv perceptual features", exc)
    elif not allow_fallback:
        raise FileNotFoundError("no perceptual weights configured and fallback disabled")
    else:
        log.info("no VGG weights configured; using random-conv perceptual features")
    return RandomConvExtractor(seed)


def perceptual_loss(pred: torch.Tensor, gt: torch.Tensor, feat: PerceptualExtractor) -> torch.Tensor:
    pred, gt = _batched(pred), _batched(gt)
    fp, fg = feat.features(pred), feat.features(gt)
    return sum(l1_loss(a, b) for a, b in zip(fp, fg)) / len(fp)


def total_loss(pred, fn, gt, w: LossWeights, feat: PerceptualExtractor | None = None):
    """Weighted objective and its per-term breakdown.

    The breakdown holds the unweighted ``pseudo``, ``l1``, ``cos``, ``ssim``
    and ``vgg`` terms (zero when disabled) alongside ``output`` and ``total``.
    """
    if w.use_vgg and feat is None:
        raise ValueError("perceptual term enabled but no extractor given")
    zero = pred.new_zeros(())
    terms = {
        "pseudo": pseudo_loss(fn, gt) if w.use_pseudo else zero,
        "l1": l1_loss(pred, gt),
        "cos": cosine_loss(pred, gt),
        "ssim": ssim_loss(pred, gt) if w.use_ssim else zero,
        "vgg": perceptual_loss(pred, gt, feat) if w.use_vgg else zero,
    }
    output = w.lambda1 * terms["l1"] + w.lambda2 * terms["cos"] + w.lambda3 * terms["ssim"] + w.lambda4 * terms["vgg"]
    total = w.lambda_p * terms["pseudo"] + w.lambda_o * output
    return total, {**terms, "output": output, "total": total}
