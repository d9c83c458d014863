"""End-to-end network: illumination maps -> brighten/darken -> pseudo-normal -> COSE x2 -> COMO."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .como import ATTENTION_MODES, ComoModule, NonLocalFusion
from .cose import DEFORM_MODES, CoseModule
from .data import pad_to_multiple
from .illumination import IlluminationExtractor, PseudoNormalGenerator, brighten, darken
from .imaging import invert


@dataclass
class ModelConfig:
    extractor_depth: int = 3
    extractor_width: int = 16
    illum_floor: float = 1e-3
    generator_width: int = 16
    cose_kernel: int = 3
    deform_mode: str = "full"
    como_dim: int = 8
    como_stride: int | None = None
    como_max_tokens: int = 4096
    separate_extractors: bool = False
    opposed_maps: bool = False
    illum_channels: int = 1
    share_generator: bool = True
    attention_mode: str = "como"

    def __post_init__(self):
        if self.deform_mode not in DEFORM_MODES:
            raise ValueError(f"deform_mode must be one of {DEFORM_MODES}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.illum_channels not in (1, 3):
            raise ValueError("illum_channels must be 1 or 3")
        if self.separate_extractors and self.opposed_maps:
            raise ValueError("opposed_maps uses a single extraction; separate_extractors has no effect")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ExposureNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()

        def extractor():
            return IlluminationExtractor(cfg.extractor_depth, cfg.extractor_width, cfg.illum_channels, cfg.illum_floor)

        self.extractor = extractor()
        self.extractor_dark = extractor() if cfg.separate_extractors else None
        self.cose_b = CoseModule(cfg.deform_mode, cfg.cose_kernel)
        self.cose_d = CoseModule(cfg.deform_mode, cfg.cose_kernel)
        if cfg.attention_mode == "como":
            self.fusion = ComoModule(cfg.como_dim, cfg.como_stride, cfg.como_max_tokens)
        else:
            self.fusion = NonLocalFusion(cfg.como_dim, cfg.como_stride, cfg.como_max_tokens)
        shared = None
        if cfg.share_generator and isinstance(self.fusion, ComoModule):
            shared = self.fusion.branches["I"].conv_z
        self.generator = PseudoNormalGenerator(cfg.generator_width, embed=shared, embed_dim=cfg.como_dim)

    @property
    def pad_multiple(self) -> int:
        return 2**self.cfg.extractor_depth

    def illumination(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Under- and over-exposure illumination maps."""
        lum_u = self.extractor(x)
        if self.cfg.opposed_maps:
            lum_o = 1.0 - lum_u
        else:
            lum_o = (self.extractor_dark or self.extractor)(invert(x))
        return lum_u, lum_o

    def forward(self, x: torch.Tensor, return_aux: bool = False):
        """``x`` is ``(B, 3, H, W)`` with H, W divisible by ``pad_multiple``."""
        floor = self.cfg.illum_floor
        lum_u, lum_o = self.illumination(x)
        fb = brighten(x, lum_u, floor)
        fd = darken(x, lum_o, floor)
        fn = self.generator(fb, fd, x)
        ob = self.cose_b(fn, fb)
        od = self.cose_d(fn, fd)
        y = self.fusion(x, ob, od)
        if return_aux:
            return y, fn, {"lum_u": lum_u, "lum_o": lum_o, "fb": fb, "fd": fd, "ob": ob, "od": od}
        return y, fn

    def enhance(self, img: torch.Tensor) -> torch.Tensor:
        """Inference on arbitrary-size ``(3, H, W)`` or batched input: pad, run, crop."""
        single = img.dim() == 3
        x = img.unsqueeze(0) if single else img
        x, (h, w) = pad_to_multiple(x, self.pad_multiple)
        y, _ = self(x)
        y = y[..., :h, :w]
        return y[0] if single else y


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
