"""Fidelity metrics: PSNR, SSIM and RMSE in CIE L*a*b*.

All metrics clamp to [0, 1], compute in float64 and take single images
``(3, H, W)``. Set-level numbers are per-image means.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import torch

from .imaging import srgb_to_lab
from .losses import ssim_map


def _prep(pred: torch.Tensor, gt: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (
        pred.detach().to(torch.float64).clamp(0.0, 1.0),
        gt.detach().to(torch.float64).clamp(0.0, 1.0),
    )


def psnr(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """PSNR in dB over all channels jointly; ``inf`` for identical images."""
    pred, gt = _prep(pred, gt)
    mse = float(((pred - gt) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(pred: torch.Tensor, gt: torch.Tensor) -> float:
    pred, gt = _prep(pred, gt)
    if pred.dim() == 3:
        pred, gt = pred.unsqueeze(0), gt.unsqueeze(0)
    return float(ssim_map(pred, gt).mean())


def rmse_lab(pred: torch.Tensor, gt: torch.Tensor) -> float:
    pred, gt = _prep(pred, gt)
    return float(((srgb_to_lab(pred) - srgb_to_lab(gt)) ** 2).mean().sqrt())


METRICS = {"psnr": psnr, "ssim": ssim, "rmse_lab": rmse_lab}


def evaluate_pair(pred: torch.Tensor, gt: torch.Tensor) -> dict[str, float]:
    return {name: fn(pred, gt) for name, fn in METRICS.items()}


def summarize(rows: list[dict]) -> dict[str, float]:
    """Per-image means. Infinite PSNRs propagate as ``inf``."""
    if not rows:
        raise ValueError("no rows to summarize")
    return {k: sum(r[k] for r in rows) / len(rows) for k in METRICS}


def write_report(rows: list[dict], path: str | Path) -> dict[str, float]:
    """Write one row per image plus a final ``mean`` row; returns the means."""
    mean = summarize(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", *METRICS])
        for r in rows:
            writer.writerow([r["image"], *(_fmt(r[k]) for k in METRICS)])
        writer.writerow(["mean", *(_fmt(mean[k]) for k in METRICS)])
    return mean


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"
