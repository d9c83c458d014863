"""Color-shift diagnostic: PCA of per-pixel (input - gt) RGB shifts by exposure class."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

OVER, NORMAL, UNDER = 1, 0, -1
LABEL_NAMES = {OVER: "over", NORMAL: "normal", UNDER: "under"}
LABEL_CODES = {v: k for k, v in LABEL_NAMES.items()}


def classify_exposure(inp: torch.Tensor, gt: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """Per-pixel label map (``OVER``/``UNDER``/``NORMAL``) from the channel-mean difference."""
    if inp.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(inp.shape)} vs {tuple(gt.shape)}")
    diff = (inp.to(torch.float64) - gt.to(torch.float64)).mean(dim=-3)
    labels = torch.zeros(diff.shape, dtype=torch.int8)
    labels[diff > tau] = OVER
    labels[diff < -tau] = UNDER
    return labels


@dataclass
class ShiftPCA:
    points: np.ndarray  # (n, 2) projections of the raw shift vectors
    labels: list[str]
    components: np.ndarray  # (2, 3), rows are unit principal axes
    eigenvalues: np.ndarray  # (3,), descending
    mean: np.ndarray  # (3,) mean shift vector
    label_means: dict[str, list[float]]
    rank: int

    @property
    def over_under_dot(self) -> float | None:
        if "over" not in self.label_means or "under" not in self.label_means:
            return None
        return float(np.dot(self.label_means["over"], self.label_means["under"]))

    def summary(self) -> dict:
        return {
            "components": self.components.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "mean_shift": self.mean.tolist(),
            "label_means": self.label_means,
            "label_counts": {k: self.labels.count(k) for k in self.label_means},
            "rank": self.rank,
            "over_under_dot": self.over_under_dot,
        }


def pca_color_shift(
    pairs,
    samples_per_image: int,
    seed: int = 0,
    tau: float = 0.1,
    labels: tuple[str, ...] | None = ("over", "under"),
) -> ShiftPCA:
    """Sample labeled pixels, run PCA on their shift vectors and project onto the top two axes.

    Projections are of the raw shift vectors, so the origin means "no shift"
    and per-label mean projections point in the direction of each class's
    average shift. ``labels=None`` samples every pixel regardless of class.
    """
    if samples_per_image < 1:
        raise ValueError("samples_per_image must be >= 1")
    if not pairs:
        raise ValueError("need at least one (input, gt) pair")
    wanted = None if labels is None else {LABEL_CODES[name] for name in labels}
    rng = np.random.default_rng(seed)
    shifts, names = [], []
    for inp, gt in pairs:
        lab = classify_exposure(inp, gt, tau).flatten().numpy()
        diff = (inp.to(torch.float64) - gt.to(torch.float64)).flatten(1).numpy().T
        pool = np.arange(lab.size) if wanted is None else np.flatnonzero(np.isin(lab, list(wanted)))
        if pool.size == 0:
            continue
        take = rng.choice(pool, size=min(samples_per_image, pool.size), replace=False)
        take.sort()
        shifts.append(diff[take])
        names.extend(LABEL_NAMES[int(v)] for v in lab[take])
    if labels is not None:
        missing = [name for name in labels if name not in names]
        if missing:
            raise ValueError(f"no pixels labeled {', '.join(missing)} (tau={tau})")
    x = np.concatenate(shifts) if shifts else np.zeros((0, 3))
    if len(x) == 0:
        raise ValueError("no pixels sampled")

    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False, bias=True).reshape(3, 3)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    # deterministic sign: largest-magnitude coordinate of each axis positive
    for k in range(3):
        if evecs[np.argmax(np.abs(evecs[:, k])), k] < 0:
            evecs[:, k] *= -1
    tol = 1e-12 * max(1.0, float(evals.sum()))
    rank = int((evals > tol).sum())
    comps = evecs[:, :2].T
    points = x @ comps.T
    arr = np.array(names)
    label_means = {name: points[arr == name].mean(axis=0).tolist() for name in dict.fromkeys(names)}
    return ShiftPCA(points, names, comps, evals, mean, label_means, rank)


def write_points(result: ShiftPCA, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "label"])
        for (px, py), lab in zip(result.points, result.labels):
            w.writerow([f"{px:.8f}", f"{py:.8f}", lab])


def write_summary(result: ShiftPCA, path: str | Path) -> None:
    Path(path).write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
