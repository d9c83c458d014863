"""Paired datasets, patch sampling and a synthetic mixed-exposure generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .imaging import load_image, save_image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(ValueError):
    pass


@dataclass
class PairedDataset:
    records: list[tuple[Path, Path]]
    patch_size: int | None = None
    hflip: bool = False
    rot90: bool = False
    # optional in-memory images, index-aligned with records
    cache: list[tuple[torch.Tensor, torch.Tensor]] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def name(self, index: int) -> str:
        return Path(self.records[index][0]).name

    def load(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        if self.cache is not None:
            return self.cache[index]
        inp, gt = self.records[index]
        return load_image(inp), load_image(gt)

    def preload(self) -> "PairedDataset":
        self.cache = [self.load(i) for i in range(len(self))]
        return self

    @classmethod
    def from_tensors(cls, pairs, names=None, **kw) -> "PairedDataset":
        names = names or [f"{i:04d}.png" for i in range(len(pairs))]
        records = [(Path(n), Path(n)) for n in names]
        return cls(records, cache=[(a, b) for a, b in pairs], **kw)


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def _list_images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def scan_dataset(root: str | Path, manifest: str | Path | None = None, **kw) -> PairedDataset:
    """Pair ``root/input/*`` with ``root/gt/*`` by filename, or read a TSV manifest.

    Manifest lines are ``input<TAB>gt`` with paths relative to ``root``;
    several inputs may share one ground truth.
    """
    root = Path(root)
    records: list[tuple[Path, Path]] = []
    if manifest is not None:
        for lineno, line in enumerate(Path(manifest).read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(f"{manifest}:{lineno}: expected 'input<TAB>gt'")
            records.append((root / parts[0].strip(), root / parts[1].strip()))
        records.sort()
    else:
        in_dir, gt_dir = root / "input", root / "gt"
        if not in_dir.is_dir() or not gt_dir.is_dir():
            raise DatasetError(f"{root} must contain input/ and gt/ directories")
        gts = {p.name: p for p in _list_images(gt_dir)}
        inputs = _list_images(in_dir)
        for p in inputs:
            if p.name not in gts:
                raise DatasetError(f"no ground truth for input {p.name}")
            records.append((p, gts[p.name]))
        orphans = sorted(set(gts) - {p.name for p in inputs})
        if orphans:
            raise DatasetError(f"no input for ground truth {orphans[0]}")
    for inp, gt in records:
        for p in (inp, gt):
            if not p.is_file():
                raise DatasetError(f"missing file {p}")
        if _image_size(inp) != _image_size(gt):
            raise DatasetError(f"size mismatch: {inp} {_image_size(inp)} vs {gt} {_image_size(gt)}")
    if not records:
        raise DatasetError(f"no image pairs found under {root}")
    return PairedDataset(records, **kw)


def augment(img: torch.Tensor, flip: bool, rot: int) -> torch.Tensor:
    if flip:
        img = img.flip(-1)
    if rot:
        img = torch.rot90(img, rot, dims=(-2, -1))
    return img


def sample_patch(ds: PairedDataset, index: int, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Crop the same window from input and gt and apply the same augmentation."""
    inp, gt = ds.load(index)
    h, w = inp.shape[-2:]
    size = ds.patch_size
    if size is not None:
        if size > h or size > w:
            raise DatasetError(f"patch {size} larger than image {h}x{w} ({ds.name(index)})")
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        inp = inp[:, y:y + size, x:x + size]
        gt = gt[:, y:y + size, x:x + size]
    flip = bool(rng.integers(0, 2)) if ds.hflip else False
    rot = int(rng.integers(0, 4)) if ds.rot90 else 0
    return augment(inp, flip, rot), augment(gt, flip, rot)


def sample_batch(ds: PairedDataset, batch_size: int, rng: np.random.Generator, indices=None):
    """Stack patches for ``indices`` (default: drawn uniformly with replacement)."""
    idx = rng.integers(0, len(ds), size=batch_size) if indices is None else indices
    pairs = [sample_patch(ds, int(i), rng) for i in idx]
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


class EpochSampler:
    """Yields batch indices from successive random permutations of the dataset.

    Every image appears once per epoch; a batch may span an epoch boundary.
    """

    def __init__(self, size: int, rng: np.random.Generator):
        if size < 1:
            raise ValueError("empty dataset")
        self.size = size
        self.rng = rng
        self._queue: list[int] = []

    def next(self, batch_size: int) -> list[int]:
        while len(self._queue) < batch_size:
            self._queue.extend(int(i) for i in self.rng.permutation(self.size))
        out, self._queue = self._queue[:batch_size], self._queue[batch_size:]
        return out


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad the bottom/right edges so H and W divide ``multiple``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        batched = x if x.dim() == 4 else x.unsqueeze(0)
        mode = "reflect" if ph < h and pw < w else "replicate"
        batched = F.pad(batched, (0, pw, 0, ph), mode=mode)
        x = batched if x.dim() == 4 else batched[0]
    return x, (h, w)


# Synthetic data


@dataclass
class DegradationSpec:
    region_count: int = 4
    over_fraction: float = 0.4
    under_fraction: float = 0.4
    gamma_over: tuple[float, float] = (0.35, 0.6)
    gamma_under: tuple[float, float] = (1.8, 2.8)
    tone_shift_magnitude: float = 0.06
    noise_sigma: float = 0.01
    feather: float = 0.15
    seed: int = 0

    def __post_init__(self):
        self.gamma_over = tuple(self.gamma_over)
        self.gamma_under = tuple(self.gamma_under)
        lo, hi = self.gamma_over
        if not 0 < lo <= hi <= 0.9:
            raise ValueError(f"gamma_over must lie in (0, 0.9], got {self.gamma_over}")
        lo, hi = self.gamma_under
        if not 1.1 <= lo <= hi:
            raise ValueError(f"gamma_under must lie in [1.1, inf), got {self.gamma_under}")
        if self.over_fraction < 0 or self.under_fraction < 0 or self.over_fraction + self.under_fraction > 1:
            raise ValueError("region fractions must be non-negative and sum to at most 1")


def synthesize_scene(h: int, w: int, seed: int) -> torch.Tensor:
    """A smooth colorful clean image with a few soft-edged shapes, values in [0.2, 0.8]."""
    rng = np.random.default_rng(seed)
    base = gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, h / 6, w / 6), mode="wrap")
    base = base - base.min(axis=(1, 2), keepdims=True)
    base = base / np.maximum(base.max(axis=(1, 2), keepdims=True), 1e-12)
    img = 0.3 + 0.4 * base
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.2, 0.8, size=3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.1, 0.3) * min(h, w)
        if rng.random() < 0.5:
            mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r**2).astype(float)
        else:
            mask = ((np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= 0.7 * r)).astype(float)
        mask = gaussian_filter(mask, 1.0)
        img = img * (1 - mask) + color[:, None, None] * mask
    return torch.from_numpy(np.clip(img, 0.2, 0.8).astype(np.float32))


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def synthesize_degraded(gt: torch.Tensor, spec: DegradationSpec):
    """Apply mixed over/under exposure with opposite tone shifts.

    Returns ``(input, over_mask, under_mask)``; masks are boolean ``(H, W)``.
    """
    rng = np.random.default_rng(spec.seed)
    g = gt.detach().to(torch.float64).cpu().numpy()
    _, h, w = g.shape
    sigma = max(h, w) / (2.0 * max(spec.region_count, 1))
    fld = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="reflect")
    fld = (fld - fld.mean()) / max(fld.std(), 1e-12)
    t_under = np.quantile(fld, spec.under_fraction) if spec.under_fraction > 0 else -np.inf
    t_over = np.quantile(fld, 1.0 - spec.over_fraction) if spec.over_fraction > 0 else np.inf
    f = max(spec.feather, 1e-6)
    w_over = _smoothstep((fld - t_over) / f + 0.5)
    w_under = _smoothstep((t_under - fld) / f + 0.5)
    over_mask, under_mask = fld > t_over, fld < t_under

    gamma_o = rng.uniform(*spec.gamma_over)
    gamma_u = rng.uniform(*spec.gamma_under)
    delta = rng.standard_normal(3)
    delta = delta - delta.mean()
    delta = spec.tone_shift_magnitude * delta / max(np.linalg.norm(delta), 1e-12)
    noise = rng.standard_normal(g.shape) * spec.noise_sigma

    over = np.clip(g**gamma_o + delta[:, None, None], 0, 1)
    under = np.clip(g**gamma_u - delta[:, None, None] + noise, 0, 1)
    out = g * (1 - w_over - w_under) + over * w_over + under * w_under
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return torch.from_numpy(out), torch.from_numpy(over_mask), torch.from_numpy(under_mask)


def synthetic_pairs(count: int, size: int, spec: DegradationSpec, seed: int = 0):
    """``count`` (input, gt) pairs; pair ``i`` uses scene seed ``seed*100003+i``."""
    pairs = []
    for i in range(count):
        s = seed * 100003 + i
        gt = synthesize_scene(size, size, s)
        sub = DegradationSpec(**{**spec.__dict__, "seed": spec.seed * 100003 + i})
        inp, _, _ = synthesize_degraded(gt, sub)
        pairs.append((inp, gt))
    return pairs


def write_synthetic_dataset(root: str | Path, count: int, size: int, spec: DegradationSpec, seed: int = 0) -> Path:
    root = Path(root)
    (root / "input").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    for i, (inp, gt) in enumerate(synthetic_pairs(count, size, spec, seed)):
        save_image(inp, root / "input" / f"{i:04d}.png")
        save_image(gt, root / "gt" / f"{i:04d}.png")
    return root
