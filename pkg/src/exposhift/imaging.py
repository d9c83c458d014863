"""Image I/O, value normalization and sRGB -> CIE L*a*b* conversion.

Images are torch tensors shaped ``(3, H, W)`` or ``(B, 3, H, W)`` holding
sRGB values in [0, 1]. Everything here is a pure function.

Loaded pixel values are snapped to multiples of 2**-24. On that grid
``1 - x`` is exact in float32, which makes :func:`invert` a bit-exact
involution for every loaded image (the snap moves values by < 3e-8).
"""

from __future__ import annotations

import enum
from pathlib import Path

import numpy as np
import torch
from PIL import Image

MIN_SIDE = 8
GRID = 2.0**-24

# sRGB (D65) -> XYZ
_RGB_TO_XYZ = (
    (0.4124564, 0.3575761, 0.1804375),
    (0.2126729, 0.7151522, 0.0721750),
    (0.0193339, 0.1191920, 0.9503041),
)
# D65 white, normalized so that Y = 1; taken as the row sums of the matrix
# above so that sRGB white maps to exactly a* = b* = 0.
D65_WHITE = tuple(sum(row) for row in _RGB_TO_XYZ)

_DELTA = 6.0 / 29.0


class ColorSpace(enum.Enum):
    SRGB = "srgb"
    LAB = "lab"


class ImageError(ValueError):
    pass


def validate_image(img: torch.Tensor, color_space: ColorSpace = ColorSpace.SRGB) -> torch.Tensor:
    """Check the ImageTensor invariants and return ``img`` unchanged."""
    if img.dim() not in (3, 4) or img.shape[-3] != 3:
        raise ImageError(f"expected (3, H, W) or (B, 3, H, W), got {tuple(img.shape)}")
    h, w = img.shape[-2:]
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ImageError(f"image is {h}x{w}; both sides must be >= {MIN_SIDE}")
    if color_space is ColorSpace.SRGB:
        lo, hi = float(img.min()), float(img.max())
        if lo < 0.0 or hi > 1.0:
            raise ImageError(f"sRGB values must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")
    return img


def load_image(path: str | Path) -> torch.Tensor:
    """Read an 8- or 16-bit PNG/JPEG as a float32 ``(3, H, W)`` tensor in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise ImageError(f"{path}: unsupported format {im.format!r}")
            arr = _pil_to_array(im)
    except Image.UnidentifiedImageError as exc:
        raise ImageError(f"{path}: unsupported or corrupt image") from exc
    if arr.size == 0:
        raise ImageError(f"{path}: zero-size image")
    arr = (np.rint(arr / GRID) * GRID).astype(np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _pil_to_array(im: Image.Image) -> np.ndarray:
    if im.width == 0 or im.height == 0:
        return np.zeros((0, 0, 3))
    if im.mode in ("I;16", "I;16B", "I;16L", "I"):
        # 16-bit grayscale
        arr = np.asarray(im, dtype=np.float64) / 65535.0
        return np.repeat(arr[..., None], 3, axis=2)
    raw = np.asarray(im)
    if raw.dtype == np.uint16:
        arr = raw.astype(np.float64) / 65535.0
    else:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr[..., :3]


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """Clamp to [0, 1] and quantize to the nearest 8-bit code, HWC layout."""
    arr = img.detach().to(torch.float64).clamp(0.0, 1.0).cpu().numpy()
    return np.rint(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_image(img: torch.Tensor, path: str | Path) -> None:
    """Write an sRGB ``(3, H, W)`` tensor as an 8-bit PNG."""
    if img.dim() != 3 or img.shape[0] != 3:
        raise ImageError(f"expected (3, H, W), got {tuple(img.shape)}")
    path = Path(path)
    try:
        Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def invert(img: torch.Tensor) -> torch.Tensor:
    return 1.0 - img


def _srgb_to_linear(c: torch.Tensor) -> torch.Tensor:
    return torch.where(c <= 0.04045, c / 12.92, ((c.clamp(min=0.04045) + 0.055) / 1.055) ** 2.4)


def _lab_f(t: torch.Tensor) -> torch.Tensor:
    return torch.where(
        t > _DELTA**3,
        t.clamp(min=_DELTA**3) ** (1.0 / 3.0),
        t / (3 * _DELTA**2) + 4.0 / 29.0,
    )


def srgb_to_lab(img: torch.Tensor) -> torch.Tensor:
    """CIE 1976 L*a*b* (D65) of an sRGB image; channel axis is ``-3``."""
    lin = _srgb_to_linear(img)
    m = torch.tensor(_RGB_TO_XYZ, dtype=img.dtype, device=img.device)
    xyz = torch.einsum("ij,...jhw->...ihw", m, lin)
    white = torch.tensor(D65_WHITE, dtype=img.dtype, device=img.device).view(3, 1, 1)
    f = _lab_f(xyz / white)
    fx, fy, fz = f.unbind(dim=-3)
    lab = torch.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], dim=-3)
    return lab
