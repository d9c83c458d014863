"""Color modulation: cross-affinity attention between the image and the two offset maps.

Token matrices are ``(B, d, M)`` with ``M`` spatial positions of the
average-pooled input. Affinities are ``(B, M, M)``; row ``m`` of an
affinity is the attention map of token ``m``, so attending a value matrix
``Z`` gives ``Z @ A^T``.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ATTENTION_MODES = ("como", "nonlocal_concat")
BRANCHES = ("I", "B", "D")


def pick_stride(h: int, w: int, max_tokens: int = 4096) -> int:
    """Smallest power-of-two pooling stride giving at most ``max_tokens`` tokens."""
    s = 1
    while math.ceil(h / s) * math.ceil(w / s) > max_tokens:
        s *= 2
    return s


def pool(x: torch.Tensor, stride: int) -> torch.Tensor:
    return x if stride == 1 else F.avg_pool2d(x, stride, stride, ceil_mode=True)


class ComoBranch(nn.Module):
    def __init__(self, channels: int = 3, dim: int = 8):
        super().__init__()
        self.conv_psi = nn.Conv2d(channels, dim, 1)
        self.conv_phi = nn.Conv2d(channels, dim, 1)
        self.conv_z = nn.Conv2d(channels, dim, 1)


def branch_project(x: torch.Tensor, branch: ComoBranch, stride: int = 1):
    """Pool ``x`` by ``stride`` and return the ``(psi, phi, z)`` token matrices."""
    x = pool(x, stride)
    return tuple(conv(x).flatten(2) for conv in (branch.conv_psi, branch.conv_phi, branch.conv_z))


def affinity_logits(psi: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Symmetrized ``psi^T phi``; exactly symmetric in floating point."""
    a = psi.transpose(-1, -2) @ phi
    return 0.5 * (a + a.transpose(-1, -2))


def affinity(psi: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Row-stochastic affinity: row-wise softmax of the symmetrized logits."""
    return torch.softmax(affinity_logits(psi, phi), dim=-1)


def attend(a: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return z @ a.transpose(-1, -2)


def attend_symmetric(psi: torch.Tensor, phi: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """``attend(affinity(psi, phi), z)`` without materializing the ``M x M`` matrix.

    The symmetrized logits factor as ``q k^T`` with ``q = [psi; phi]`` and
    ``k = [phi; psi] / 2``, so a fused attention kernel applies directly.
    """
    q = torch.cat([psi, phi], dim=-2).transpose(-1, -2)
    k = 0.5 * torch.cat([phi, psi], dim=-2).transpose(-1, -2)
    out = F.scaled_dot_product_attention(q, k, z.transpose(-1, -2), scale=1.0)
    return out.transpose(-1, -2)


def cross_modulate(a_j: torch.Tensor, z_j: torch.Tensor, z_i: torch.Tensor, w1: nn.Module, w2: nn.Module):
    """``w1(Z_j A_j^T) + w2(Z_I A_j^T)``; ``w1``/``w2`` act on the channel axis."""
    return w1(attend(a_j, z_j)) + w2(attend(a_j, z_i))


class ComoModule(nn.Module):
    """Fuses the image with brighten/darken offset maps and adds the result back.

    ``stride=None`` selects the pooling stride per input via
    :func:`pick_stride`. The output projection ``w4`` starts at zero, so a
    fresh module is the identity. ``fused=False`` builds the explicit
    affinity matrices instead of calling the fused attention kernel.
    """

    def __init__(
        self, dim: int = 8, stride: int | None = None, max_tokens: int = 4096, channels: int = 3, fused: bool = True
    ):
        super().__init__()
        self.dim = dim
        self.fused = fused
        self.stride = stride
        self.max_tokens = max_tokens
        self.branches = nn.ModuleDict({k: ComoBranch(channels, dim) for k in BRANCHES})
        self.w1 = nn.Conv1d(dim, dim, 1, bias=False)
        self.w2 = nn.Conv1d(dim, dim, 1, bias=False)
        self.w3 = nn.Conv1d(dim, dim, 1, bias=False)
        self.bn_b = nn.BatchNorm1d(dim, eps=1e-5, momentum=0.1)
        self.bn_d = nn.BatchNorm1d(dim, eps=1e-5, momentum=0.1)
        self.w4 = nn.Conv2d(dim, channels, 1)
        nn.init.zeros_(self.w4.weight)
        nn.init.zeros_(self.w4.bias)

    def stride_for(self, h: int, w: int) -> int:
        return self.stride if self.stride is not None else pick_stride(h, w, self.max_tokens)

    def tokens(self, img: torch.Tensor, ob: torch.Tensor, od: torch.Tensor) -> torch.Tensor:
        """The ``(B, d, M)`` mixed token map fed to ``w4``."""
        if not (img.shape == ob.shape == od.shape):
            raise ValueError(f"shape mismatch: {tuple(img.shape)}, {tuple(ob.shape)}, {tuple(od.shape)}")
        s = self.stride_for(*img.shape[-2:])
        proj = {k: branch_project(x, self.branches[k], s) for k, x in zip(BRANCHES, (img, ob, od))}
        z_i = proj["I"][2]
        if not self.fused:
            aff = {k: affinity(p[0], p[1]) for k, p in proj.items()}
            f_b = cross_modulate(aff["B"], proj["B"][2], z_i, self.w1, self.w2)
            f_d = cross_modulate(aff["D"], proj["D"][2], z_i, self.w1, self.w2)
            return self.bn_b(f_b) + self.bn_d(f_d) + self.w3(attend(aff["I"], z_i))
        f = {}
        for j in ("B", "D"):
            psi, phi, z_j = proj[j]
            both = attend_symmetric(psi, phi, torch.cat([z_j, z_i], dim=1))
            f[j] = self.w1(both[:, : self.dim]) + self.w2(both[:, self.dim :])
        psi, phi, _ = proj["I"]
        return self.bn_b(f["B"]) + self.bn_d(f["D"]) + self.w3(attend_symmetric(psi, phi, z_i))

    def forward(self, img: torch.Tensor, ob: torch.Tensor, od: torch.Tensor) -> torch.Tensor:
        h, w = img.shape[-2:]
        s = self.stride_for(h, w)
        t = self.tokens(img, ob, od)
        t = t.reshape(t.shape[0], self.dim, math.ceil(h / s), math.ceil(w / s))
        if s != 1:
            t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
        return self.w4(t) + img


class NonLocalFusion(nn.Module):
    """Plain non-local block on the concatenation ``[I_x, O_B, O_D]``, residual on ``I_x``."""

    def __init__(self, dim: int = 8, stride: int | None = None, max_tokens: int = 4096, channels: int = 3):
        super().__init__()
        self.dim = dim
        self.stride = stride
        self.max_tokens = max_tokens
        self.theta = nn.Conv2d(3 * channels, dim, 1)
        self.phi = nn.Conv2d(3 * channels, dim, 1)
        self.g = nn.Conv2d(3 * channels, dim, 1)
        self.out = nn.Conv2d(dim, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, img: torch.Tensor, ob: torch.Tensor, od: torch.Tensor) -> torch.Tensor:
        h, w = img.shape[-2:]
        s = self.stride if self.stride is not None else pick_stride(h, w, self.max_tokens)
        x = pool(torch.cat([img, ob, od], dim=1), s)
        theta, phi, g = (conv(x).flatten(2).transpose(-1, -2) for conv in (self.theta, self.phi, self.g))
        y = F.scaled_dot_product_attention(theta, phi, g, scale=1.0).transpose(-1, -2)
        y = y.reshape(x.shape[0], self.dim, *x.shape[-2:])
        if s != 1:
            y = F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False)
        return self.out(y) + img


# Loop references. Unbatched numpy arrays; weights as (out, in) matrices.


def affinity_reference(psi, phi) -> tuple[np.ndarray, np.ndarray]:
    """Returns (symmetrized logits, row-softmax) via explicit loops."""
    psi, phi = np.asarray(psi, np.float64), np.asarray(phi, np.float64)
    d, m = psi.shape
    a = np.zeros((m, m))
    for r in range(m):
        for c in range(m):
            a[r, c] = sum(psi[k, r] * phi[k, c] for k in range(d))
    sym = np.zeros((m, m))
    for r in range(m):
        for c in range(m):
            sym[r, c] = 0.5 * (a[r, c] + a[c, r])
    soft = np.zeros((m, m))
    for r in range(m):
        mx = max(sym[r])
        e = [math.exp(v - mx) for v in sym[r]]
        tot = sum(e)
        for c in range(m):
            soft[r, c] = e[c] / tot
    return sym, soft


def _attend_reference(a, z) -> np.ndarray:
    d, m = z.shape
    out = np.zeros((d, m))
    for ch in range(d):
        for t in range(m):
            out[ch, t] = sum(a[t, k] * z[ch, k] for k in range(m))
    return out


def _matvec_tokens(w, z) -> np.ndarray:
    out = np.zeros((w.shape[0], z.shape[1]))
    for o in range(w.shape[0]):
        for t in range(z.shape[1]):
            out[o, t] = sum(w[o, i] * z[i, t] for i in range(w.shape[1]))
    return out


def cross_modulate_reference(a_j, z_j, z_i, w1, w2) -> np.ndarray:
    a_j, z_j, z_i, w1, w2 = (np.asarray(v, np.float64) for v in (a_j, z_j, z_i, w1, w2))
    return _matvec_tokens(w1, _attend_reference(a_j, z_j)) + _matvec_tokens(w2, _attend_reference(a_j, z_i))


def como_reference(img, ob, od, params: dict) -> np.ndarray:
    """Stride-1 forward with batch-norm in inference form (running statistics).

    ``params`` maps names as in ``ComoModule.state_dict()`` to numpy arrays.
    """
    p = {k: np.asarray(v, np.float64) for k, v in params.items()}
    maps = {k: np.asarray(v, np.float64) for k, v in zip(BRANCHES, (img, ob, od))}
    c, h, w = maps["I"].shape
    m = h * w

    def conv1x1(prefix, x):
        wt = p[prefix + ".weight"].reshape(p[prefix + ".weight"].shape[0], -1)
        tokens = x.reshape(c, m)
        out = _matvec_tokens(wt, tokens)
        for o in range(out.shape[0]):
            out[o] += p[prefix + ".bias"][o]
        return out

    proj = {}
    for k in BRANCHES:
        proj[k] = [conv1x1(f"branches.{k}.{name}", maps[k]) for name in ("conv_psi", "conv_phi", "conv_z")]
    aff = {k: affinity_reference(proj[k][0], proj[k][1])[1] for k in BRANCHES}

    def mat(name):
        wt = p[name + ".weight"]
        return wt.reshape(wt.shape[0], -1)

    def bn(prefix, x):
        out = np.zeros_like(x)
        for ch in range(x.shape[0]):
            mean, var = p[prefix + ".running_mean"][ch], p[prefix + ".running_var"][ch]
            scale = p[prefix + ".weight"][ch] / math.sqrt(var + 1e-5)
            for t in range(x.shape[1]):
                out[ch, t] = (x[ch, t] - mean) * scale + p[prefix + ".bias"][ch]
        return out

    z_i = proj["I"][2]
    f_b = cross_modulate_reference(aff["B"], proj["B"][2], z_i, mat("w1"), mat("w2"))
    f_d = cross_modulate_reference(aff["D"], proj["D"][2], z_i, mat("w1"), mat("w2"))
    mixed = bn("bn_b", f_b) + bn("bn_d", f_d) + _matvec_tokens(mat("w3"), _attend_reference(aff["I"], z_i))
    out = _matvec_tokens(mat("w4"), mixed)
    y = np.zeros((c, h, w))
    for ch in range(c):
        for t in range(m):
            y[ch, t // w, t % w] = out[ch, t] + p["w4.bias"][ch] + maps["I"][ch, t // w, t % w]
    return y
