"""Central finite-difference gradient checks in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import torch


def numeric_grad(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """d fn() / d tensor by central differences, perturbing ``tensor`` in place."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = fn().item()
            flat[i] = orig - step
            minus = fn().item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-12) -> float:
    """``max|a - n| / max(max|n|, max|a|, floor)``.

    ``floor`` keeps gradients that are zero by construction (e.g. a bias
    cancelled by a following batch norm) from turning FD noise into a 100%
    error; :func:`check_gradients` sets it relative to the largest gradient.
    """
    scale = max(float(numeric.abs().max()), float(analytic.abs().max()), floor)
    return float((analytic - numeric).abs().max()) / scale


def check_gradients(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor] | dict[str, torch.Tensor],
    step: float = 1e-4,
    rel_floor: float = 1e-6,
) -> dict[str, float]:
    """Relative error of autograd vs central differences for each tensor.

    ``fn`` must return a scalar and read ``tensors`` directly (they are
    perturbed in place). Per-tensor errors are scaled by that tensor's
    gradient magnitude, but never by less than ``rel_floor`` times the
    largest gradient in the whole check. Returns ``{name: relative_error}``.
    """
    named = tensors if isinstance(tensors, dict) else {str(i): t for i, t in enumerate(tensors)}
    for t in named.values():
        if t.dtype != torch.float64:
            raise TypeError("gradient checks must run in float64")
        t.grad = None
    fn().backward()
    analytic = {k: t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for k, t in named.items()}
    numeric = {k: numeric_grad(fn, t, step) for k, t in named.items()}
    peak = max(max(float(a.abs().max()), float(numeric[k].abs().max())) for k, a in analytic.items())
    floor = max(rel_floor * peak, 1e-12)
    return {k: relative_error(analytic[k], numeric[k], floor) for k in named}


def random_projection(shape, seed: int = 0, dtype=torch.float64) -> torch.Tensor:
    """Fixed random weights so that ``(out * w).sum()`` exercises every output element."""
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=gen, dtype=dtype)
