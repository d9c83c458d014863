"""Operator-oracle, identity and gradient checks, runnable without any data.

Each check returns a :class:`CheckResult`; :func:`run_all` runs them in
order. ``perturb_kernel`` is a debug hook that corrupts the kernel seen by
the vectorized deformable convolution, so the equivalence checks must fail.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import como, cose, gradcheck, losses, metrics
from .illumination import brighten, darken
from .imaging import GRID, invert

GRAD_TOL = 1e-3
ORACLE_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3g} (threshold {self.threshold:.3g}) {self.detail}".rstrip()


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _kernel(weight: torch.Tensor, perturb: bool) -> torch.Tensor:
    return weight + 1e-2 if perturb else weight


def check_conv_degeneracy(perturb_kernel: bool = False, trials: int = 100) -> CheckResult:
    worst = 0.0
    for seed in range(trials):
        g = _gen(seed)
        x = torch.rand(1, 3, 16, 16, generator=g)
        w = torch.randn(3, 3, 3, 3, generator=g)
        bundle = cose.OffsetBundle(torch.zeros(1, 18, 16, 16), torch.zeros(1, 27, 16, 16), torch.ones(1, 9, 16, 16))
        y = cose.color_deformable_conv(x, bundle, _kernel(w, perturb_kernel))
        ref = F.conv2d(x, w, padding=1)
        worst = max(worst, float((y - ref).abs().max()))
    return CheckResult("deformable conv == 3x3 conv at zero offsets", worst <= ORACLE_TOL, worst, ORACLE_TOL)


def _random_bundle(g, h, w, dtype=torch.float32):
    dp = torch.randn(1, 18, h, w, generator=g, dtype=dtype) * 1.5
    dc = torch.randn(1, 27, h, w, generator=g, dtype=dtype) * 0.3
    dm = torch.rand(1, 9, h, w, generator=g, dtype=dtype)
    return cose.OffsetBundle(dp, dc, dm)


def check_eq_cose_oracle(perturb_kernel: bool = False, trials: int = 20) -> CheckResult:
    worst = 0.0
    for seed in range(trials):
        g = _gen(1000 + seed)
        h, w = (int(v) for v in torch.randint(3, 9, (2,), generator=g))
        x = torch.rand(1, 3, h, w, generator=g)
        weight = torch.randn(3, 3, 3, 3, generator=g)
        b = _random_bundle(g, h, w)
        y = cose.color_deformable_conv(x, b, _kernel(weight, perturb_kernel))[0]
        ref = cose.color_deformable_conv_reference(x[0], b.dp[0], b.dc[0], b.dm[0], weight)
        worst = max(worst, float(np.abs(y.numpy() - ref).max()))
    return CheckResult("color deformable conv == loop oracle", worst <= ORACLE_TOL, worst, ORACLE_TOL)


def check_eq_affinity_oracle(trials: int = 20) -> CheckResult:
    worst = 0.0
    for seed in range(trials):
        g = _gen(2000 + seed)
        m = int(torch.randint(2, 17, (1,), generator=g))
        psi, phi = torch.randn(8, m, generator=g), torch.randn(8, m, generator=g)
        ref_sym, ref_soft = como.affinity_reference(psi, phi)
        worst = max(
            worst,
            float(np.abs(como.affinity_logits(psi, phi).numpy() - ref_sym).max()),
            float(np.abs(como.affinity(psi, phi).numpy() - ref_soft).max()),
        )
    return CheckResult("affinity == loop oracle", worst <= ORACLE_TOL, worst, ORACLE_TOL)


def check_eq_cross_oracle(trials: int = 20) -> CheckResult:
    worst = 0.0
    for seed in range(trials):
        g = _gen(3000 + seed)
        m = int(torch.randint(2, 17, (1,), generator=g))
        a = torch.softmax(torch.randn(m, m, generator=g), dim=-1)
        z_j, z_i = torch.randn(1, 8, m, generator=g), torch.randn(1, 8, m, generator=g)
        w1, w2 = torch.nn.Conv1d(8, 8, 1, bias=False), torch.nn.Conv1d(8, 8, 1, bias=False)
        with torch.no_grad():
            w1.weight.copy_(torch.randn(8, 8, 1, generator=g))
            w2.weight.copy_(torch.randn(8, 8, 1, generator=g))
            y = como.cross_modulate(a.unsqueeze(0), z_j, z_i, w1, w2)[0]
        ref = como.cross_modulate_reference(a, z_j[0], z_i[0], w1.weight.detach()[..., 0], w2.weight.detach()[..., 0])
        worst = max(worst, float(np.abs(y.numpy() - ref).max()))
    return CheckResult("cross-modulation == loop oracle", worst <= ORACLE_TOL, worst, ORACLE_TOL)


def randomize_como(module: como.ComoModule, g: torch.Generator, scale: float = 0.5) -> como.ComoModule:
    """Fill every parameter and BN statistic with seeded random values."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
        for bn in (module.bn_b, module.bn_d):
            bn.running_mean.copy_(torch.randn(bn.running_mean.shape, generator=g) * 0.1)
            bn.running_var.copy_(torch.rand(bn.running_var.shape, generator=g) + 0.5)
    return module


def check_eq_como_oracle(trials: int = 20) -> CheckResult:
    worst = 0.0
    for seed in range(trials):
        g = _gen(4000 + seed)
        h, w = (int(v) for v in torch.randint(2, 5, (2,), generator=g))
        mod = randomize_como(como.ComoModule(dim=8, stride=1), g).eval()
        img, ob, od = (torch.rand(1, 3, h, w, generator=g) for _ in range(3))
        params = {k: v.numpy() for k, v in mod.state_dict().items()}
        ref = como.como_reference(img[0], ob[0], od[0], params)
        for fused in (True, False):
            mod.fused = fused
            with torch.no_grad():
                y = mod(img, ob, od)[0]
            worst = max(worst, float(np.abs(y.numpy() - ref).max()))
    return CheckResult("modulation output == loop oracle", worst <= ORACLE_TOL, worst, ORACLE_TOL)


def _grad_result(name: str, errs: dict[str, float]) -> CheckResult:
    worst_key = max(errs, key=errs.get)
    return CheckResult(name, errs[worst_key] <= GRAD_TOL, errs[worst_key], GRAD_TOL, f"(worst: {worst_key})")


def check_grad_brighten_darken() -> list[CheckResult]:
    g = _gen(5000)
    img = torch.rand(1, 3, 6, 6, generator=g, dtype=torch.float64).requires_grad_()
    lum = (0.2 + 0.8 * torch.rand(1, 1, 6, 6, generator=g, dtype=torch.float64)).requires_grad_()
    proj = gradcheck.random_projection((1, 3, 6, 6), 1)
    out = []
    for name, op in (("brighten", brighten), ("darken", darken)):
        errs = gradcheck.check_gradients(lambda op=op: (op(img, lum) * proj).sum(), {"img": img, "lum": lum})
        out.append(_grad_result(f"gradient: {name}", errs))
    return out


def check_grad_cose() -> CheckResult:
    g = _gen(5100)
    x = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64).requires_grad_()
    b = _random_bundle(g, 8, 8, torch.float64)
    # keep sampling positions away from integer grid lines, where bilinear weights kink
    frac = b.dp - torch.floor(b.dp)
    b.dp = torch.floor(b.dp) + 0.1 + 0.8 * frac
    dp, dc, dm = (t.clone().requires_grad_() for t in (b.dp, b.dc, b.dm))
    weight = torch.randn(3, 3, 3, 3, generator=g, dtype=torch.float64).requires_grad_()
    proj = gradcheck.random_projection((1, 3, 8, 8), 2)

    def fn():
        return (cose.color_deformable_conv(x, cose.OffsetBundle(dp, dc, dm), weight) * proj).sum()

    errs = gradcheck.check_gradients(fn, {"dp": dp, "dc": dc, "dm": dm, "kernel": weight, "x": x})
    return _grad_result("gradient: color deformable conv", errs)


def check_grad_como() -> CheckResult:
    g = _gen(5200)
    mod = randomize_como(como.ComoModule(dim=8, stride=1).double(), g, scale=0.3).train()
    img, ob, od = (torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64) for _ in range(3))
    proj = gradcheck.random_projection((2, 3, 16, 16), 3)
    named = dict(mod.named_parameters())
    errs = gradcheck.check_gradients(lambda: (mod(img, ob, od) * proj).sum(), named)
    return _grad_result("gradient: modulation (all parameters)", errs)


def check_grad_losses() -> CheckResult:
    g = _gen(5300)
    gt = 0.1 + 0.8 * torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    offset = (0.02 + 0.1 * torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64))
    sign = torch.where(torch.rand(1, 3, 16, 16, generator=g) < 0.5, -1.0, 1.0).double()
    pred = (gt + sign * offset).clamp(0.02, 0.98).requires_grad_()
    # keep every residual well clear of the L1 kink relative to the FD step
    fn_map = (gt - sign * offset).requires_grad_()
    feat = losses.RandomConvExtractor(seed=0).double()
    errs = {}
    for name, loss in (
        ("l1", lambda: losses.l1_loss(pred, gt)),
        ("cos", lambda: losses.cosine_loss(pred, gt)),
        ("ssim", lambda: losses.ssim_loss(pred, gt)),
        ("vgg", lambda: losses.perceptual_loss(pred, gt, feat)),
    ):
        errs[name] = gradcheck.check_gradients(loss, {"pred": pred})["pred"]
    errs["pseudo"] = gradcheck.check_gradients(lambda: losses.pseudo_loss(fn_map, gt), {"fn": fn_map})["fn"]
    w = losses.LossWeights()
    tot = gradcheck.check_gradients(lambda: losses.total_loss(pred, fn_map, gt, w, feat)[0], {"pred": pred, "fn": fn_map})
    errs.update({f"total/{k}": v for k, v in tot.items()})
    return _grad_result("gradient: losses", errs)


def check_identities() -> list[CheckResult]:
    g = _gen(6000)
    x = torch.rand(2, 3, 16, 16, generator=g)
    lum = 0.05 + 0.95 * torch.rand(2, 1, 16, 16, generator=g)
    # torch.rand and load_image both produce values on the 2^-24 grid
    codes = torch.arange(256, dtype=torch.float64).div(255).div(GRID).round().mul(GRID).float()
    inv_ok = bool(torch.equal(invert(invert(x)), x)) and bool(torch.equal(invert(invert(codes)), codes))
    duality = float((darken(x, lum) - invert(brighten(invert(x), lum))).abs().max())
    mod = randomize_como(como.ComoModule(dim=8), g)
    with torch.no_grad():
        mod.w4.weight.zero_()
        mod.w4.bias.zero_()
        y = mod.train()(x, torch.rand(2, 3, 16, 16, generator=g), torch.rand(2, 3, 16, 16, generator=g))
    residual_ok = bool(torch.equal(y, x))
    psi, phi = torch.randn(2, 8, 64, generator=g), torch.randn(2, 8, 64, generator=g)
    logits = como.affinity_logits(psi, phi)
    sym_ok = bool(torch.equal(logits, logits.transpose(-1, -2)))
    rowsum = float((como.affinity(psi, phi).sum(-1) - 1).abs().max())
    return [
        CheckResult("invert is an involution (bit-exact)", inv_ok, 0.0 if inv_ok else 1.0, 0.0),
        CheckResult("darken/brighten duality", duality <= 1e-6, duality, 1e-6),
        CheckResult("modulation residual identity (bit-exact)", residual_ok, 0.0 if residual_ok else 1.0, 0.0),
        CheckResult("affinity logits exactly symmetric", sym_ok, 0.0 if sym_ok else 1.0, 0.0),
        CheckResult("affinity rows sum to 1", rowsum <= 1e-5, rowsum, 1e-5),
    ]


def check_metrics() -> list[CheckResult]:
    g = _gen(7000)
    gt = 0.8 * torch.rand(3, 32, 32, generator=g, dtype=torch.float64)
    p = metrics.psnr(gt + 0.1, gt)
    black, white = torch.zeros(3, 16, 16), torch.ones(3, 16, 16)
    r = metrics.rmse_lab(black, white)
    s = metrics.ssim(gt, gt)
    return [
        CheckResult("PSNR of +0.1 offset is 20 dB", abs(p - 20.0) <= 1e-6, abs(p - 20.0), 1e-6),
        CheckResult("SSIM(x, x) = 1", abs(s - 1.0) <= 1e-12, abs(s - 1.0), 1e-12),
        CheckResult("RMSE-LAB(x, x) = 0", metrics.rmse_lab(gt, gt) == 0.0, metrics.rmse_lab(gt, gt), 0.0),
        CheckResult("RMSE-LAB(black, white) = 100/sqrt(3)", abs(r - 100 / math.sqrt(3)) <= 0.1,
                    abs(r - 100 / math.sqrt(3)), 0.1),
    ]


def all_checks(perturb_kernel: bool = False) -> list[Callable[[], CheckResult | list[CheckResult]]]:
    return [
        lambda: check_conv_degeneracy(perturb_kernel),
        lambda: check_eq_cose_oracle(perturb_kernel),
        check_eq_affinity_oracle,
        check_eq_cross_oracle,
        check_eq_como_oracle,
        check_identities,
        check_metrics,
        check_grad_brighten_darken,
        check_grad_cose,
        check_grad_como,
        check_grad_losses,
    ]


def run_all(perturb_kernel: bool = False, echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    results: list[CheckResult] = []
    t0 = time.perf_counter()
    for check in all_checks(perturb_kernel):
        out = check()
        for r in out if isinstance(out, list) else [out]:
            results.append(r)
            if echo:
                echo(r.line())
    if echo:
        passed = sum(r.passed for r in results)
        echo(f"{passed}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return results
