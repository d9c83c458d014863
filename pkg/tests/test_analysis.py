import csv
import json

import numpy as np
import pytest
import torch
from scipy.ndimage import binary_erosion

from exposhift import analysis
from exposhift.analysis import NORMAL, OVER, UNDER, classify_exposure, pca_color_shift
from exposhift.data import DegradationSpec, synthesize_degraded, synthesize_scene, synthetic_pairs


def test_classify_trivial_cases():
    gt = torch.rand(3, 8, 8) * 0.5
    assert (classify_exposure(gt, gt) == NORMAL).all()
    assert (classify_exposure(gt + 0.3, gt) == OVER).all()
    assert (classify_exposure(gt, gt + 0.3) == UNDER).all()
    with pytest.raises(ValueError):
        classify_exposure(gt, torch.rand(3, 8, 9))


@pytest.mark.parametrize("seed", range(4))
def test_classify_agrees_with_generator_masks(seed):
    gt = synthesize_scene(64, 64, seed)
    inp, over, under = synthesize_degraded(gt, DegradationSpec(seed=seed))
    labels = classify_exposure(inp, gt)
    truth = torch.zeros_like(labels)
    truth[over], truth[under] = OVER, UNDER
    # interior of each generator region, away from feathered boundaries
    interior = np.zeros((64, 64), bool)
    for m in (over.numpy(), under.numpy(), ~(over | under).numpy()):
        interior |= binary_erosion(m, iterations=3)
    agree = (labels == truth).numpy()[interior].mean()
    assert agree >= 0.9


def test_identical_pairs_are_rank_zero():
    x = torch.rand(3, 16, 16)
    res = pca_color_shift([(x, x)], 50, labels=None)
    assert res.rank == 0
    assert np.allclose(res.eigenvalues, 0)


def test_line_shaped_shifts_are_rank_one():
    g = torch.Generator().manual_seed(0)
    gt = 0.3 + 0.2 * torch.rand(3, 16, 16, generator=g)
    t = 0.15 + 0.1 * torch.rand(1, 16, 16, generator=g)
    direction = torch.tensor([1.0, 0.5, 0.2]).view(3, 1, 1)
    res = pca_color_shift([(gt + t * direction, gt)], 200, labels=("over",))
    assert res.rank == 1
    assert res.eigenvalues[1] == pytest.approx(0.0, abs=1e-12)
    axis = res.components[0]
    assert abs(abs(axis @ (direction.flatten().numpy() / np.linalg.norm(direction.numpy())))) == pytest.approx(1.0)


def test_components_orthonormal_and_sorted():
    pairs = synthetic_pairs(4, 48, DegradationSpec(), seed=2)
    res = pca_color_shift(pairs, 300, labels=None)
    comps = res.components
    assert np.allclose(comps @ comps.T, np.eye(2), atol=1e-10)
    assert res.eigenvalues[0] >= res.eigenvalues[1] >= res.eigenvalues[2] >= 0


def test_reconstruction_residual_equals_third_eigenvalue():
    g = torch.Generator().manual_seed(3)
    gt = 0.3 + 0.3 * torch.rand(3, 32, 32, generator=g)
    inp = gt + 0.05 * torch.randn(3, 32, 32, generator=g)
    res = pca_color_shift([(inp, gt)], 32 * 32, labels=None)
    diff = (inp - gt).double().flatten(1).numpy().T
    centered = diff - res.mean
    proj = centered @ res.components.T
    back = proj @ res.components
    lost = ((centered - back) ** 2).sum(axis=1).mean()
    cov = np.cov(centered, rowvar=False, bias=True)
    assert lost == pytest.approx(res.eigenvalues[2], rel=1e-9)
    assert res.eigenvalues.sum() == pytest.approx(np.trace(cov), rel=1e-9)


def test_over_under_reverse_shift_on_synthetic_pairs():
    pairs = synthetic_pairs(20, 64, DegradationSpec(), seed=0)
    res = pca_color_shift(pairs, 200, seed=0)
    assert res.over_under_dot < 0
    assert set(res.label_means) == {"over", "under"}


def test_missing_label_and_bad_samples():
    x = torch.rand(3, 8, 8) * 0.5
    with pytest.raises(ValueError, match="under"):
        pca_color_shift([(x + 0.3, x)], 10)
    with pytest.raises(ValueError):
        pca_color_shift([(x, x)], 0)
    with pytest.raises(ValueError):
        pca_color_shift([], 10)


def test_deterministic_and_writers(tmp_path):
    pairs = synthetic_pairs(3, 32, DegradationSpec(), seed=1)
    a = pca_color_shift(pairs, 50, seed=4)
    b = pca_color_shift(pairs, 50, seed=4)
    assert np.array_equal(a.points, b.points) and a.labels == b.labels
    analysis.write_points(a, tmp_path / "p.csv")
    analysis.write_points(b, tmp_path / "q.csv")
    assert (tmp_path / "p.csv").read_bytes() == (tmp_path / "q.csv").read_bytes()
    with open(tmp_path / "p.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "y", "label"] and len(rows) == 1 + len(a.labels)
    analysis.write_summary(a, tmp_path / "s.json")
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary["over_under_dot"] == pytest.approx(a.over_under_dot)
    assert len(summary["components"]) == 2
