import pytest
import torch

from exposhift.model import ExposureNet, ModelConfig, count_parameters


def test_default_parameter_budget():
    n = count_parameters(ExposureNet())
    assert 200_000 <= n <= 450_000


def test_forward_shapes_and_aux():
    model = ExposureNet(ModelConfig(extractor_width=4)).eval()
    x = torch.rand(2, 3, 16, 24)
    with torch.no_grad():
        y, fn, aux = model(x, return_aux=True)
    assert y.shape == fn.shape == x.shape
    assert aux["lum_u"].shape == (2, 1, 16, 24)
    for k in ("fb", "fd", "ob", "od"):
        assert aux[k].shape == x.shape


def test_fresh_model_output_is_input():
    # w4 starts at zero, so the residual path returns the input exactly
    model = ExposureNet(ModelConfig(extractor_width=4)).eval()
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(model(x)[0], x)


def test_eval_is_deterministic():
    model = ExposureNet(ModelConfig(extractor_width=4))
    with torch.no_grad():
        model.fusion.w4.weight.normal_()
    model.eval()
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(model(x)[0], model(x)[0])


def test_enhance_pads_and_crops():
    model = ExposureNet(ModelConfig(extractor_width=4)).eval()
    x = torch.rand(3, 13, 21)
    with torch.no_grad():
        y = model.enhance(x)
        yb = model.enhance(x.unsqueeze(0))
    assert y.shape == x.shape and yb.shape == (1, 3, 13, 21)


def test_share_generator_ties_weights():
    shared = ExposureNet(ModelConfig(extractor_width=4, share_generator=True))
    assert shared.generator.embed is None
    assert shared.generator.shared_embed[0] is shared.fusion.branches["I"].conv_z
    unshared = ExposureNet(ModelConfig(extractor_width=4, share_generator=False))
    assert unshared.generator.embed is not None
    assert count_parameters(unshared) == count_parameters(shared) + 8 * 3 + 8


def test_opposed_maps_and_separate_extractors():
    x = torch.rand(1, 3, 16, 16)
    opp = ExposureNet(ModelConfig(extractor_width=4, opposed_maps=True)).eval()
    with torch.no_grad():
        lu, lo = opp.illumination(x)
    assert torch.allclose(lo, 1 - lu)
    sep = ExposureNet(ModelConfig(extractor_width=4, separate_extractors=True))
    assert sep.extractor_dark is not None
    with pytest.raises(ValueError):
        ModelConfig(separate_extractors=True, opposed_maps=True)


def test_config_validation_and_digest():
    with pytest.raises(ValueError):
        ModelConfig(deform_mode="bogus")
    with pytest.raises(ValueError):
        ModelConfig(attention_mode="bogus")
    with pytest.raises(ValueError):
        ModelConfig(illum_channels=2)
    assert ModelConfig().digest() == ModelConfig().digest()
    assert ModelConfig().digest() != ModelConfig(como_dim=16).digest()


def test_three_channel_illumination():
    model = ExposureNet(ModelConfig(extractor_width=4, illum_channels=3)).eval()
    with torch.no_grad():
        lu, _ = model.illumination(torch.rand(1, 3, 16, 16))
    assert lu.shape == (1, 3, 16, 16)
