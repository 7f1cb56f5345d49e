import pytest
import torch

from speedmaps.model import ModelConfig, TrafficSpeedNet
from speedmaps.model.config import EncoderConfig

from conftest import tiny_model_config


def _inputs(b=1, size=64):
    return (
        torch.rand(b, 3, size, size),
        torch.rand(b, 2, size, size) * 2 - 1,
        torch.randint(0, 7, (b,)),
        torch.randint(0, 24, (b,)),
    )


def test_forward_output_shapes_and_finiteness():
    net = TrafficSpeedNet(tiny_model_config()).eval()
    img, loc, d, h = _inputs(2)
    with torch.no_grad():
        out = net(img, loc, d, h)
    assert out.speed_mu.shape == (2, 64, 64)
    assert out.speed_sigma.shape == (2, 64, 64)
    assert out.road_logits.shape == (2, 64, 64)
    assert out.orientation_logits.shape == (2, 16, 64, 64)
    for t in (out.speed_mu, out.speed_sigma, out.road_logits, out.orientation_logits):
        assert torch.isfinite(t).all()
    assert (out.speed_mu >= 0).all()
    assert (out.speed_sigma >= net.cfg.sigma_floor).all()


def test_context_disabled_ignores_time():
    net = TrafficSpeedNet(tiny_model_config(context=())).eval()
    img, loc, _, _ = _inputs()
    with torch.no_grad():
        a = net(img, loc, torch.tensor([0]), torch.tensor([0]))
        b = net(img, loc, torch.tensor([6]), torch.tensor([23]))
    assert torch.equal(a.speed_mu, b.speed_mu)


def test_context_enabled_requires_inputs():
    net = TrafficSpeedNet(tiny_model_config())
    img, _, _, _ = _inputs()
    with pytest.raises(ValueError):
        net(img)


def test_time_pathway_changes_output():
    torch.manual_seed(0)
    net = TrafficSpeedNet(tiny_model_config(context=("time",))).eval()
    img, loc, _, _ = _inputs()
    with torch.no_grad():
        a = net(img, loc, torch.tensor([0]), torch.tensor([4]))
        b = net(img, loc, torch.tensor([0]), torch.tensor([17]))
    assert not torch.equal(a.speed_mu, b.speed_mu)


def test_image_disabled_removes_visual_information():
    net = TrafficSpeedNet(tiny_model_config(use_image=False)).eval()
    _, loc, d, h = _inputs()
    with torch.no_grad():
        a = net(torch.rand(1, 3, 64, 64), loc, d, h)
        b = net(torch.rand(1, 3, 64, 64), loc, d, h)
    assert torch.equal(a.speed_mu, b.speed_mu)


def test_gtpe_parameter_partition():
    net = TrafficSpeedNet(tiny_model_config())
    gtpe_ids = {id(p) for p in net.gtpe_parameters()}
    non_gtpe = {id(p) for _, p in net.non_gtpe_named_parameters()}
    all_ids = {id(p) for p in net.parameters()}
    assert gtpe_ids.isdisjoint(non_gtpe)
    assert gtpe_ids | non_gtpe == all_ids
    # fusion projections belong to the frozen set
    assert {id(p) for p in net.fusion3.parameters()} <= non_gtpe


def test_default_gtpe_parameter_count_is_adaptation_budget():
    net = TrafficSpeedNet(ModelConfig(encoder=EncoderConfig(image_size=64)))
    assert sum(p.numel() for p in net.gtpe_parameters()) == 67_840


def test_config_round_trip():
    cfg = tiny_model_config(context=("loc", "time"))
    back = ModelConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_config_rejects_no_tasks_or_inputs():
    with pytest.raises(ValueError):
        tiny_model_config(tasks=()).validate()
    with pytest.raises(ValueError):
        tiny_model_config(use_image=False, context=()).validate()


def test_gtpe_stride_one_matches_contract_resolution():
    cfg = tiny_model_config(gtpe_stride=1)
    net = TrafficSpeedNet(cfg).eval()
    img, loc, d, h = _inputs()
    enc = net.context_encoding(loc, d, h)
    assert enc.shape[-2:] == loc.shape[-2:]
    strided = TrafficSpeedNet(tiny_model_config(gtpe_stride=4)).eval()
    enc4 = strided.context_encoding(loc, d, h)
    assert enc4.shape[-2:] == (16, 16)
