import pytest
import torch

from wavegms.blocks import SpatialSelfAttention
from wavegms.lmm import LatentMappingModel, LmmConfig


@pytest.fixture(scope="module")
def lmm():
    torch.manual_seed(0)
    return LatentMappingModel()


def test_bundle_shapes(lmm):
    with torch.no_grad():
        bundle = lmm(torch.randn(2, 4, 28, 28))
        tiny = lmm(torch.randn(2, 4, 2, 2))
    assert [z.shape for z in bundle.stage_latents] == [(2, 4, 28, 28)] * 4
    assert [z.shape for z in tiny.stage_latents] == [(2, 4, 2, 2)] * 4


def test_rejects_wrong_channels(lmm):
    with pytest.raises(ValueError):
        lmm(torch.randn(1, 3, 4, 4))


def test_attention_rows_sum_to_one(lmm):
    attn = [m for m in lmm.modules() if isinstance(m, SpatialSelfAttention)]
    assert len(attn) == 8
    x = torch.randn(2, 32, 7, 7)
    with torch.no_grad():
        w = attn[0].attention_weights(x)
    assert w.shape == (2, 49, 49)
    assert (w.sum(-1) - 1).abs().max() <= 1e-5


def test_inference_matches_final_stage(lmm):
    z = torch.randn(3, 4, 6, 6)
    with torch.no_grad():
        full = lmm(z).stage_latents[3]
        fast = lmm.forward_inference(z)
        again = lmm.forward_inference(z)
    assert torch.equal(full, fast)
    assert torch.equal(fast, again)


def test_parameter_budget(lmm):
    assert abs(lmm.num_params() - 1.56e6) <= 0.15 * 1.56e6


def test_config_requires_four_stages():
    with pytest.raises(ValueError):
        LmmConfig(stage_channels=[32, 64, 128])


def test_constant_resolution(lmm):
    shapes = []
    handles = [m.register_forward_hook(lambda m, i, o: shapes.append(o.shape[-2:]))
               for m in list(lmm.enc) + list(lmm.dec)]
    with torch.no_grad():
        lmm(torch.randn(1, 4, 5, 5))
    for h in handles:
        h.remove()
    assert len(shapes) == 8 and all(s == (5, 5) for s in shapes)


@pytest.mark.parametrize("dec_stage", [1, 2, 3])
def test_skip_connection_sensitivity(lmm, dec_stage):
    """Zeroing only the skip half of a decoder input changes that stage's output."""
    z = torch.randn(1, 4, 6, 6)
    enc_width = lmm.config.stage_channels[3 - dec_stage]
    outputs = {}

    def capture(m, i, o):
        outputs["out"] = o

    def zero_skip(m, inputs):
        x = inputs[0].clone()
        x[:, -enc_width:] = 0
        return (x,)

    cap = lmm.dec[dec_stage].register_forward_hook(capture)
    with torch.no_grad():
        lmm(z)
        base = outputs["out"]
        pre = lmm.dec[dec_stage].register_forward_pre_hook(zero_skip)
        lmm(z)
        pre.remove()
    cap.remove()
    assert not torch.allclose(base, outputs["out"])


def test_finite_difference_matches_autodiff():
    torch.manual_seed(3)
    lmm = LatentMappingModel().double()
    z = torch.randn(2, 4, 4, 4, dtype=torch.float64)
    target = torch.randn(2, 4, 4, 4, dtype=torch.float64)

    def loss():
        return sum(((s - target) ** 2).mean() for s in lmm(z).stage_latents)

    lmm.zero_grad()
    loss().backward()
    params = [p for p in lmm.parameters()]
    gen = torch.Generator().manual_seed(4)
    h = 1e-4
    for _ in range(10):
        p = params[torch.randint(len(params), (1,), generator=gen).item()]
        flat = torch.randint(p.numel(), (1,), generator=gen).item()
        auto = p.grad.view(-1)[flat].item()
        with torch.no_grad():
            p.view(-1)[flat] += h
            up = loss().item()
            p.view(-1)[flat] -= 2 * h
            down = loss().item()
            p.view(-1)[flat] += h
        fd = (up - down) / (2 * h)
        assert abs(fd - auto) <= 1e-3 * max(abs(fd), abs(auto), 1e-8)
