import numpy as np
import pytest
import torch

import wmnet.wunet as wunet_mod
from oracles import attention_weights_loop, central_difference_check
from wmnet import ValidationError
from wmnet.wavelet import dwt2
from wmnet.wunet import FAAttention, WUNet, WUNetConfig, decode, encode


def test_encode_constant_image():
    (level,) = encode(torch.full((1, 3, 4, 4), 0.7), 1)
    torch.testing.assert_close(level.low, torch.full((1, 3, 2, 2), 1.4))
    assert torch.count_nonzero(level.high) == 0
    assert level.high.shape == (1, 9, 2, 2)


def test_encode_shapes_and_energy():
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    pyr = encode(x, 2)
    assert [tuple(p.low.shape[-2:]) for p in pyr] == [(4, 4), (2, 2)]
    energy = (pyr[0].low**2).sum() + (pyr[0].high**2).sum()
    torch.testing.assert_close(energy, (x**2).sum())


def test_encode_rejects_zero_levels():
    with pytest.raises(ValidationError):
        encode(torch.zeros(1, 3, 4, 4), 0)
    with pytest.raises(ValidationError):
        WUNetConfig(levels=0)


def _tokens(att, ir_low, rgb_low, ir_high, rgb_high):
    f_low = torch.cat([ir_low, rgb_low], 1).flatten(2).transpose(1, 2)
    f_high = torch.cat([ir_high, rgb_high], 1).flatten(2).transpose(1, 2)
    return att.weights(f_low, f_high)


def test_fa_attention_zero_logits_is_uniform():
    torch.manual_seed(0)
    c, d = 3, 8
    att = FAAttention(c, d)
    with torch.no_grad():
        att.qkv_low.weight[: 2 * d].zero_()
        att.qkv_low.bias[: 2 * d].zero_()
        att.qk_high.weight.zero_()
        att.qk_high.bias.zero_()
    ins = [torch.randn(1, c, 3, 3), torch.randn(1, c, 3, 3), torch.randn(1, 3 * c, 3, 3), torch.randn(1, 3 * c, 3, 3)]
    w_a, low, high, v = _tokens(att, *ins)
    n = 9
    torch.testing.assert_close(w_a, torch.full((1, n, n), (1 / n) * (1 + 1 / n)))
    expected = att.proj(att.norm((1 + 1 / n) * v.mean(dim=1, keepdim=True))).expand(1, n, c)
    out = att(*ins)
    torch.testing.assert_close(out.flatten(2).transpose(1, 2), expected)


def test_fa_attention_matches_loop_oracle():
    torch.manual_seed(4)
    att = FAAttention(channels=1, dim=2).double()
    ins = [torch.randn(1, 1, 2, 2, dtype=torch.float64), torch.randn(1, 1, 2, 2, dtype=torch.float64),
           torch.randn(1, 3, 2, 2, dtype=torch.float64), torch.randn(1, 3, 2, 2, dtype=torch.float64)]
    f_low = torch.cat(ins[:2], 1).flatten(2).transpose(1, 2)
    f_high = torch.cat(ins[2:], 1).flatten(2).transpose(1, 2)
    q, k, _ = att.qkv_low(f_low)[0].split(2, dim=-1)
    qh, kh = att.qk_high(f_high)[0].split(2, dim=-1)
    ref, ref_low, _ = attention_weights_loop(*(t.detach().numpy() for t in (q, k, qh, kh)), d=2)
    w_a, low, _, _ = att.weights(f_low, f_high)
    np.testing.assert_allclose(w_a[0].detach().numpy(), ref, atol=1e-12)
    np.testing.assert_allclose(low[0].detach().numpy(), ref_low, atol=1e-12)


def test_fa_attention_weight_bounds():
    torch.manual_seed(1)
    att = FAAttention(3, 32)
    ins = [torch.randn(2, 3, 4, 4) * 3, torch.randn(2, 3, 4, 4) * 3, torch.randn(2, 9, 4, 4), torch.randn(2, 9, 4, 4)]
    w_a, low, high, _ = _tokens(att, *ins)
    assert torch.all(w_a > 0) and torch.all(w_a < 2)
    torch.testing.assert_close(low.sum(-1), torch.ones(2, 16), atol=1e-6, rtol=0)


def test_fa_attention_shape_mismatch():
    att = FAAttention(3)
    with pytest.raises(ValidationError):
        att(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 2, 2), torch.zeros(1, 9, 4, 4), torch.zeros(1, 9, 4, 4))


def test_decode_zero_inputs():
    x = torch.randn(1, 3, 4, 4)
    pyr = encode(x, 1)
    zero_pyr = [pyr[0]._replace(low=torch.zeros_like(pyr[0].low), high=torch.zeros_like(pyr[0].high))]
    out = decode(zero_pyr, zero_pyr, torch.zeros_like(pyr[0].low))
    assert out.shape == x.shape and torch.count_nonzero(out) == 0


def test_decode_perfect_reconstruction_one_level():
    x = torch.randn(1, 3, 8, 8)
    s = dwt2(x)
    ir_pyr = encode(x, 1)
    rgb_pyr = [ir_pyr[0]._replace(low=torch.zeros_like(s.ll))]
    torch.testing.assert_close(decode(rgb_pyr, ir_pyr, s.ll), x, atol=1e-6, rtol=0)


def test_decode_encode_wiring_with_zero_bottleneck():
    # same image in both streams: one level reproduces it exactly, deeper
    # pyramids add each RGB LL skip on top of the rebuilt low band
    x = torch.randn(1, 3, 16, 16, dtype=torch.float64)
    pyr1 = encode(x, 1)
    torch.testing.assert_close(decode(pyr1, pyr1, torch.zeros_like(pyr1[0].low)), x)
    pyr2 = encode(x, 2)
    out = decode(pyr2, pyr2, torch.zeros_like(pyr2[1].low))
    expected = decode(pyr1, pyr1, pyr1[0].low)  # level-1 LL arrives twice
    torch.testing.assert_close(out, expected)


def test_decode_depth_mismatch():
    x = torch.randn(1, 3, 8, 8)
    with pytest.raises(ValidationError):
        decode(encode(x, 2), encode(x, 1), torch.zeros(1, 3, 2, 2))


def test_residual_identity(monkeypatch):
    torch.manual_seed(0)
    net = WUNet()
    with torch.no_grad():
        net.conv.weight.zero_()
        for i in range(3):
            net.conv.weight[i, i, 1, 1] = 1.0
        net.conv.bias.zero_()
        net.scale.fill_(1.0)
    monkeypatch.setattr(wunet_mod, "decode", lambda rgb, ir, b: torch.zeros(b.shape[0], 3, 8, 8))
    rgb = torch.rand(2, 3, 8, 8)
    torch.testing.assert_close(net(rgb, torch.rand(2, 1, 8, 8)), rgb)


@pytest.mark.parametrize("size", [(4, 4), (8, 8), (6, 10), (16, 12), (32, 32)])
def test_forward_shape(size):
    net = WUNet()
    out = net(torch.rand(1, 3, *size), torch.rand(1, 1, *size))
    assert out.shape == (1, 3, *size)
    assert torch.isfinite(out).all()


def test_channel_mismatch():
    net = WUNet()
    with pytest.raises(ValidationError):
        net(torch.rand(1, 3, 8, 8), torch.rand(1, 2, 8, 8))
    with pytest.raises(ValidationError):
        net(torch.rand(1, 4, 8, 8), torch.rand(1, 1, 8, 8))


def test_forward_deterministic():
    torch.manual_seed(7)
    net = WUNet()
    rgb, ir = torch.rand(2, 3, 16, 16), torch.rand(2, 1, 16, 16)
    assert torch.equal(net(rgb, ir), net(rgb, ir))


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    net = WUNet(WUNetConfig(levels=2, channels=3, attention_dim=4)).double()
    rgb = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    ir = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    params = list(net.parameters())
    errors = central_difference_check(lambda: (net(rgb, ir) ** 2).sum(), params)
    assert max(errors.values()) <= 1e-3, errors
