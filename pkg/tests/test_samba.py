"""Reflectance-branch tests: block algebra, shape contracts, gradients."""

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from retinexuhd.config import GssmConfig, SambConfig
from retinexuhd.errors import ShapeMismatchError
from retinexuhd.gssm import GlobalEmbedding
from retinexuhd.samba import (
    MultiScaleExpand,
    ResidualDilatedBlock,
    Samb,
    SambaNet,
    pad_to_multiple,
)


def small_cfgs(widths=(4, 6, 8), num_gssb=1):
    samb = SambConfig(level_widths=widths, num_gssb=num_gssb, dilation_rates=(1, 2, 3))
    gssm = GssmConfig(state_dim=3, num_embeddings=4, embed_rank=2, expand=1.0, pos_table_size=4)
    return samb, gssm


def make_samb(channels=4, **kw):
    samb, gssm = small_cfgs()
    glob = GlobalEmbedding(gssm.embed_rank, gssm.state_dim)
    return Samb(channels, samb, gssm, glob, **kw)


def test_rdb_residual_identity_with_zero_last_conv():
    torch.manual_seed(0)
    block = ResidualDilatedBlock(5)
    with torch.no_grad():
        block.convs[-1].weight.zero_()
        block.convs[-1].bias.zero_()
        x = torch.randn(2, 5, 12, 12)
        assert torch.equal(block(x), x)


def test_rdb_shape_and_channel_check():
    torch.manual_seed(1)
    block = ResidualDilatedBlock(6)
    x = torch.randn(1, 6, 32, 32)
    assert block(x).shape == x.shape
    with pytest.raises(ShapeMismatchError):
        block(torch.randn(1, 3, 8, 8))


def test_multiscale_constant_preservation():
    """Identity-initialized per-scale convs keep a constant map constant."""
    expand = MultiScaleExpand(3)
    with torch.no_grad():
        for conv in expand.branches:
            nn.init.dirac_(conv.weight)
            conv.bias.zero_()
        x = torch.full((1, 3, 16, 16), 0.37)
        for out in expand(x):
            assert torch.allclose(out, x, atol=1e-6)


def test_multiscale_scale_schedule():
    torch.manual_seed(2)
    expand = MultiScaleExpand(4)
    x = torch.randn(1, 4, 64, 64)
    with torch.no_grad():
        pooled_half = F.adaptive_avg_pool2d(x, (32, 32))
        pooled_quarter = F.adaptive_avg_pool2d(x, (16, 16))
        want_half = F.adaptive_avg_pool2d(x, (x.shape[-2] // 2, x.shape[-1] // 2))
        assert torch.allclose(pooled_half, want_half)
        assert pooled_quarter.shape[-2:] == (16, 16)
        for out in expand(x):
            assert out.shape == x.shape


def test_bilinear_upsample_matches_hand_oracle():
    """2x2 checkerboard to 4x4 against hand-computed align_corners=False weights."""
    x = torch.tensor([[[[0.0, 1.0], [1.0, 0.0]]]])
    up = F.interpolate(x, size=(4, 4), mode="bilinear", align_corners=False)
    # source coordinate for output i is (i + 0.5) / 2 - 0.5 = i/2 - 0.25
    coords = [max(0.0, min(1.0, i / 2 - 0.25)) for i in range(4)]
    want = torch.empty(4, 4)
    src = x[0, 0]
    for i, yi in enumerate(coords):
        y0, wy = int(yi), yi - int(yi)
        y1 = min(y0 + 1, 1)
        for j, xj in enumerate(coords):
            x0, wx = int(xj), xj - int(xj)
            x1 = min(x0 + 1, 1)
            want[i, j] = (
                src[y0, x0] * (1 - wy) * (1 - wx)
                + src[y0, x1] * (1 - wy) * wx
                + src[y1, x0] * wy * (1 - wx)
                + src[y1, x1] * wy * wx
            )
    assert torch.allclose(up[0, 0], want, atol=1e-6)


def test_samb_gate_open_and_gate_closed_reductions():
    torch.manual_seed(3)
    block = make_samb(channels=4).eval()
    x = torch.randn(1, 4, 16, 16)
    with torch.no_grad():
        x_s = block.rdb(x)
        parts = block.expand(x_s)

        open_block = make_samb(channels=4, no_gssb=True).eval()
        open_block.rdb.load_state_dict(block.rdb.state_dict())
        open_block.expand.load_state_dict(block.expand.state_dict())
        got_open = open_block(x)
        want_open = x_s + parts[0] + parts[1] + parts[2]
        assert torch.allclose(got_open, want_open, atol=1e-6)


def test_samb_matches_hand_algebra_with_frozen_gates():
    """Force the mixer output and check sum_i x_i * gate_i + x_s at 1e-12."""
    torch.manual_seed(4)
    block = make_samb(channels=3).double().eval()
    x = torch.randn(1, 3, 16, 16, dtype=torch.float64)
    frozen = torch.randn(1, 9, 16, 16, dtype=torch.float64)

    class Constant(nn.Module):
        def forward(self, _):
            return frozen

    block.mixers = Constant()
    with torch.no_grad():
        x_s = block.rdb(x)
        parts = block.expand(x_s)
        gates = frozen.chunk(3, dim=1)
        want = x_s + sum(p * g for p, g in zip(parts, gates))
        got = block(x)
    assert (got - want).abs().max() < 1e-12


def test_samb_forward_finite_and_shape():
    torch.manual_seed(5)
    block = make_samb(channels=4).eval()
    x = torch.randn(2, 4, 32, 32)
    with torch.no_grad():
        y = block(x)
    assert y.shape == x.shape
    assert torch.isfinite(y).all()


def test_samb_gradient_check_small():
    torch.manual_seed(6)
    block = make_samb(channels=3).double().eval()
    x = torch.randn(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    (block(x) * w).sum().backward()
    grad = x.grad.clone()
    eps = 1e-6
    worst = 0.0
    for idx in [(0, 0, 0, 0), (0, 1, 3, 4), (0, 2, 7, 7), (0, 0, 5, 2), (0, 1, 6, 1)]:
        plus = x.detach().clone()
        plus[idx] += eps
        minus = x.detach().clone()
        minus[idx] -= eps
        with torch.no_grad():
            fd = ((block(plus) * w).sum() - (block(minus) * w).sum()) / (2 * eps)
        denom = max(abs(float(fd)), abs(float(grad[idx])), 1e-8)
        worst = max(worst, abs(float(fd) - float(grad[idx])) / denom)
    assert worst < 1e-4


def branch(widths=(4, 6, 8), **kw):
    samb, gssm = small_cfgs(widths)
    glob = GlobalEmbedding(gssm.embed_rank, gssm.state_dim)
    return SambaNet(samb, gssm, glob, **kw)


def test_branch_shape_contract_and_feature_scales():
    torch.manual_seed(7)
    net = branch().eval()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        corr, feats = net(x)
    assert corr.shape == (1, 3, 64, 64)
    assert feats[0].shape == (1, 4, 64, 64)
    assert feats[1].shape == (1, 6, 32, 32)
    assert feats[2].shape == (1, 8, 16, 16)


def test_branch_zero_head_gives_zero_correction():
    torch.manual_seed(8)
    net = branch().eval()
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        corr, _ = net(x)
    assert torch.equal(corr, torch.zeros_like(corr))


def test_branch_odd_sizes_pad_and_crop():
    torch.manual_seed(9)
    net = branch().eval()
    x = torch.rand(1, 3, 37, 53)
    with torch.no_grad():
        corr, feats = net(x)
    assert corr.shape == (1, 3, 37, 53)
    assert feats[1].shape[-2:] == (18, 26)
    assert feats[2].shape[-2:] == (9, 13)


def test_branch_rejects_tiny_input():
    net = branch()
    with pytest.raises(ShapeMismatchError):
        net(torch.rand(1, 3, 8, 8))


def test_pad_to_multiple_roundtrip():
    torch.manual_seed(10)
    x = torch.randn(1, 2, 13, 19)
    padded, ph, pw = pad_to_multiple(x, 4)
    assert padded.shape[-2:] == (16, 20)
    assert (ph, pw) == (3, 1)
    assert torch.equal(padded[:, :, :13, :19], x)


def test_branch_desk_param_count_closed_form():
    """Parameter total equals an independent analytic sum over declared layers."""
    samb_cfg = SambConfig(level_widths=(16, 32, 64), num_gssb=1, dilation_rates=(1, 2, 3))
    gssm_cfg = GssmConfig(state_dim=8, num_embeddings=64, embed_rank=32, expand=1.0, pos_table_size=16)
    glob = GlobalEmbedding(gssm_cfg.embed_rank, gssm_cfg.state_dim)
    net = SambaNet(samb_cfg, gssm_cfg, glob)

    def conv_params(cin, cout, k):
        return cout * cin * k * k + cout

    def gssb_params(mix, cfg):
        inner = mix  # expand 1.0
        total = 2 * (2 * mix)  # two channel layernorms
        total += cfg.pos_table_size**2 * mix  # positional table
        total += mix * cfg.num_embeddings + cfg.num_embeddings  # policy linear
        total += cfg.num_embeddings * cfg.embed_rank  # local embedding factor
        total += mix * inner + inner  # in_proj
        total += inner * cfg.state_dim  # a_log
        total += inner * inner  # delta_proj (no bias)
        total += inner  # delta_bias
        total += 2 * inner * cfg.state_dim  # b_proj, c_proj
        total += inner  # skip
        total += inner * mix + mix  # out_proj
        total += 2 * mix  # the two residual scales
        hidden = 2 * mix  # feed-forward
        total += mix * hidden + hidden  # expand 1x1
        total += hidden * 9 + hidden  # depthwise 3x3
        total += hidden * mix + mix  # contract 1x1
        return total

    def samb_params(ch):
        total = 3 * conv_params(ch, ch, 3)  # rdb
        total += 3 * conv_params(ch, ch, 3)  # per-scale convs
        total += gssb_params(3 * ch, gssm_cfg)
        return total

    w0, w1, w2 = samb_cfg.level_widths
    want = conv_params(3, w0, 3)
    want += samb_params(w0) + conv_params(w0, w1, 3)
    want += samb_params(w1) + conv_params(w1, w2, 3)
    want += samb_params(w2)
    want += conv_params(w2, w1, 3) + conv_params(w1, w0, 3)
    want += conv_params(w0, 3, 1)

    # the shared global factor registers under the net once (dedup across banks)
    got = sum(p.numel() for p in net.parameters())
    want += gssm_cfg.embed_rank * gssm_cfg.state_dim
    assert got == want
