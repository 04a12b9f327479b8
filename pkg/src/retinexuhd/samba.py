"""Reflectance branch: a 3-level encoder-decoder of scale-adaptive mixer blocks.

Each block refines features with a residual stack of dilated convolutions,
spreads them over three spatial scales, and gates the recombination with the
grouped state-space mixer. The branch emits an additive correction for the
reflectance map plus its decoder features, which downstream pyramid heads
reuse.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import GssmConfig, SambConfig
from .errors import ShapeMismatchError
from .gssm import GlobalEmbedding, Gssb

MIN_BRANCH_INPUT = 16


class ResidualDilatedBlock(nn.Module):
    """Three dilated 3x3 convs with LeakyReLU(0.2) between, plus the input."""

    def __init__(self, channels: int, rates: tuple[int, ...] = (1, 2, 3)):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=r, dilation=r) for r in rates
        )
        self.channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ShapeMismatchError(f"expected {self.channels} channels, got {x.shape[1]}")
        y = x
        for i, conv in enumerate(self.convs):
            y = conv(y)
            if i + 1 < len(self.convs):
                y = F.leaky_relu(y, 0.2)
        return x + y


class MultiScaleExpand(nn.Module):
    """Per-scale dilated conv at resolutions 1, 1/2, 1/4, upsampled back to full."""

    def __init__(self, channels: int, rates: tuple[int, ...] = (1, 2, 3), scales: tuple[int, ...] = (1, 2, 4)):
        super().__init__()
        if len(rates) != len(scales):
            raise ValueError("one dilation rate per scale")
        self.branches = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=r, dilation=r) for r in rates
        )
        self.scales = scales

    def forward(self, x_s: torch.Tensor) -> list[torch.Tensor]:
        h, w = x_s.shape[-2:]
        outs = []
        for conv, scale in zip(self.branches, self.scales):
            if scale == 1:
                outs.append(conv(x_s))
                continue
            y = F.adaptive_avg_pool2d(x_s, (max(1, h // scale), max(1, w // scale)))
            y = conv(y)
            outs.append(F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False))
        return outs


class Samb(nn.Module):
    """Scale-adaptive block: x' = sum_i x_i * gate_i + x_s.

    With the mixer disabled the gates are held open (all ones), which reduces
    the block to sum_i x_i + x_s without adding or removing any other
    parameters.
    """

    def __init__(
        self,
        channels: int,
        samb_cfg: SambConfig,
        gssm_cfg: GssmConfig,
        global_embedding: GlobalEmbedding,
        no_gssb: bool = False,
        no_multiscale: bool = False,
    ):
        super().__init__()
        self.rdb = ResidualDilatedBlock(channels, samb_cfg.dilation_rates)
        if no_multiscale:
            rates = samb_cfg.dilation_rates[:1]
            scales = (1,)
        else:
            rates = samb_cfg.dilation_rates
            scales = (1, 2, 4)
        self.expand = MultiScaleExpand(channels, rates, scales)
        self.num_scales = len(scales)
        mix_channels = channels * self.num_scales
        if no_gssb:
            self.mixers = None
        else:
            self.mixers = nn.Sequential(
                *[Gssb(mix_channels, gssm_cfg, global_embedding) for _ in range(samb_cfg.num_gssb)]
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x_s = self.rdb(x)
        parts = self.expand(x_s)
        stacked = torch.cat(parts, dim=1)
        if self.mixers is None:
            gates = [torch.ones_like(p) for p in parts]
        else:
            gates = self.mixers(stacked).chunk(self.num_scales, dim=1)
        out = x_s
        for part, gate in zip(parts, gates):
            out = out + part * gate
        return out


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, int, int]:
    """Reflection-pad bottom/right so H and W divide `multiple`; returns pads."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, ph, pw


class SambaNet(nn.Module):
    """U-shaped reflectance corrector built from one Samb per level.

    forward returns (correction, decoder_features) where decoder_features are
    the full-, half-, and quarter-resolution decoder maps (cropped to
    floor(H / 2^i) x floor(W / 2^i)).
    """

    def __init__(
        self,
        samb_cfg: SambConfig,
        gssm_cfg: GssmConfig,
        global_embedding: GlobalEmbedding,
        in_channels: int = 3,
        no_gssb: bool = False,
        no_multiscale: bool = False,
    ):
        super().__init__()
        w0, w1, w2 = samb_cfg.level_widths
        self.level_widths = (w0, w1, w2)
        block = lambda ch: Samb(ch, samb_cfg, gssm_cfg, global_embedding, no_gssb, no_multiscale)  # noqa: E731
        self.stem = nn.Conv2d(in_channels, w0, 3, padding=1)
        self.enc0 = block(w0)
        self.down0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.enc1 = block(w1)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.bottleneck = block(w2)
        self.up1 = nn.Conv2d(w2, w1, 3, padding=1)
        self.up0 = nn.Conv2d(w1, w0, 3, padding=1)
        self.head = nn.Conv2d(w0, in_channels, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, r_eff: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        h, w = r_eff.shape[-2:]
        if h < MIN_BRANCH_INPUT or w < MIN_BRANCH_INPUT:
            raise ShapeMismatchError(
                f"reflectance branch needs at least {MIN_BRANCH_INPUT}x{MIN_BRANCH_INPUT}, got {h}x{w}"
            )
        x, _, _ = pad_to_multiple(r_eff, 4)
        e0 = self.enc0(self.stem(x))
        e1 = self.enc1(self.down0(e0))
        b = self.bottleneck(self.down1(e1))
        d1 = self.up1(F.interpolate(b, size=e1.shape[-2:], mode="bilinear", align_corners=False)) + e1
        d0 = self.up0(F.interpolate(d1, size=e0.shape[-2:], mode="bilinear", align_corners=False)) + e0
        correction = self.head(d0)[:, :, :h, :w]
        features = [
            d0[:, :, :h, :w],
            d1[:, :, : h // 2, : w // 2],
            b[:, :, : h // 4, : w // 4],
        ]
        return correction, features
