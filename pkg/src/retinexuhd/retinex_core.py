"""Decomposition/recomposition math and the full restoration pipeline.

An image is split into effective reflectance and illumination; each branch
predicts an additive correction for its component; the restored image is the
product of the corrected pair. The illumination correction is applied to the
pre-positivity logits so that a zero correction reproduces the decomposed
illumination exactly while the recomposed field stays strictly positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigurationError, NonFiniteInputError, ShapeMismatchError
from .fia import FiaNet
from .gssm import GlobalEmbedding
from .samba import MIN_BRANCH_INPUT, SambaNet


@dataclass
class RetinexPair:
    """Effective reflectance (3ch) and strictly positive illumination (1ch)."""

    reflectance: torch.Tensor
    illumination: torch.Tensor


@dataclass
class RestorationOutput:
    """Final image plus the supervised pyramid.

    pyramid holds the clamped emission at scales 1, 1/2, 1/4; raw_pyramid the
    unclamped products that losses consume; retinex_pyramid the (R_i, L_i)
    pairs each level was recomposed from.
    """

    final_image: torch.Tensor
    pyramid: list[torch.Tensor]
    raw_pyramid: list[torch.Tensor]
    retinex_pyramid: list[RetinexPair]


def _validate_image(image: torch.Tensor):
    if image.dim() != 4 or image.shape[1] != 3:
        raise ShapeMismatchError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h < MIN_BRANCH_INPUT or w < MIN_BRANCH_INPUT:
        raise ShapeMismatchError(
            f"image must be at least {MIN_BRANCH_INPUT}x{MIN_BRANCH_INPUT}, got {h}x{w}"
        )
    if not torch.isfinite(image).all():
        raise NonFiniteInputError("image contains NaN or Inf pixels")


def recompose(reflectance: torch.Tensor, illumination: torch.Tensor) -> torch.Tensor:
    """Elementwise product with the single illumination channel broadcast over RGB."""
    if illumination.shape[1] != 1:
        raise ShapeMismatchError(f"illumination must be single-channel, got {illumination.shape[1]}")
    if reflectance.shape[-2:] != illumination.shape[-2:]:
        raise ShapeMismatchError(
            f"spatial mismatch {tuple(reflectance.shape[-2:])} vs {tuple(illumination.shape[-2:])}"
        )
    return reflectance * illumination


class RetinexDecomposer(nn.Module):
    """Two 3x3 convs to the base width, one 1x1 projection to R (3) + L-logit (1).

    The projection is residual on the input for reflectance and zero-initialized,
    with the illumination bias preset so the map starts at exactly 1: a freshly
    built model is the identity restorer.
    """

    def __init__(self, base_channels: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, base_channels, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base_channels, base_channels, 3, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.proj = nn.Conv2d(base_channels, 4, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        with torch.no_grad():
            self.proj.bias[3] = math.log(math.expm1(1.0))  # softplus^-1(1)

    def forward(self, image: torch.Tensor) -> tuple[RetinexPair, torch.Tensor]:
        """Returns the pair plus the raw illumination logits the restorer corrects."""
        _validate_image(image)
        heads = self.proj(self.features(image))
        reflectance = image + heads[:, :3]
        logits = heads[:, 3:4]
        return RetinexPair(reflectance, F.softplus(logits)), logits


def _down(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if x.shape[-2:] == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class RetinexRestorer(nn.Module):
    """decompose -> per-component corrections -> multi-scale recomposition."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        abl = cfg.ablation
        self.decomposer = RetinexDecomposer(cfg.base_channels)
        use_mixer = not abl.no_samba and not abl.no_gssb
        self.global_embedding = (
            GlobalEmbedding(cfg.gssm.embed_rank, cfg.gssm.state_dim) if use_mixer else None
        )
        if abl.no_samba:
            self.samba = None
            self.pyramid_heads = None
        else:
            self.samba = SambaNet(
                cfg.samba,
                cfg.gssm,
                self.global_embedding,
                no_gssb=abl.no_gssb,
                no_multiscale=abl.no_multiscale,
            )
            _, w1, w2 = cfg.samba.level_widths
            self.pyramid_heads = nn.ModuleList([nn.Conv2d(w1, 3, 1), nn.Conv2d(w2, 3, 1)])
            for head in self.pyramid_heads:
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)
        self.fia = None if abl.no_fia else FiaNet(cfg.fia, no_fourier=abl.no_fourier)

    def forward(self, image: torch.Tensor) -> RestorationOutput:
        _validate_image(image)
        h, w = image.shape[-2:]
        if self.cfg.max_pixels is not None and h * w > self.cfg.max_pixels:
            raise ConfigurationError(
                f"{h}x{w} exceeds the configured {self.cfg.max_pixels}-pixel budget; "
                "restore by tiles (CLI --tile) or raise model.max_pixels"
            )
        pair, logits = self.decomposer(image)

        if self.samba is None:
            r_full = pair.reflectance
            features = None
        else:
            correction, features = self.samba(pair.reflectance)
            r_full = pair.reflectance + correction

        if self.fia is None:
            l_full = pair.illumination
        else:
            l_full = F.softplus(logits + self.fia(pair.illumination))

        sizes = [(h, w), (h // 2, w // 2), (h // 4, w // 4)]
        raw_pyramid = []
        pyramid = []
        retinex_pyramid = []
        for level, size in enumerate(sizes):
            if level == 0:
                r_level = r_full
            else:
                r_level = _down(pair.reflectance, size)
                if features is not None:
                    r_level = r_level + self.pyramid_heads[level - 1](features[level])
            l_level = _down(l_full, size)
            raw = recompose(r_level, l_level)
            raw_pyramid.append(raw)
            pyramid.append(raw.clamp(0.0, 1.0))
            retinex_pyramid.append(RetinexPair(r_level, l_level))
        return RestorationOutput(
            final_image=pyramid[0],
            pyramid=pyramid,
            raw_pyramid=raw_pyramid,
            retinex_pyramid=retinex_pyramid,
        )
