"""Illumination branch: Fourier-domain correction blocks on the lighting field.

Each block splits the feature map into amplitude and phase half-spectra,
refines both with 1x1 conv stacks, inverts, and fuses the result with the
spatial path. Phase is handled in scaled form (divided by pi, tanh-rescaled
on the way out) because a bare ReLU would erase negative phases.

FFT convention: unnormalized forward, 1/(H*W) inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import FiaConfig
from .errors import NumericalStabilityError


@dataclass
class SpectrumPair:
    """Half-spectrum amplitude (non-negative) and phase in (-pi, pi]."""

    amplitude: torch.Tensor
    phase: torch.Tensor


def fft_decompose(x: torch.Tensor) -> SpectrumPair:
    """Half-spectrum amplitude/phase via real ops on the transform.

    The polar split is written with sqrt/atan2 on the real and imaginary
    parts rather than complex abs/angle: torch's complex backward for the
    abs-angle-polar composition disagrees with the actual forward map, which
    would sink every finite-difference gradient check downstream.
    """
    spectrum = torch.fft.rfft2(x, norm="backward")
    re, im = spectrum.real, spectrum.imag
    if not torch.isfinite(re).all() or not torch.isfinite(im).all():
        raise NumericalStabilityError("non-finite spectrum in frequency decomposition")
    amplitude = torch.sqrt(re * re + im * im + 1e-24)
    # exact-zero bins (constant maps) would make atan2's gradient 0/0
    safe_re = torch.where((re == 0) & (im == 0), torch.ones_like(re), re)
    phase = torch.atan2(im, safe_re)
    # atan2 emits exactly -pi on negative-real bins with negative-zero
    # imaginary parts; fold those onto +pi so phase stays in (-pi, pi].
    phase = torch.where(phase <= -math.pi, phase + 2 * math.pi, phase)
    return SpectrumPair(amplitude=amplitude, phase=phase)


def fft_compose(pair: SpectrumPair, size: tuple[int, int]) -> torch.Tensor:
    """Invert a (possibly modified) half spectrum back to a real map.

    The redundant columns are rebuilt by explicit Hermitian mirroring and the
    inverse runs as a full complex transform with the real part taken at the
    end. irfft2 would silently symmetrize a modified spectrum with a backward
    pass that no longer matches the forward map, again breaking
    finite-difference agreement.
    """
    h, w = size
    re = pair.amplitude * torch.cos(pair.phase)
    im = pair.amplitude * torch.sin(pair.phase)
    half_w = re.shape[-1]
    if half_w != w:

        def mirrored(part, sign):
            m = torch.flip(part[..., 1 : w - half_w + 1], dims=(-1,))
            return sign * torch.roll(torch.flip(m, dims=(-2,)), 1, dims=-2)

        re = torch.cat([re, mirrored(re, 1.0)], dim=-1)
        im = torch.cat([im, mirrored(im, -1.0)], dim=-1)
    spectrum = torch.complex(re, im)
    return torch.fft.ifft2(spectrum, norm="backward").real


class FourierCorrectionBlock(nn.Module):
    """x' = Conv3(x * x_hat) + s * x, x_hat the spectrally corrected map.

    With the spectral path disabled (no_fourier) x_hat is x itself and the
    amplitude/phase convolutions are never constructed, so the parameter
    delta of the ablation is exactly their size.
    """

    def __init__(self, channels: int, no_fourier: bool = False):
        super().__init__()
        if no_fourier:
            self.amp = None
            self.phase = None
        else:
            self.amp = nn.Sequential(
                nn.Conv2d(channels, channels, 1), nn.ReLU(), nn.Conv2d(channels, channels, 1)
            )
            self.phase = nn.Sequential(
                nn.Conv2d(channels, channels, 1), nn.ReLU(), nn.Conv2d(channels, channels, 1)
            )
        self.mix = nn.Conv2d(channels, channels, 3, padding=1)
        self.scale = nn.Parameter(torch.ones(channels))

    def spectral_correction(self, x: torch.Tensor) -> torch.Tensor:
        pair = fft_decompose(x)
        amplitude = self.amp(pair.amplitude)
        phase = torch.tanh(self.phase(pair.phase / math.pi)) * math.pi
        return fft_compose(SpectrumPair(amplitude, phase), x.shape[-2:])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x_hat = x if self.amp is None else self.spectral_correction(x)
        s = self.scale.to(x.dtype).view(1, -1, 1, 1)
        return self.mix(x * x_hat) + s * x


class FiaNet(nn.Module):
    """Stem conv -> K correction blocks -> zero-initialized head.

    Runs at full resolution; the head starts at zero so the branch is a
    no-op correction until trained.
    """

    def __init__(self, cfg: FiaConfig, in_channels: int = 1, no_fourier: bool = False):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, cfg.width, 3, padding=1)
        self.blocks = nn.Sequential(
            *[FourierCorrectionBlock(cfg.width, no_fourier) for _ in range(cfg.num_blocks)]
        )
        self.head = nn.Conv2d(cfg.width, in_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, l_eff: torch.Tensor) -> torch.Tensor:
        return self.head(self.blocks(self.stem(l_eff)))
