"""Training objectives: four weighted terms under three-level deep supervision.

total = sum_i level_weight[i] * (l_cb*CB + l_fft*FFT + l_ssim*(1-SSIM) + l_p*P)

The report keeps every raw term value next to the weights it was combined
with, so the scalar total can always be recomputed from its parts. The total
tensor itself is accumulated in float64 to make that recomputation exact at
the 1e-10 level.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeMismatchError

CHARBONNIER_EPS = 1e-3
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    """Term weights, level weights, and term toggles."""

    lambda_cb: float = 1.0
    lambda_fft: float = 0.1
    lambda_ssim: float = 0.5
    lambda_perceptual: float = 0.4
    level_weights: tuple[float, float, float] = (1.0, 0.5, 0.25)
    use_cb: bool = True
    use_fft: bool = True
    use_ssim: bool = True
    use_perceptual: bool = True

    def single_level(self) -> "LossWeights":
        return replace(self, level_weights=(1.0, 0.0, 0.0))

    def unscaled(self) -> "LossWeights":
        return replace(self, level_weights=(1.0, 1.0, 1.0))

    def active_terms(self) -> dict[str, float]:
        terms = {}
        if self.use_cb:
            terms["charbonnier"] = self.lambda_cb
        if self.use_fft:
            terms["fft_l1"] = self.lambda_fft
        if self.use_ssim:
            terms["ssim"] = self.lambda_ssim
        if self.use_perceptual:
            terms["perceptual"] = self.lambda_perceptual
        return terms


@dataclass
class LossReport:
    """Raw per-level term values plus everything needed to re-sum them."""

    term_values: dict[str, list[float]]
    term_weights: dict[str, float]
    level_weights: tuple[float, ...]
    total: torch.Tensor

    def recompute(self) -> float:
        out = 0.0
        for i, lw in enumerate(self.level_weights):
            for name, values in self.term_values.items():
                out += lw * self.term_weights[name] * values[i]
        return out


def _check_shapes(pred: torch.Tensor, target: torch.Tensor):
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")


def charbonnier(pred: torch.Tensor, target: torch.Tensor, eps: float = CHARBONNIER_EPS) -> torch.Tensor:
    _check_shapes(pred, target)
    diff = pred - target
    return torch.sqrt(diff * diff + eps * eps).mean()


def fft_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over stacked real and imaginary spectra."""
    _check_shapes(pred, target)
    ps = torch.fft.rfft2(pred, norm="backward")
    ts = torch.fft.rfft2(target, norm="backward")
    diff = torch.stack([ps.real - ts.real, ps.imag - ts.imag])
    return diff.abs().mean()


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(coords * coords) / (2 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_index(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean SSIM, 11x11 Gaussian window, valid padding, dynamic range 1.

    Images smaller than the window fall back to global statistics (one
    window spanning the whole image).
    """
    _check_shapes(pred, target)
    b, c, h, w = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        mu_x = pred.mean(dim=(2, 3))
        mu_y = target.mean(dim=(2, 3))
        var_x = pred.var(dim=(2, 3), unbiased=False)
        var_y = target.var(dim=(2, 3), unbiased=False)
        cov = ((pred - mu_x[..., None, None]) * (target - mu_y[..., None, None])).mean(dim=(2, 3))
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
        return (num / den).mean()
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA, pred.dtype, pred.device)
    kernel = window.expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def blur(x):
        return F.conv2d(x, kernel, groups=c)

    mu_x = blur(pred)
    mu_y = blur(target)
    var_x = blur(pred * pred) - mu_x * mu_x
    var_y = blur(target * target) - mu_y * mu_y
    cov = blur(pred * target) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return (num / den).mean()


def ssim_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return 1.0 - ssim_index(pred, target)


class DeskFeatureExtractor(nn.Module):
    """Fixed-seed 3-conv GELU stack; a download-free stand-in for deep features.

    Weights are drawn from a dedicated generator so two constructions with the
    same seed are identical, and they are frozen (gradients still flow to the
    input).
    """

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = (8, 16, 16)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cin = 3
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            with torch.no_grad():
                std = (2.0 / (cin * 9)) ** 0.5
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        y = x
        for conv in self.convs:
            y = F.gelu(conv(y))
            feats.append(y)
        return feats


class Vgg16FeatureExtractor(nn.Module):
    """Taps after the 2nd, 4th, and 7th convolutions of a VGG16 trunk."""

    TAP_LAYERS = (2, 7, 14)  # feature indices of those conv layers

    def __init__(self, weights_path: str | None = None):
        super().__init__()
        try:
            from torchvision.models import vgg16
        except ImportError as err:
            raise ConfigurationError(
                "perceptual extractor 'vgg16' needs torchvision installed"
            ) from err
        trunk = vgg16(weights=None).features[: max(self.TAP_LAYERS) + 1]
        if weights_path is None:
            raise ConfigurationError(
                "perceptual extractor 'vgg16' needs a weights path (no implicit download)"
            )
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        own = {k: v for k, v in state.items() if k.startswith("features.")}
        renamed = {k[len("features.") :]: v for k, v in own.items()}
        missing = trunk.load_state_dict(renamed, strict=False)
        if missing.missing_keys:
            raise ConfigurationError(f"vgg16 weights at {weights_path} do not cover the trunk")
        self.trunk = trunk
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        y = x
        for i, layer in enumerate(self.trunk):
            y = layer(y)
            if i in self.TAP_LAYERS:
                feats.append(y)
        return feats


def make_extractor(kind: str, weights_path: str | None = None, seed: int = 0) -> nn.Module:
    if kind == "desk":
        return DeskFeatureExtractor(seed=seed)
    if kind == "vgg16":
        return Vgg16FeatureExtractor(weights_path)
    raise ConfigurationError(f"unknown perceptual extractor '{kind}' (use 'desk' or 'vgg16')")


def perceptual(pred: torch.Tensor, target: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    _check_shapes(pred, target)
    if extractor is None:
        raise ConfigurationError("perceptual term requested without a feature extractor")
    loss = None
    for fp, ft in zip(extractor(pred), extractor(target)):
        term = F.mse_loss(fp, ft)
        loss = term if loss is None else loss + term
    return loss


def gt_pyramid(gt: torch.Tensor) -> list[torch.Tensor]:
    """Ground truth at scales 1, 1/2, 1/4 via the same bilinear operator."""
    h, w = gt.shape[-2:]
    levels = [gt]
    for i in (2, 4):
        levels.append(
            F.interpolate(gt, size=(h // i, w // i), mode="bilinear", align_corners=False)
        )
    return levels


def total_loss(
    pyramid_pred: list[torch.Tensor],
    pyramid_gt: list[torch.Tensor],
    weights: LossWeights,
    extractor: nn.Module | None = None,
) -> LossReport:
    if len(pyramid_pred) != 3 or len(pyramid_gt) != 3:
        raise ShapeMismatchError(
            f"expected 3 pyramid levels, got {len(pyramid_pred)} vs {len(pyramid_gt)}"
        )
    terms = weights.active_terms()
    if "perceptual" in terms and extractor is None:
        raise ConfigurationError("perceptual term enabled but no extractor supplied")

    values: dict[str, list[float]] = {name: [] for name in terms}
    total = torch.zeros((), dtype=torch.float64, device=pyramid_pred[0].device)
    for i, (pred, gt) in enumerate(zip(pyramid_pred, pyramid_gt)):
        lw = weights.level_weights[i]
        if lw == 0.0:
            for name in terms:
                values[name].append(0.0)
            continue
        for name, lam in terms.items():
            if name == "charbonnier":
                t = charbonnier(pred, gt)
            elif name == "fft_l1":
                t = fft_l1(pred, gt)
            elif name == "ssim":
                t = ssim_loss(pred, gt)
            else:
                t = perceptual(pred, gt, extractor)
            values[name].append(float(t.detach()))
            total = total + lw * lam * t.double()
    return LossReport(
        term_values=values,
        term_weights=dict(terms),
        level_weights=tuple(weights.level_weights),
        total=total,
    )
