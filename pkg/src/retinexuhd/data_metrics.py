"""Paired-image ingestion, synthetic degradations, metrics, and analysis.

The loader expects `root/input/*` and `root/gt/*` with filenames paired by
stem. Degradations are seeded desk-scale stand-ins for four restoration
tasks. frequency_gap reproduces the spatial-vs-frequency PSNR comparison
that motivates routing global corruption to the illumination branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import DataError, ShapeMismatchError
from .objectives import ssim_index

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
SIXTEEN_BIT_MODES = ("I", "I;16", "I;16B", "I;16L", "I;16N")


@dataclass
class PairedSample:
    degraded: torch.Tensor
    clean: torch.Tensor
    identifier: str


@dataclass
class FrequencyGapReport:
    psnr_spatial: float
    psnr_frequency: float
    verdict: str  # "global-dominant" | "local-dominant"


def _load_image(path: Path, identifier: str) -> torch.Tensor:
    try:
        img = Image.open(path)
        img.load()
    except Exception as err:
        raise DataError(f"unreadable image for '{identifier}': {path} ({err})") from err
    if img.mode in SIXTEEN_BIT_MODES or img.mode == "F":
        raise DataError(
            f"'{identifier}' has bit depth above 8 (mode {img.mode}); convert to 8-bit first"
        )
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _stem_index(directory: Path) -> dict[str, Path]:
    files = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in IMAGE_EXTENSIONS:
            files[path.stem] = path
    return files


def load_paired_dataset(root: str | Path) -> list[PairedSample]:
    """All input/GT pairs under root, in deterministic stem order."""
    root = Path(root)
    input_dir = root / "input"
    gt_dir = root / "gt"
    for d in (input_dir, gt_dir):
        if not d.is_dir():
            raise DataError(f"missing dataset subdirectory: {d}")
    inputs = _stem_index(input_dir)
    gts = _stem_index(gt_dir)
    orphans = sorted(set(inputs) ^ set(gts))
    if orphans:
        raise DataError(f"unpaired stems (present on one side only): {', '.join(orphans)}")
    samples = []
    for stem in sorted(inputs):
        degraded = _load_image(inputs[stem], stem)
        clean = _load_image(gts[stem], stem)
        if degraded.shape != clean.shape:
            raise DataError(
                f"'{stem}' dimensions differ: {tuple(degraded.shape)} vs {tuple(clean.shape)}"
            )
        samples.append(PairedSample(degraded=degraded, clean=clean, identifier=stem))
    return samples


def synth_clean(seed: int, height: int = 64, width: int = 64, texture: float = 0.12) -> torch.Tensor:
    """Seeded photo-like test image: smooth blobs plus fine-grained texture."""
    rng = np.random.default_rng(seed)
    img = rng.random((3, height, width))
    img = ndimage.gaussian_filter(img, sigma=(0, 4, 4))
    img -= img.min()
    img /= max(float(img.max()), 1e-9)
    img = 0.2 + 0.6 * img
    img += texture * (rng.random((3, height, width)) - 0.5)
    return torch.from_numpy(np.clip(img, 0.0, 1.0).astype(np.float32))


def _rain_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    angle = rng.uniform(-30.0, 30.0)
    length = int(rng.integers(9, 17))
    density = rng.uniform(0.001, 0.003)
    seeds = (rng.random((h, w)) < density).astype(np.float64)
    if seeds.sum() == 0:
        seeds[rng.integers(0, h), rng.integers(0, w)] = 1.0
    kernel = np.zeros((length, length))
    theta = math.radians(90.0 + angle)
    center = (length - 1) / 2
    for s in np.linspace(-center, center, 4 * length):
        x = int(round(center + s * math.cos(theta)))
        y = int(round(center + s * math.sin(theta)))
        if 0 <= x < length and 0 <= y < length:
            kernel[y, x] = 1.0
    kernel /= kernel.sum()
    streaks = ndimage.convolve(seeds, kernel, mode="constant")
    streaks = np.clip(streaks * rng.uniform(4.0, 8.0), 0.0, 1.0)
    return streaks * rng.uniform(0.4, 0.8)


def synth_degrade(
    clean: torch.Tensor,
    kind: str,
    seed: int,
    t: float | None = None,
    airlight: float | None = None,
    sigma: float | None = None,
    gamma: float | None = None,
    noise_sigma: float | None = None,
) -> torch.Tensor:
    """Seeded synthetic degradation of a (3, H, W) image in [0, 1].

    Sampled parameters can be pinned through the keyword arguments.
    """
    if clean.dim() != 3:
        raise ShapeMismatchError(f"expected (3, H, W), got {tuple(clean.shape)}")
    rng = np.random.default_rng(seed)
    img = clean.detach().cpu().numpy().astype(np.float64)
    _, h, w = img.shape

    if kind == "haze":
        t_val = rng.uniform(0.4, 0.8) if t is None else t
        a_val = rng.uniform(0.7, 1.0) if airlight is None else airlight
        out = img * t_val + a_val * (1.0 - t_val)
    elif kind == "blur":
        sig = rng.uniform(2.0, 4.0) if sigma is None else sigma
        rh = max(1, int(h * rng.uniform(0.3, 0.5)))
        rw = max(1, int(w * rng.uniform(0.3, 0.5)))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        out = img.copy()
        patch = ndimage.gaussian_filter(img, sigma=(0, sig, sig), mode="reflect")
        out[:, y0 : y0 + rh, x0 : x0 + rw] = patch[:, y0 : y0 + rh, x0 : x0 + rw]
    elif kind == "rain":
        mask = _rain_mask(rng, h, w)
        out = np.clip(img + mask[None], 0.0, 1.0)
    elif kind == "lowlight":
        g = rng.uniform(2.0, 4.0) if gamma is None else gamma
        ns = rng.uniform(0.005, 0.02) if noise_sigma is None else noise_sigma
        out = np.clip(np.power(img, g) + rng.normal(0.0, ns, img.shape), 0.0, 1.0)
    else:
        raise DataError(f"unknown degradation kind '{kind}'")
    return torch.from_numpy(out.astype(np.float32))


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _as_batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def ssim_metric(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(ssim_index(_as_batched(a), _as_batched(b)))


def _normalized_log_spectrum(x: torch.Tensor) -> torch.Tensor:
    spec = torch.log1p(torch.fft.fft2(x.double()).abs())
    flat = spec.flatten(-2)
    lo = flat.min(dim=-1).values[..., None, None]
    hi = flat.max(dim=-1).values[..., None, None]
    span = (hi - lo).clamp_min(1e-12)
    return (spec - lo) / span


def frequency_gap(degraded: torch.Tensor, clean: torch.Tensor) -> FrequencyGapReport:
    """Spatial vs normalized-log-spectrum PSNR; ties go to global-dominant."""
    if degraded.shape != clean.shape:
        raise ShapeMismatchError(f"shape mismatch {tuple(degraded.shape)} vs {tuple(clean.shape)}")
    spatial = psnr(degraded, clean)
    da = _normalized_log_spectrum(_as_batched(degraded))
    ca = _normalized_log_spectrum(_as_batched(clean))
    per_channel = []
    for c in range(da.shape[1]):
        per_channel.append(psnr(da[:, c], ca[:, c]))
    frequency = sum(per_channel) / len(per_channel)
    verdict = "global-dominant" if frequency >= spatial else "local-dominant"
    return FrequencyGapReport(psnr_spatial=spatial, psnr_frequency=frequency, verdict=verdict)


def count_params(model: torch.nn.Module) -> dict[str, int]:
    """Exact parameter counts per top-level child plus 'total'.

    Parameters shared across children are attributed to the first child that
    registers them, so the per-module counts sum to the deduplicated total.
    """
    seen: set[int] = set()
    counts: dict[str, int] = {}
    for name, child in model.named_children():
        n = 0
        for p in child.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                n += p.numel()
        counts[name] = n
    direct = 0
    for p in model.parameters(recurse=False):
        if id(p) not in seen:
            seen.add(id(p))
            direct += p.numel()
    if direct:
        counts["(direct)"] = direct
    counts["total"] = sum(counts.values())
    return counts
