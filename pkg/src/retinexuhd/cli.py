"""Batch command surface: train, restore, evaluate, analyze-frequency, count-params, ablate.

Commands print line-delimited JSON records so output can be piped into jq or
collected into tables. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import torch
import yaml
from PIL import Image

from .config import (
    ModelConfig,
    apply_override,
    model_config_for_preset,
    model_config_from_dict,
)
from .data_metrics import (
    IMAGE_EXTENSIONS,
    _load_image,
    count_params,
    frequency_gap,
    load_paired_dataset,
    psnr,
    ssim_metric,
)
from .errors import (
    ConfigurationError,
    DataError,
    NonFiniteInputError,
    NumericalStabilityError,
    ShapeMismatchError,
)
from .retinex_core import RetinexRestorer
from .training_harness import (
    TRAIN_PRESETS,
    TrainConfig,
    fit,
    load_checkpoint,
    loss_weights_for,
    train_config_from_dict,
)

TILE_OVERLAP = 32

# --ablate keys: architecture switches flip an AblationConfig flag on, loss
# switches flip a TrainConfig term toggle off.
_ABLATIONS = {
    "samba": ("model", "no_samba"),
    "fia": ("model", "no_fia"),
    "gssb": ("model", "no_gssb"),
    "multiscale": ("model", "no_multiscale"),
    "fourier": ("model", "no_fourier"),
    "loss.cb": ("train", "use_cb"),
    "loss.fft": ("train", "use_fft"),
    "loss.ssim": ("train", "use_ssim"),
    "loss.perceptual": ("train", "use_perceptual"),
    "loss.multilevel": ("train", "multilevel"),
    "loss.scaling": ("train", "scaling"),
}

_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record) + "\n")


def _load_config_file(path: str) -> tuple[ModelConfig, TrainConfig]:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping at top level")
    unknown = set(data) - {"model", "train"}
    if unknown:
        raise ConfigurationError(
            f"{path}: unknown sections {sorted(unknown)} (expected 'model' and/or 'train')"
        )
    model_cfg = model_config_from_dict(data.get("model") or {})
    train_cfg = train_config_from_dict(data.get("train") or {})
    return model_cfg, train_cfg


def _apply_ablation(spec: str, model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    key, sep, raw = spec.partition("=")
    value = raw.strip().lower() if sep else "off"
    if value not in ("on", "off"):
        raise ConfigurationError(f"--ablate value must be 'on' or 'off', got '{spec}'")
    if key not in _ABLATIONS:
        raise ConfigurationError(
            f"unknown ablation '{key}' (expected one of {sorted(_ABLATIONS)})"
        )
    target, field_name = _ABLATIONS[key]
    off = value == "off"
    if target == "model":
        setattr(model_cfg.ablation, field_name, off)
    else:
        setattr(train_cfg, field_name, not off)


def _configs_from_args(args: argparse.Namespace) -> tuple[ModelConfig, TrainConfig]:
    """Preset or config file, then --set overrides, then --ablate switches."""
    if getattr(args, "config", None):
        model_cfg, train_cfg = _load_config_file(args.config)
    else:
        model_cfg = model_config_for_preset(args.preset)
        train_cfg = TRAIN_PRESETS[args.preset]()
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects key=value, got '{item}'")
        root = key.split(".")[0]
        if root in _TRAIN_FIELDS:
            apply_override(train_cfg, key, raw)
        elif root in _MODEL_FIELDS:
            apply_override(model_cfg, key, raw)
        else:
            raise ConfigurationError(f"unknown config key '{key}'")
    for item in args.ablate:
        _apply_ablation(item, model_cfg, train_cfg)
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg


def _model_from_args(args: argparse.Namespace) -> RetinexRestorer:
    checkpoint = getattr(args, "checkpoint", None)
    if checkpoint:
        model, _ = load_checkpoint(checkpoint)
        return model
    model_cfg, _ = _configs_from_args(args)
    return RetinexRestorer(model_cfg)


# ---------------------------------------------------------------------------
# tiled inference


def _tile_positions(dim: int, tile: int, stride: int) -> list[int]:
    if dim <= tile:
        return [0]
    positions = list(range(0, dim - tile, stride))
    positions.append(dim - tile)
    return positions


def _feather_mask(th: int, tw: int, overlap: int) -> torch.Tensor:
    """Separable ramp, 1 in the interior, decaying toward tile edges.

    Strictly positive everywhere so the per-pixel weight sum never vanishes,
    including at image borders where only one tile contributes.
    """

    def ramp(n: int) -> torch.Tensor:
        idx = torch.arange(n, dtype=torch.float32)
        rise = (idx + 1).clamp(max=overlap + 1)
        fall = (n - idx).clamp(max=overlap + 1)
        return torch.minimum(rise, fall) / (overlap + 1)

    return ramp(th)[:, None] * ramp(tw)[None, :]


def tiled_restore(
    model: RetinexRestorer, image: torch.Tensor, tile: int, overlap: int = TILE_OVERLAP
) -> torch.Tensor:
    """Restore a (3, H, W) image, stitching overlapping tiles when it exceeds the tile size."""
    model.eval()
    _, h, w = image.shape
    if h <= tile and w <= tile:
        with torch.no_grad():
            return model(image.unsqueeze(0)).final_image.squeeze(0)
    if tile < 2 * overlap:
        raise ConfigurationError(f"tile size {tile} must be at least twice the {overlap}px overlap")
    stride = tile - overlap
    th, tw = min(tile, h), min(tile, w)
    accum = torch.zeros(3, h, w)
    weight = torch.zeros(1, h, w)
    mask = _feather_mask(th, tw, overlap).unsqueeze(0)
    with torch.no_grad():
        for y0 in _tile_positions(h, th, stride):
            for x0 in _tile_positions(w, tw, stride):
                patch = image[:, y0 : y0 + th, x0 : x0 + tw]
                out = model(patch.unsqueeze(0)).final_image.squeeze(0)
                accum[:, y0 : y0 + th, x0 : x0 + tw] += out * mask
                weight[:, y0 : y0 + th, x0 : x0 + tw] += mask
    return (accum / weight).clamp(0.0, 1.0)


def _save_png(path: Path, image: torch.Tensor) -> None:
    arr = (image.clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).cpu().numpy()).save(path)


def _input_images(data: str) -> list[Path]:
    root = Path(data)
    if root.is_file():
        return [root]
    if not root.is_dir():
        raise DataError(f"input path not found: {root}")
    files = [p for p in sorted(root.iterdir()) if p.suffix.lower() in IMAGE_EXTENSIONS]
    if not files:
        raise DataError(f"no images under {root}")
    return files


# ---------------------------------------------------------------------------
# commands


def cmd_train(args: argparse.Namespace) -> int:
    model_cfg, train_cfg = _configs_from_args(args)
    if args.seed is not None:
        train_cfg.seed = args.seed
    dataset = load_paired_dataset(args.data)
    if not dataset:
        raise DataError(f"no paired images under {args.data}")
    result = fit(dataset, train_cfg, model_cfg, args.out)
    _emit(
        {
            "command": "train",
            "steps": result.steps,
            "best_psnr": result.best_psnr,
            "best_ssim": result.best_ssim,
            "best": str(result.best_path),
            "last": str(result.last_path),
            "log": str(result.log_path),
        }
    )
    return 0


def cmd_restore(args: argparse.Namespace) -> int:
    model = _model_from_args(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in _input_images(args.data):
        image = _load_image(path, path.stem)
        restored = tiled_restore(model, image, args.tile)
        target = out_dir / f"{path.stem}_restored.png"
        _save_png(target, restored)
        _emit(
            {
                "input": str(path),
                "output": str(target),
                "height": image.shape[-2],
                "width": image.shape[-1],
            }
        )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    model = _model_from_args(args)
    dataset = load_paired_dataset(args.data)
    if not dataset:
        raise DataError(f"no paired images under {args.data}")
    psnrs, ssims = [], []
    for sample in dataset:
        restored = tiled_restore(model, sample.degraded, args.tile)
        p = psnr(restored, sample.clean)
        s = ssim_metric(restored, sample.clean)
        psnrs.append(p)
        ssims.append(s)
        _emit({"id": sample.identifier, "psnr": p, "ssim": s})
    _emit(
        {
            "count": len(dataset),
            "mean_psnr": sum(psnrs) / len(psnrs),
            "mean_ssim": sum(ssims) / len(ssims),
        }
    )
    return 0


def cmd_analyze_frequency(args: argparse.Namespace) -> int:
    dataset = load_paired_dataset(args.data)
    if not dataset:
        raise DataError(f"no paired images under {args.data}")
    histogram = {"global-dominant": 0, "local-dominant": 0}
    for sample in dataset:
        report = frequency_gap(sample.degraded, sample.clean)
        histogram[report.verdict] += 1
        _emit(
            {
                "id": sample.identifier,
                "psnr_spatial": report.psnr_spatial,
                "psnr_frequency": report.psnr_frequency,
                "verdict": report.verdict,
            }
        )
    _emit({"count": len(dataset), **histogram})
    return 0


def cmd_count_params(args: argparse.Namespace) -> int:
    model_cfg, _ = _configs_from_args(args)
    counts = count_params(RetinexRestorer(model_cfg))
    for name, value in counts.items():
        _emit({"module": name, "params": value})
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    """Parameter and loss-term accounting for every ablation switch."""
    model_cfg, train_cfg = _configs_from_args(args)
    baseline = count_params(RetinexRestorer(model_cfg))["total"]
    _emit({"ablation": "none", "params": baseline, "delta": 0})
    for key, (target, field_name) in _ABLATIONS.items():
        if target == "model":
            variant = replace(
                model_cfg, ablation=replace(model_cfg.ablation, **{field_name: True})
            )
            params = count_params(RetinexRestorer(variant))["total"]
            _emit({"ablation": key, "params": params, "delta": params - baseline})
        else:
            variant_cfg = replace(train_cfg, **{field_name: False})
            weights = loss_weights_for(variant_cfg)
            _emit(
                {
                    "ablation": key,
                    "active_terms": sorted(weights.active_terms()),
                    "level_weights": list(weights.level_weights),
                }
            )
    return 0


_COMMANDS = {
    "train": cmd_train,
    "restore": cmd_restore,
    "evaluate": cmd_evaluate,
    "analyze-frequency": cmd_analyze_frequency,
    "count-params": cmd_count_params,
    "ablate": cmd_ablate,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=sorted(TRAIN_PRESETS), default="desk")
    parser.add_argument("--config", help="YAML file with optional 'model' and 'train' sections")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. samba.num_gssb=2 or lr_init=2e-4 (repeatable)",
    )
    parser.add_argument(
        "--ablate",
        action="append",
        default=[],
        metavar="KEY=off",
        help=f"toggle one of {sorted(_ABLATIONS)} (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retinexuhd",
        description="Dual-branch Retinex restoration: training, inference, and analysis jobs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model on a paired dataset")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset root with input/ and gt/ subdirectories")
    p.add_argument("--out", required=True, help="directory for checkpoints and the training log")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("restore", help="restore images with a trained checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="npz checkpoint; omitted means a fresh identity model")
    p.add_argument("--data", required=True, help="an image file or a directory of images")
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int, default=256, help="max single-pass side; larger images tile")

    p = sub.add_parser("evaluate", help="PSNR/SSIM of restored outputs against ground truth")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--tile", type=int, default=256)

    p = sub.add_parser("analyze-frequency", help="spatial vs frequency gap verdict per pair")
    p.add_argument("--data", required=True)

    p = sub.add_parser("count-params", help="parameter counts per top-level module")
    _add_config_flags(p)

    p = sub.add_parser("ablate", help="parameter/term accounting for each ablation switch")
    _add_config_flags(p)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (DataError, ShapeMismatchError, NonFiniteInputError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except NumericalStabilityError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
