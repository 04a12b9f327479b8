"""Optimization loop: cosine-annealed AdamW over random patch crops.

Checkpoints are npz archives of named float32 arrays with a JSON config
header, so a model can be rebuilt from the file alone. The training log is
line-delimited JSON (step, lr, per-term losses, validation PSNR/SSIM).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, _fill_dataclass, model_config_from_dict, to_dict
from .data_metrics import PairedSample, psnr, ssim_metric
from .errors import ConfigurationError, DataError, NumericalStabilityError
from .objectives import LossReport, LossWeights, gt_pyramid, make_extractor, total_loss
from .retinex_core import RetinexRestorer


@dataclass
class TrainConfig:
    lr_init: float = 1e-4
    lr_final: float = 1e-7
    patch: int = 768
    batch: int = 6
    max_steps: int = 300_000
    seed: int = 0
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    val_every: int = 100
    extractor: str = "desk"
    extractor_weights: str | None = None
    use_cb: bool = True
    use_fft: bool = True
    use_ssim: bool = True
    use_perceptual: bool = True
    multilevel: bool = True
    scaling: bool = True

    def validate(self):
        if self.lr_final > self.lr_init:
            raise ConfigurationError(f"lr_final {self.lr_final} exceeds lr_init {self.lr_init}")
        if self.patch % 4 != 0:
            raise ConfigurationError(f"patch size {self.patch} must be divisible by 4")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be positive")
        if self.batch < 1:
            raise ConfigurationError("batch must be positive")


def desk_train_config() -> TrainConfig:
    return TrainConfig(patch=64, batch=2, max_steps=500, val_every=50)


def full_train_config() -> TrainConfig:
    return TrainConfig()


TRAIN_PRESETS = {"desk": desk_train_config, "full": full_train_config}


def train_config_from_dict(data: dict) -> TrainConfig:
    return _fill_dataclass(TrainConfig, data, "train")


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < 0 or step > cfg.max_steps:
        raise ConfigurationError(f"step {step} outside [0, {cfg.max_steps}]")
    span = cfg.lr_init - cfg.lr_final
    return cfg.lr_final + 0.5 * span * (1.0 + math.cos(math.pi * step / cfg.max_steps))


def loss_weights_for(cfg: TrainConfig) -> LossWeights:
    weights = LossWeights(
        use_cb=cfg.use_cb,
        use_fft=cfg.use_fft,
        use_ssim=cfg.use_ssim,
        use_perceptual=cfg.use_perceptual,
    )
    if not cfg.multilevel:
        weights = weights.single_level()
    elif not cfg.scaling:
        weights = weights.unscaled()
    return weights


def train_step(
    batch: tuple[torch.Tensor, torch.Tensor],
    model: RetinexRestorer,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    step: int,
    weights: LossWeights | None = None,
    extractor: torch.nn.Module | None = None,
) -> LossReport:
    """One optimization step on a (degraded, clean) batch; returns the report."""
    degraded, clean = batch
    if weights is None:
        weights = loss_weights_for(cfg)
    if extractor is None and weights.use_perceptual:
        extractor = make_extractor(cfg.extractor, cfg.extractor_weights)
    model.train()
    lr = lr_at(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    out = model(degraded)
    report = total_loss(out.raw_pyramid, gt_pyramid(clean), weights, extractor)
    if not torch.isfinite(report.total):
        raise NumericalStabilityError(
            f"non-finite loss at step {step}: terms {report.term_values}"
        )
    optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return report


def save_checkpoint(path: str | Path, model: RetinexRestorer, extra: dict | None = None):
    """npz archive: float32 parameter arrays plus a JSON config header."""
    path = Path(path)
    arrays = {
        f"param/{name}": tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    header = json.dumps({"model": to_dict(model.cfg), "extra": extra or {}}, sort_keys=True)
    payload = np.frombuffer(header.encode("utf-8"), dtype=np.uint8)
    np.savez(path, __config__=payload, **arrays)


def load_checkpoint(path: str | Path) -> tuple[RetinexRestorer, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    data = np.load(path)
    if "__config__" not in data.files:
        raise DataError(f"{path} is not a model checkpoint (missing config header)")
    header = json.loads(bytes(data["__config__"]).decode("utf-8"))
    model = RetinexRestorer(model_config_from_dict(header["model"]))
    state = {
        name[len("param/") :]: torch.from_numpy(data[name])
        for name in data.files
        if name.startswith("param/")
    }
    model.load_state_dict(state)
    return model, header


@dataclass
class FitResult:
    best_path: Path
    last_path: Path
    log_path: Path
    best_psnr: float
    best_ssim: float
    steps: int
    history: list[dict] = field(default_factory=list)


def _sample_batch(
    dataset: list[PairedSample], cfg: TrainConfig, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    degraded, clean = [], []
    for _ in range(cfg.batch):
        sample = dataset[int(rng.integers(0, len(dataset)))]
        _, h, w = sample.degraded.shape
        side = min(cfg.patch, h, w)
        side -= side % 4
        y0 = int(rng.integers(0, h - side + 1))
        x0 = int(rng.integers(0, w - side + 1))
        d = sample.degraded[:, y0 : y0 + side, x0 : x0 + side]
        c = sample.clean[:, y0 : y0 + side, x0 : x0 + side]
        if rng.random() < 0.5:
            d = torch.flip(d, dims=(-1,))
            c = torch.flip(c, dims=(-1,))
        degraded.append(d)
        clean.append(c)
    return torch.stack(degraded), torch.stack(clean)


def evaluate_model(model: RetinexRestorer, dataset: list[PairedSample]) -> tuple[float, float]:
    """Mean PSNR/SSIM of restored outputs over the dataset (eval mode)."""
    model.eval()
    psnrs, ssims = [], []
    with torch.no_grad():
        for sample in dataset:
            out = model(sample.degraded.unsqueeze(0))
            restored = out.final_image.squeeze(0)
            psnrs.append(psnr(restored, sample.clean))
            ssims.append(ssim_metric(restored, sample.clean))
    return sum(psnrs) / len(psnrs), sum(ssims) / len(ssims)


def fit(
    dataset: list[PairedSample],
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    out_dir: str | Path,
) -> FitResult:
    """Train from scratch on the dataset; writes best/last checkpoints and a log."""
    if not dataset:
        raise DataError("fit needs a nonempty dataset")
    train_cfg.validate()
    model_cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model = RetinexRestorer(model_cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=train_cfg.lr_init,
        betas=train_cfg.betas,
        weight_decay=train_cfg.weight_decay,
    )
    weights = loss_weights_for(train_cfg)
    extractor = (
        make_extractor(train_cfg.extractor, train_cfg.extractor_weights)
        if weights.use_perceptual
        else None
    )

    best_path = out_dir / "best.npz"
    last_path = out_dir / "last.npz"
    log_path = out_dir / "train_log.jsonl"
    best_psnr = -math.inf
    best_ssim = 0.0
    history: list[dict] = []

    with open(log_path, "w") as log:
        for step in range(train_cfg.max_steps):
            batch = _sample_batch(dataset, train_cfg, rng)
            report = train_step(batch, model, optimizer, train_cfg, step, weights, extractor)
            record = {
                "step": step,
                "lr": lr_at(step, train_cfg),
                "total": float(report.total.detach()),
                "terms": report.term_values,
            }
            last = step == train_cfg.max_steps - 1
            if (step + 1) % train_cfg.val_every == 0 or last:
                val_psnr, val_ssim = evaluate_model(model, dataset)
                record["val_psnr"] = val_psnr
                record["val_ssim"] = val_ssim
                if val_psnr > best_psnr:
                    best_psnr = val_psnr
                    best_ssim = val_ssim
                    save_checkpoint(best_path, model, {"step": step, "val_psnr": val_psnr})
                model.train()
            log.write(json.dumps(record) + "\n")
            history.append(record)

    save_checkpoint(last_path, model, {"step": train_cfg.max_steps - 1})
    if not best_path.exists():
        save_checkpoint(best_path, model, {"step": train_cfg.max_steps - 1})
    return FitResult(
        best_path=best_path,
        last_path=last_path,
        log_path=log_path,
        best_psnr=best_psnr,
        best_ssim=best_ssim,
        steps=train_cfg.max_steps,
        history=history,
    )
