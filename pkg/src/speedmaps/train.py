"""Training loop: Adam on the summed multi-task objective with gradient
accumulation, per-epoch reseeding, validation-RMSE model selection, and
atomic checkpointing.

All per-epoch stochasticity (tile order, time sampling, dropout) derives from
(seed, epoch), so resuming from a checkpoint replays the exact remaining
epochs of an uninterrupted run.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data.format import SpeedDataset
from .data.sampling import TrainingExample, sample_training_example
from .evaluate import evaluate_micro
from .losses import orientation_loss, road_loss, speed_loss, total_loss
from .model import ModelConfig, TrafficSpeedNet
from .model.config import EncoderConfig


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 2
    accum_steps: int = 8
    seed: int = 0
    device: str = "cpu"
    half_width: float = 2.0
    samples_per_tile: int = 1  # time draws per tile per epoch
    val_every: int = 1
    select_best: bool = True
    # model plan (flat so it maps 1:1 onto the config file)
    context: tuple[str, ...] = ("loc", "time", "loctime")
    tasks: tuple[str, ...] = ("speed", "road", "orientation")
    use_image: bool = True
    channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    stem_channels: tuple[int, int] = (48, 64)
    mbconv_depths: tuple[int, int] = (2, 3)
    mhsa_depths: tuple[int, int] = (5, 2)
    heads: int = 8
    expansion: int = 4
    se_ratio: float = 0.25
    mlp_ratio: int = 4
    decoder_dim: int = 512
    dropout: float = 0.1
    orientation_bins: int = 16
    gtpe_stride: int = 1

    def validate(self) -> None:
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.accum_steps < 1:
            raise ValueError("hyperparameters must be positive")
        if not self.tasks:
            raise ValueError("at least one task must be enabled")

    def build_model_config(self, image_size: int) -> ModelConfig:
        cfg = ModelConfig(
            encoder=EncoderConfig(
                channels=tuple(self.channels),
                stem_channels=tuple(self.stem_channels),
                mbconv_depths=tuple(self.mbconv_depths),
                mhsa_depths=tuple(self.mhsa_depths),
                heads=self.heads,
                expansion=self.expansion,
                se_ratio=self.se_ratio,
                mlp_ratio=self.mlp_ratio,
                image_size=image_size,
            ),
            decoder_dim=self.decoder_dim,
            dropout=self.dropout,
            orientation_bins=self.orientation_bins,
            context=tuple(self.context),
            tasks=tuple(self.tasks),
            use_image=self.use_image,
            gtpe_stride=self.gtpe_stride,
        )
        cfg.validate()
        return cfg


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_val_rmse: float | None
    log_rows: list[dict] = field(default_factory=list)


def epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch * 7919 + 17) % (2**32)


def collate(examples: list[TrainingExample], device: str) -> dict:
    image = torch.from_numpy(np.stack([e.image for e in examples])).to(device)
    loc = torch.from_numpy(np.stack([e.location_map for e in examples])).to(device)
    day = torch.tensor([e.day for e in examples], device=device)
    hour = torch.tensor([e.hour for e in examples], device=device)
    rasters = [
        torch.from_numpy(e.segment_raster.astype(np.int64)).to(device) for e in examples
    ]
    road = torch.from_numpy(np.stack([e.road_mask for e in examples])).to(device)
    bins = torch.from_numpy(np.stack([e.orientation_bins for e in examples])).to(device)
    return {
        "image": image,
        "location_map": loc,
        "day": day,
        "hour": hour,
        "segment_rasters": rasters,
        "road_mask": road,
        "orientation_bins": bins,
        "observations": [e.observations for e in examples],
    }


def batch_losses(model: TrafficSpeedNet, batch: dict) -> dict[str, torch.Tensor | None]:
    out = model(batch["image"], batch["location_map"], batch["day"], batch["hour"])
    tasks = model.cfg.tasks
    n = batch["image"].shape[0]
    speed_terms = []
    road_terms = []
    orient_terms = []
    for i in range(n):
        if "speed" in tasks:
            sl = speed_loss(
                out.speed_mu[i],
                out.speed_sigma[i],
                batch["segment_rasters"][i],
                batch["observations"][i],
            )
            if sl is not None:
                speed_terms.append(sl)
        if "road" in tasks:
            road_terms.append(road_loss(out.road_logits[i], batch["road_mask"][i]))
        if "orientation" in tasks:
            ol = orientation_loss(out.orientation_logits[i], batch["orientation_bins"][i])
            if ol is not None:
                orient_terms.append(ol)
    mean = lambda terms: torch.stack(terms).mean() if terms else None
    return {
        "speed": mean(speed_terms),
        "road": mean(road_terms),
        "orientation": mean(orient_terms),
    }


def save_checkpoint(path: Path, model: TrafficSpeedNet, optimizer, train_config: TrainConfig,
                    epoch: int, best_val_rmse: float | None) -> None:
    payload = {
        "model": model.state_dict(),
        "model_config": model.cfg.to_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "train_config": asdict(train_config),
        "epoch": epoch,
        "best_val_rmse": best_val_rmse,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, device: str = "cpu") -> tuple[TrafficSpeedNet, dict]:
    payload = torch.load(Path(path), map_location=device, weights_only=False)
    cfg = ModelConfig.from_dict(payload["model_config"])
    model = TrafficSpeedNet(cfg).to(device)
    model.load_state_dict(payload["model"])
    return model, payload


def train(
    config: TrainConfig,
    dataset: SpeedDataset,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ids = sorted(dataset.tile_ids("train"))
    val_ids = sorted(dataset.tile_ids("val"))
    if not train_ids:
        raise TrainingError("dataset has no training tiles")
    if config.select_best and not val_ids:
        raise TrainingError("dataset has no validation tiles (required for model selection)")

    mc = config.build_model_config(dataset.manifest.tile_size)
    device = config.device
    start_epoch = 0
    best_val = None
    if resume_from is not None:
        model, payload = load_checkpoint(resume_from, device)
        if payload["model_config"] != mc.to_dict():
            raise TrainingError("resume checkpoint was trained with a different model config")
        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
        if payload.get("optimizer"):
            optimizer.load_state_dict(payload["optimizer"])
        start_epoch = payload["epoch"] + 1
        best_val = payload.get("best_val_rmse")
    else:
        torch.manual_seed(epoch_seed(config.seed, -1) if config.epochs else config.seed)
        model = TrafficSpeedNet(mc).to(device)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    bundles = {tid: dataset.load_tile(tid) for tid in train_ids}
    region = dataset.region_bounds
    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"
    log_path = out_dir / "log.csv"
    log_rows: list[dict] = []
    fieldnames = [
        "epoch", "train_loss", "speed_loss", "road_loss", "orientation_loss",
        "val_rmse", "val_mae", "val_r2",
    ]
    write_header = start_epoch == 0 or not log_path.exists()
    log_file = open(log_path, "a", newline="")
    writer = csv.DictWriter(log_file, fieldnames=fieldnames)
    if write_header:
        writer.writeheader()

    try:
        if config.epochs == 0 and resume_from is None:
            save_checkpoint(last_path, model, optimizer, config, -1, best_val)
            save_checkpoint(best_path, model, optimizer, config, -1, best_val)
        for epoch in range(start_epoch, config.epochs):
            es = epoch_seed(config.seed, epoch)
            rng = np.random.default_rng(es)
            torch.manual_seed(es)
            model.train()
            pool = train_ids * max(1, config.samples_per_tile)
            order = [pool[k] for k in rng.permutation(len(pool))]
            sums = {"total": 0.0, "speed": 0.0, "road": 0.0, "orientation": 0.0}
            counts = {"total": 0, "speed": 0, "road": 0, "orientation": 0}
            optimizer.zero_grad()
            pending = 0
            for b0 in range(0, len(order), config.batch_size):
                chunk = order[b0 : b0 + config.batch_size]
                examples = []
                for tid in chunk:
                    ex = sample_training_example(
                        bundles[tid], region, rng, config.half_width, config.orientation_bins
                    )
                    if ex is not None:
                        examples.append(ex)
                if not examples:
                    continue
                losses = batch_losses(model, collate(examples, device))
                try:
                    loss = total_loss(losses["speed"], losses["road"], losses["orientation"])
                except ValueError:
                    continue  # no supervision landed in this batch
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} (tiles {chunk}): "
                        f"{ {k: (float(v) if v is not None else None) for k, v in losses.items()} }"
                    )
                (loss / config.accum_steps).backward()
                pending += 1
                if pending == config.accum_steps:
                    optimizer.step()
                    optimizer.zero_grad()
                    pending = 0
                sums["total"] += float(loss.detach())
                counts["total"] += 1
                for key in ("speed", "road", "orientation"):
                    if losses[key] is not None:
                        sums[key] += float(losses[key].detach())
                        counts[key] += 1
            if pending:
                optimizer.step()
                optimizer.zero_grad()

            row: dict = {"epoch": epoch}
            row["train_loss"] = sums["total"] / counts["total"] if counts["total"] else math.nan
            for key in ("speed", "road", "orientation"):
                row[f"{key}_loss"] = sums[key] / counts[key] if counts[key] else ""
            row["val_rmse"] = row["val_mae"] = row["val_r2"] = ""
            run_val = (
                config.select_best
                and val_ids
                and (epoch % config.val_every == 0 or epoch == config.epochs - 1)
            )
            if run_val:
                report = evaluate_micro(
                    model, dataset, "val", seed=config.seed, device=device,
                    half_width=config.half_width,
                )
                row["val_rmse"] = report.rmse
                row["val_mae"] = report.mae
                row["val_r2"] = "" if report.r2 is None else report.r2
                if best_val is None or report.rmse < best_val:
                    best_val = report.rmse
                    save_checkpoint(best_path, model, optimizer, config, epoch, best_val)
            save_checkpoint(last_path, model, optimizer, config, epoch, best_val)
            writer.writerow(row)
            log_file.flush()
            log_rows.append(row)
    finally:
        log_file.close()
    if not config.select_best or not best_path.exists():
        save_checkpoint(best_path, model, optimizer, config, config.epochs - 1, best_val)
    return TrainResult(
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        log_path=log_path,
        best_val_rmse=best_val,
        log_rows=log_rows,
    )
