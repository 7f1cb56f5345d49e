"""Location adaptation: fine-tune only the geo-temporal pathway encoders.

Every other weight is frozen and the network runs in eval mode (batch-norm
statistics and dropout untouched), so an adapted checkpoint differs from its
source in exactly the pathway-encoder parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data.format import SpeedDataset
from .data.sampling import sample_training_example
from .train import (
    TrainConfig,
    TrainingError,
    batch_losses,
    collate,
    epoch_seed,
    load_checkpoint,
    save_checkpoint,
)
from .losses import total_loss


@dataclass
class AdaptConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 2
    seed: int = 0
    device: str = "cpu"
    half_width: float = 2.0


def adapt_location(
    checkpoint_path: str | Path,
    dataset: SpeedDataset,
    config: AdaptConfig,
    out_path: str | Path,
) -> Path:
    """Fine-tune the context pathways of a trained checkpoint on a new city."""
    model, payload = load_checkpoint(checkpoint_path, config.device)
    if not model.cfg.context_enabled:
        raise TrainingError(
            "checkpoint was trained without context pathways; nothing to adapt"
        )
    if dataset.manifest.tile_size != model.cfg.encoder.image_size:
        raise TrainingError(
            f"dataset tiles are {dataset.manifest.tile_size}px but the checkpoint "
            f"expects {model.cfg.encoder.image_size}px"
        )
    train_ids = sorted(dataset.tile_ids("train"))
    if not train_ids:
        raise TrainingError("adaptation dataset has no training tiles")

    model.eval()  # freeze BN statistics and disable dropout
    for _, p in model.non_gtpe_named_parameters():
        p.requires_grad_(False)
    trainable = list(model.gtpe_parameters())
    optimizer = torch.optim.Adam(trainable, lr=config.lr)

    bundles = {tid: dataset.load_tile(tid) for tid in train_ids}
    region = dataset.region_bounds
    for epoch in range(config.epochs):
        es = epoch_seed(config.seed, epoch)
        rng = np.random.default_rng(es)
        torch.manual_seed(es)
        order = [train_ids[k] for k in rng.permutation(len(train_ids))]
        for b0 in range(0, len(order), config.batch_size):
            chunk = order[b0 : b0 + config.batch_size]
            examples = [
                ex
                for tid in chunk
                if (ex := sample_training_example(bundles[tid], region, rng,
                                                  config.half_width,
                                                  model.cfg.orientation_bins))
                is not None
            ]
            if not examples:
                continue
            losses = batch_losses(model, collate(examples, config.device))
            try:
                loss = total_loss(losses["speed"], losses["road"], losses["orientation"])
            except ValueError:
                continue
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite adaptation loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    base_train_config = payload.get("train_config")
    train_config = (
        TrainConfig(**base_train_config) if base_train_config else TrainConfig()
    )
    save_checkpoint(out_path, model, optimizer, train_config, config.epochs - 1, None)
    return out_path


def trainable_adaptation_parameters(model) -> int:
    """Number of parameters the adaptation loop is allowed to update."""
    return sum(p.numel() for p in model.gtpe_parameters())
