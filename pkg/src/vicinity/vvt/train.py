# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

import json
import logging
import math
import os
from dataclasses import dataclass, asdict, replace, field
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .attention import AttentionMode
from .backbone import VicinityVisionTransformer, variant_spec
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import build_datasets
from .error import DivergenceError
from .protocol.train_log import ProtocolEpochRecordJson
from .util import dataclass_factory_filter_empty, Timing

logger = logging.getLogger(__name__)

LOG_FILE = "log.jsonl"
CHECKPOINT_DIR = "checkpoint"
CONFIG_FILE = "config.json"


@dataclass
class TrainResult:
    log: List[ProtocolEpochRecordJson] = field(default_factory=list)
    checkpoint_dir: Optional[str] = None
    log_path: Optional[str] = None

    @property
    def initial_loss(self) -> float:
        return self.log[0].train_loss

    @property
    def final_loss(self) -> float:
        return self.log[-1].train_loss

    @property
    def final_top1(self) -> Optional[float]:
        return self.log[-1].val_top1


def build_model(config: TrainConfig, class_count: int) -> VicinityVisionTransformer:
    """ The configured variant, with FR-ratio and desk-scale overrides applied, seeded init """
    spec = variant_spec(config.variant, mode=config.mode, fpc_enabled=config.fpc)
    if config.fr_ratio is not None:
        spec = spec.with_fr_ratio(config.fr_ratio)
    if config.channel_divisor != 1 or config.depths is not None:
        spec = spec.scaled(config.channel_divisor, config.depths)
    torch.manual_seed(config.seed)
    return VicinityVisionTransformer(spec, class_count)


def warmup_cosine(warmup_steps: int, total_steps: int) -> Callable[[int], float]:
    """ LR multiplier: linear ramp over warmup_steps, then cosine decay to zero at total_steps """
    def factor(step: int) -> float:
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))
    return factor


def augment(images: torch.Tensor, generator: torch.Generator, crop: bool, flip: bool, padding: int = 4) -> torch.Tensor:
    """ Random crop after zero padding and random horizontal flip, drawn from generator """
    if flip:
        mask = torch.rand(images.shape[0], generator=generator) < 0.5
        images = torch.where(mask.view(-1, 1, 1, 1), images.flip(-1), images)
    if crop:
        side = images.shape[-1]
        padded = F.pad(images, (padding, padding, padding, padding))
        offsets = torch.randint(0, 2 * padding + 1, (images.shape[0], 2), generator=generator)
        images = torch.stack([
            padded[i, :, y:y + side, x:x + side] for i, (y, x) in enumerate(offsets.tolist())
        ])
    return images


def evaluate_top1(model: nn.Module, dataset: Dataset, batch_size: int = 256) -> float:
    """ Fraction of samples whose argmax logit is the label """
    if len(dataset) == 0:
        return 0.0
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for images, labels in DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=0):
            correct += int((model(images).argmax(dim=-1) == labels).sum())
    model.train(was_training)
    return correct / len(dataset)


def write_log(records: Sequence[ProtocolEpochRecordJson], path: str):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(asdict(r)) + "\n")


def read_log(path: str) -> List[ProtocolEpochRecordJson]:
    with open(path, "r", encoding="utf-8") as f:
        return [ProtocolEpochRecordJson(**json.loads(line)) for line in f if line.strip()]


def train(model: VicinityVisionTransformer, train_set: Dataset, config: TrainConfig,
          val_set: Optional[Dataset] = None, out_dir: Optional[str] = None) -> TrainResult:
    """
    AdamW with linear warmup then per-step cosine decay. Batches are drawn in a seeded order on a
    single worker, so a fixed seed gives an identical log.

    :param out_dir: Where log.jsonl, config.json and checkpoint/ are written. Defaults to config.out_dir;
        pass an empty string to write nothing.
    """
    config.validate()
    out_dir = config.out_dir if out_dir is None else out_dir

    torch.manual_seed(config.seed)
    loader_generator = torch.Generator().manual_seed(config.seed)
    augment_generator = torch.Generator().manual_seed(config.seed + 1)
    loader = DataLoader(train_set, batch_size=config.batch_size, shuffle=True, num_workers=0, generator=loader_generator)

    steps_per_epoch = len(loader)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, betas=tuple(config.betas), weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, warmup_cosine(config.warmup_epochs * steps_per_epoch, config.total_epochs * steps_per_epoch))

    result = TrainResult()
    model.train()
    for epoch in range(1, config.total_epochs + 1):
        t = Timing()
        loss_sum = 0.0
        seen = 0
        for step, (images, labels) in enumerate(loader):
            if config.augment_crop or config.augment_flip:
                images = augment(images, augment_generator, config.augment_crop, config.augment_flip)
            loss = F.cross_entropy(model(images), labels)
            if not torch.isfinite(loss):
                raise DivergenceError("Non-finite loss %s at epoch %d step %d (lr=%g)" % (
                    loss.item(), epoch, step, scheduler.get_last_lr()[0]))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            loss_sum += loss.item() * labels.shape[0]
            seen += labels.shape[0]

        record = ProtocolEpochRecordJson(
            epoch=epoch,
            lr=scheduler.get_last_lr()[0],
            train_loss=loss_sum / seen,
            val_top1=evaluate_top1(model, val_set) if val_set is not None and len(val_set) > 0 else None
        )
        result.log.append(record)
        logger.info("epoch %d/%d loss=%.4f val_top1=%s lr=%.3e (%.1fs)", epoch, config.total_epochs,
                    record.train_loss, record.val_top1, record.lr, t.diff_now())

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result.log_path = os.path.join(out_dir, LOG_FILE)
        write_log(result.log, result.log_path)
        with open(os.path.join(out_dir, CONFIG_FILE), "w", encoding="utf-8") as f:
            json.dump(asdict(config, dict_factory=dataclass_factory_filter_empty), f, indent=1)
        result.checkpoint_dir = os.path.join(out_dir, CHECKPOINT_DIR)
        save_checkpoint(model, result.checkpoint_dir)
    return result


@dataclass
class ComparisonRow:
    mode: AttentionMode
    initial_loss: float
    final_loss: float
    val_top1: Optional[float]


def compare_modes(config: TrainConfig, modes: Sequence[AttentionMode], train_set: Dataset,
                  val_set: Optional[Dataset] = None, out_dir: Optional[str] = None) -> List[ComparisonRow]:
    """ Train one model per mode with identical seeds and data order. Logs go to <out_dir>/<mode>/ """
    rows = []
    class_count = train_set.class_count
    for mode in modes:
        mode_config = replace(config, mode=mode)
        model = build_model(mode_config, class_count)
        mode_dir = os.path.join(out_dir, mode.value) if out_dir else ""
        result = train(model, train_set, mode_config, val_set, out_dir=mode_dir)
        rows.append(ComparisonRow(mode, result.initial_loss, result.final_loss, result.final_top1))
    return rows


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    lines = ["%-12s %12s %12s %9s" % ("mode", "first_loss", "final_loss", "val_top1")]
    for r in rows:
        top1 = "-" if r.val_top1 is None else "%.4f" % r.val_top1
        lines.append("%-12s %12.4f %12.4f %9s" % (r.mode.value, r.initial_loss, r.final_loss, top1))
    return "\n".join(lines)


def fit(config: TrainConfig, data_dir: Optional[str] = None) -> Tuple[VicinityVisionTransformer, TrainResult]:
    """ Build datasets and model from the config and train """
    train_set, val_set = build_datasets(config.dataset, seed=config.seed, data_dir=data_dir)
    model = build_model(config, train_set.class_count)
    return model, train(model, train_set, config, val_set)
