# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

from dataclasses import dataclass, field
from typing import Optional


@dataclass
class ProtocolEpochRecordJson:
    epoch: int = field(default=0)  # 1-based
    lr: float = field(default=0.0)  # learning rate at the end of the epoch
    train_loss: float = field(default=0.0)  # mean over the epoch's batches
    val_top1: Optional[float] = field(default=None)  # None when there is no validation split
