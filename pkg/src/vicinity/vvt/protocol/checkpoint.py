# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

from dataclasses import dataclass, field
from typing import Optional


@dataclass
class ProtocolTensorEntryJson:
    name: str = field(default="")
    shape: list[int] = field(default_factory=list)
    dtype: str = field(default="float32")  # always little-endian
    offset: int = field(default=0)  # byte offset into file
    nbytes: int = field(default=0)
    file: str = field(default="params.bin")


@dataclass
class ProtocolCheckpointManifestJson:
    format: str = field(default="vvt-checkpoint")
    version: int = field(default=1)
    variant: Optional[dict] = field(default=None)  # VariantSpec, enums by value
    class_count: int = field(default=0)
    tensors: list[ProtocolTensorEntryJson] = field(default_factory=list)
