# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

from dataclasses import dataclass, field
from typing import Optional


@dataclass
class ProtocolCostEntryJson:
    name: str = field(default="")
    macs: int = field(default=0)
    elementwise: int = field(default=0)


@dataclass
class ProtocolCostReportJson:
    convention: str = field(default="")
    variant: str = field(default="")
    mode: str = field(default="")
    resolution: list[int] = field(default_factory=list)  # [H, W]
    params: Optional[int] = field(default=None)
    gflops: float = field(default=0.0)
    flops_2x: float = field(default=0.0)
    attention_macs: int = field(default=0)
    parts: list[ProtocolCostEntryJson] = field(default_factory=list)


@dataclass
class ProtocolCurvePointJson:
    mode: str = field(default="")
    resolution: int = field(default=0)
    gflops: float = field(default=0.0)
    attention_gflops: float = field(default=0.0)
    wall_ms: Optional[float] = field(default=None)  # None is an OOM row
    peak_bytes: int = field(default=0)
    images_per_s: Optional[float] = field(default=None)


@dataclass
class ProtocolBenchReportJson:
    variant: str = field(default="")
    repeats: int = field(default=0)
    points: list[ProtocolCurvePointJson] = field(default_factory=list)
    slopes: dict[str, float] = field(default_factory=dict)  # "<mode>/<series>" -> log-log slope
