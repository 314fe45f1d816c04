# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

import csv
import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Dict, TextIO, Tuple

import numpy as np
import torch

from .attention import AttentionMode
from .backbone import VicinityVisionTransformer
from .config import VariantSpec
from .error import ConfigError, CapacityError
from .flops import flop_model, estimate_peak_bytes
from .protocol.report import ProtocolBenchReportJson, ProtocolCurvePointJson
from .util import Timing

logger = logging.getLogger(__name__)

CSV_HEADER = ("mode", "resolution", "gflops", "wall_ms", "peak_bytes")
OOM = "NA"


@dataclass
class CurvePoint:
    mode: AttentionMode
    resolution: int
    gflops: float
    attention_gflops: float
    peak_bytes: int
    wall_ms: Optional[float] = None  # None marks an OOM row
    images_per_s: Optional[float] = None

    @property
    def is_oom(self) -> bool:
        return self.wall_ms is None

    @property
    def tokens(self) -> int:
        # stage-1 token count; every stage scales with it
        return (self.resolution // 4) ** 2


def _check_sweep_args(resolutions: Sequence[int], repeats: int):
    if not resolutions:
        raise ConfigError("sweep: at least one resolution is required")
    for res in resolutions:
        if res < 32 or res % 32 != 0:
            raise ConfigError("sweep: resolution %d is not a positive multiple of 32" % res)
    if repeats < 3:
        raise ConfigError("sweep: repeats must be >= 3")


def time_forward(model: torch.nn.Module, images: torch.Tensor, repeats: int) -> float:
    """ Median wall time in milliseconds over `repeats` forward passes, after one discarded warmup pass """
    times = []
    with torch.no_grad():
        model(images)
        for _ in range(repeats):
            t = Timing()
            model(images)
            times.append(t.diff_now() * 1000.0)
    return float(np.median(times))


def is_out_of_memory(ex: BaseException) -> bool:
    """ Failed allocations in Python or torch, and the explicit-matrix cap """
    if isinstance(ex, (MemoryError, CapacityError, torch.cuda.OutOfMemoryError)):
        return True
    return isinstance(ex, RuntimeError) and "can't allocate memory" in str(ex)


def sweep(spec: VariantSpec, modes: Sequence[AttentionMode], resolutions: Sequence[int], repeats: int = 3,
          seed: int = 0, batch: int = 1, class_count: int = 1000, max_bytes: Optional[int] = None,
          timed: bool = True) -> List[CurvePoint]:
    """
    Analytic cost and measured forward time of spec for every (mode, resolution), resolutions ascending.
    Timed sections run one at a time.

    :param max_bytes: Points whose estimated activation peak exceeds this are recorded as OOM without running
    :param timed: False skips the forward passes and leaves wall_ms unset on every point
    """
    _check_sweep_args(resolutions, repeats)
    points = []
    for mode in modes:
        mode_spec = replace(spec, mode=mode)
        model = None
        if timed:
            torch.manual_seed(seed)
            model = VicinityVisionTransformer(mode_spec, class_count).eval()
        for res in sorted(resolutions):
            report = flop_model(mode_spec, mode, res, class_count=class_count)
            point = CurvePoint(
                mode=mode, resolution=res, gflops=report.gflops, attention_gflops=report.attention_gflops,
                peak_bytes=estimate_peak_bytes(mode_spec, mode, res, batch=batch)
            )
            points.append(point)
            if not timed:
                continue
            if max_bytes is not None and point.peak_bytes > max_bytes:
                logger.info("%s @ %d: estimated %d bytes over budget, recorded as OOM", mode.value, res, point.peak_bytes)
                continue
            generator = torch.Generator().manual_seed(seed)
            images = torch.randn((batch, mode_spec.in_channels, res, res), generator=generator)
            try:
                point.wall_ms = time_forward(model, images, repeats)
            except (MemoryError, CapacityError, RuntimeError) as ex:
                if not is_out_of_memory(ex):
                    raise
                logger.info("%s @ %d: %s, recorded as OOM", mode.value, res, ex)
                continue
            point.images_per_s = 1000.0 * batch / point.wall_ms if point.wall_ms > 0 else None
            logger.info("%s @ %d: %.3f GFLOPs, %.2f ms", mode.value, res, point.gflops, point.wall_ms)
    return points


def write_csv(points: Sequence[CurvePoint], f: TextIO):
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for p in points:
        writer.writerow((
            p.mode.value,
            p.resolution,
            "%.6f" % p.gflops,
            OOM if p.is_oom else "%.3f" % p.wall_ms,
            p.peak_bytes
        ))


def log_log_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """ Least-squares slope of log(y) against log(x) """
    if len(xs) < 2:
        raise ValueError("log_log_slope needs at least two points")
    slope, _ = np.polyfit(np.log(np.asarray(xs, dtype=np.float64)), np.log(np.asarray(ys, dtype=np.float64)), 1)
    return float(slope)


def fit_slopes(points: Sequence[CurvePoint], wall_points: int = 3) -> Dict[str, float]:
    """
    Per mode: log-log slopes against the token count of the attention-only cost ("<mode>/attention"),
    of the whole-model cost ("<mode>/model") and of the measured wall time over the
    largest `wall_points` timed resolutions ("<mode>/wall").
    """
    slopes = {}
    by_mode: Dict[AttentionMode, List[CurvePoint]] = {}
    for p in points:
        by_mode.setdefault(p.mode, []).append(p)
    for mode, series in by_mode.items():
        series = sorted(series, key=lambda p: p.resolution)
        if len(series) >= 2:
            slopes["%s/attention" % mode.value] = log_log_slope([p.tokens for p in series], [p.attention_gflops for p in series])
            slopes["%s/model" % mode.value] = log_log_slope([p.tokens for p in series], [p.gflops for p in series])
        timed = [p for p in series if not p.is_oom][-wall_points:]
        if len(timed) >= 2:
            slopes["%s/wall" % mode.value] = log_log_slope([p.tokens for p in timed], [p.wall_ms for p in timed])
    return slopes


def to_json(spec: VariantSpec, points: Sequence[CurvePoint], repeats: int) -> ProtocolBenchReportJson:
    return ProtocolBenchReportJson(
        variant=spec.name,
        repeats=repeats,
        points=[ProtocolCurvePointJson(
            mode=p.mode.value, resolution=p.resolution, gflops=p.gflops, attention_gflops=p.attention_gflops,
            wall_ms=p.wall_ms, peak_bytes=p.peak_bytes, images_per_s=p.images_per_s
        ) for p in points],
        slopes=fit_slopes(points)
    )


def growth(points: Sequence[CurvePoint], mode: AttentionMode, low: int, high: int) -> Tuple[float, float]:
    """ (gflops ratio, attention-only ratio) between two resolutions of one mode """
    by_res = {p.resolution: p for p in points if p.mode is mode}
    if low not in by_res or high not in by_res:
        raise KeyError("%s has no points at %d and %d" % (mode.value, low, high))
    return by_res[high].gflops / by_res[low].gflops, by_res[high].attention_gflops / by_res[low].attention_gflops
