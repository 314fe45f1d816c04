# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

"""
Closed-form cost model of a VVT forward pass for one image.

Counting convention: a multiply-add is one FLOP (i.e. MACs), as the published GFLOPs
columns are counted. Normalizations, activations, bias and residual additions, pooling
and the position expansion are counted at one FLOP per element, separately. The strict
"a multiply-add is two FLOPs" total is also reported (flops_2x).
"""

from dataclasses import dataclass, field, replace
from typing import List, Tuple, Sequence, Optional, Final

from .attention import AttentionMode, PositionGrid
from .backbone import patch_geometry, count_params
from .config import VariantSpec, StageSpec
from .error import ConfigError, GridError
from .protocol.report import ProtocolCostReportJson, ProtocolCostEntryJson

CONVENTION: Final[str] = (
    "gflops = (MACs + elementwise) / 1e9 with one multiply-add counted as one FLOP; "
    "norms, activations, biases, residuals and pooling count one FLOP per element; "
    "flops_2x counts a multiply-add as two FLOPs"
)


@dataclass
class CostEntry:
    name: str
    macs: int = 0
    elementwise: int = 0

    def __add__(self, other: 'CostEntry') -> 'CostEntry':
        return CostEntry(self.name, self.macs + other.macs, self.elementwise + other.elementwise)

    def times(self, count: int) -> 'CostEntry':
        return CostEntry(self.name, self.macs * count, self.elementwise * count)


@dataclass
class FlopReport:
    """ Per-part costs of one forward pass. Totals are always recomputed from the parts. """
    variant: str
    mode: AttentionMode
    height: int
    width: int
    parts: List[CostEntry] = field(default_factory=list)
    attention_macs: int = 0  # attention contraction only, summed over all blocks and heads
    params: Optional[int] = None
    convention: str = CONVENTION

    @property
    def macs(self) -> int:
        return sum(p.macs for p in self.parts)

    @property
    def elementwise(self) -> int:
        return sum(p.elementwise for p in self.parts)

    @property
    def gflops(self) -> float:
        return (self.macs + self.elementwise) / 1e9

    @property
    def flops_2x(self) -> float:
        return (2 * self.macs + self.elementwise) / 1e9

    @property
    def attention_gflops(self) -> float:
        return self.attention_macs / 1e9

    def part(self, name: str) -> CostEntry:
        for p in self.parts:
            if p.name == name:
                return p
        raise KeyError(name)

    def stage_total(self, k: int) -> CostEntry:
        prefix = "stage%d." % k
        total = CostEntry(prefix.rstrip("."))
        for p in self.parts:
            if p.name.startswith(prefix):
                total = total + p
        return total

    def to_json(self) -> ProtocolCostReportJson:
        return ProtocolCostReportJson(
            convention=self.convention,
            variant=self.variant,
            mode=self.mode.value,
            resolution=[self.height, self.width],
            params=self.params,
            gflops=self.gflops,
            flops_2x=self.flops_2x,
            attention_macs=self.attention_macs,
            parts=[ProtocolCostEntryJson(name=p.name, macs=p.macs, elementwise=p.elementwise) for p in self.parts]
        )


def stage_grids(spec: VariantSpec, height: int, width: int) -> List[PositionGrid]:
    """ Token grid of every stage for an H x W input """
    if height < 32 or width < 32 or height % 32 != 0 or width % 32 != 0:
        raise GridError("Input %dx%d must be at least 32 and divisible by 32" % (height, width))
    grids = []
    n, m = height, width
    for s in spec.stages:
        n, m = n // s.patch_size, m // s.patch_size
        grids.append(PositionGrid(n, m))
    return grids


def attention_core_macs(tokens: int, heads: int, head_dim: int, value_dim: int, mode: AttentionMode) -> int:
    """
    Multiply-adds of the attention contraction alone, all heads.
    Linear modes, with d' = expansion * head_dim: key/value summary N*d'*dv, numerator N*d'*dv,
    key sum N*d' and denominators N*d' per head. Softmax: N^2*d for the scores plus N^2*dv for the values.
    """
    if mode is AttentionMode.SOFTMAX_ORACLE:
        return heads * (tokens * tokens * head_dim + tokens * tokens * value_dim)
    expanded = mode.expansion * head_dim
    return heads * (2 * tokens * expanded * value_dim + 2 * tokens * expanded)


def _attention_core_elementwise(tokens: int, heads: int, head_dim: int, mode: AttentionMode) -> int:
    if mode is AttentionMode.SOFTMAX_ORACLE:
        # scale, exp, row sum, divide
        return heads * 4 * tokens * tokens
    expanded = mode.expansion * head_dim
    relu = 2 * tokens * head_dim
    expansion = 0 if mode is AttentionMode.NO_LOCALITY else 2 * tokens * expanded
    return heads * (relu + expansion + tokens * head_dim)


def block_costs(s: StageSpec, grid: PositionGrid, spec: VariantSpec, prefix: str) -> Tuple[List[CostEntry], int]:
    """ Costs of one block of stage s, and its attention-core MACs """
    c = s.channels
    n = grid.size
    r = c // s.fr_ratio
    head_dim = r // s.heads
    hidden = c * s.expansion

    core = attention_core_macs(n, s.heads, head_dim, head_dim, spec.mode)
    entries = [
        CostEntry(prefix + "norm", 0, 2 * n * c),
        CostEntry(prefix + "attn_proj", 3 * n * c * r + n * r * c, n * (3 * r + c)),
        CostEntry(prefix + "attn_core", core, _attention_core_elementwise(n, s.heads, head_dim, spec.mode)),
    ]
    if spec.fpc:
        # pool, GELU, biases, broadcast add
        entries.append(CostEntry(prefix + "fpc", 2 * c * c, n * c + c + 2 * c + n * c))
    ffn = CostEntry(prefix + "ffn", 2 * n * c * hidden, n * hidden + n * hidden + n * c)
    if spec.ffn_dwconv:
        ffn = ffn + CostEntry(prefix + "ffn", n * hidden * 9, n * hidden)
    entries.append(ffn)
    entries.append(CostEntry(prefix + "residual", 0, 2 * n * c))
    return entries, core


def flop_model(spec: VariantSpec, mode: Optional[AttentionMode] = None, height: int = 224, width: Optional[int] = None,
               class_count: int = 1000) -> FlopReport:
    """
    :param spec: The variant to model
    :param mode: Overrides spec.mode when given
    :param height: Input height in pixels
    :param width: Input width, defaults to height
    :param class_count: Classifier width
    """
    spec.validate()
    width = width or height
    if mode is not None and mode is not spec.mode:
        spec = replace(spec, mode=mode)
    grids = stage_grids(spec, height, width)

    report = FlopReport(variant=spec.name, mode=spec.mode, height=height, width=width,
                        params=count_params(spec, class_count))
    in_channels = spec.in_channels
    for k, (s, grid) in enumerate(zip(spec.stages, grids)):
        kernel, _, _ = patch_geometry(s.patch_size, spec.overlap_embed)
        n = grid.size
        report.parts.append(CostEntry(
            "stage%d.embed" % k,
            n * s.channels * in_channels * kernel * kernel,
            n * s.channels + n * s.channels  # bias, LayerNorm
        ))
        if s.depth > 0:
            entries, core = block_costs(s, grid, spec, "stage%d." % k)
            report.parts.extend(e.times(s.depth) for e in entries)
            report.attention_macs += core * s.depth
        in_channels = s.channels

    last = grids[-1].size
    report.parts.append(CostEntry("head", in_channels * class_count, 2 * last * in_channels + class_count))
    return report


def attention_series(spec: VariantSpec, mode: AttentionMode, resolutions: Sequence[int]) -> List[Tuple[int, int]]:
    """ (stage-1 token count, attention-only MACs) per square resolution """
    series = []
    for res in resolutions:
        report = flop_model(spec, mode, res)
        series.append((stage_grids(spec, res, res)[0].size, report.attention_macs))
    return series


def fr_sweep(spec: VariantSpec, ratios: Sequence[int] = (1, 2, 4, 8), resolution: int = 224,
             mode: Optional[AttentionMode] = None, class_count: int = 1000) -> List[Tuple[int, int, float]]:
    """ (fr_ratio, params, gflops) for each feature-reduction ratio """
    rows = []
    for ratio in ratios:
        variant = spec.with_fr_ratio(ratio)
        try:
            variant.validate()
        except ConfigError as ex:
            raise ConfigError("fr_ratio %d: %s" % (ratio, ex.msg))
        report = flop_model(variant, mode, resolution, class_count=class_count)
        rows.append((ratio, report.params, report.gflops))
    return rows


def estimate_peak_bytes(spec: VariantSpec, mode: Optional[AttentionMode] = None, height: int = 224,
                        width: Optional[int] = None, batch: int = 1, itemsize: int = 4) -> int:
    """
    Rough inference activation peak: the largest single block's live tensors
    (input, normalized input, residual, Q/K/V, FFN hidden, attention intermediates).
    """
    mode = mode or spec.mode
    width = width or height
    peak = 0
    for s, grid in zip(spec.stages, stage_grids(spec, height, width)):
        n = grid.size
        r = s.channels // s.fr_ratio
        live = 3 * n * s.channels + 3 * n * r + n * s.channels * s.expansion
        if mode is AttentionMode.SOFTMAX_ORACLE:
            live += 2 * s.heads * n * n
        else:
            live += 2 * n * r * mode.expansion
        peak = max(peak, live)
    return peak * batch * itemsize


def layer_trace(spec: VariantSpec, height: int, width: Optional[int] = None) -> List[Tuple[str, Tuple[int, int]]]:
    """ Expected (name, (tokens, channels)) sequence recorded by backbone.trace_shapes() """
    width = width or height
    trace = []
    for k, (s, grid) in enumerate(zip(spec.stages, stage_grids(spec, height, width))):
        trace.append(("stage%d.embed" % k, (grid.size, s.channels)))
        for j in range(s.depth):
            trace.append(("stage%d.block%d.q" % (k, j), (grid.size, s.channels // s.fr_ratio)))
            trace.append(("stage%d.block%d.out" % (k, j), (grid.size, s.channels)))
    return trace
