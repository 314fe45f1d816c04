# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

"""
Self-checks run by `vvt verify`: linear attention against the explicit N x N oracle,
structural invariants of the attention weights, and finite-difference gradient checks
(including a negative control that must fail).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn

from .attention import (
    AttentionMode, PositionGrid, linear_attention, quadratic_oracle, oracle_weights, locality_matrix,
    reweight_factor, softmax_weights, expand_with_angles, angle_encode, EPS
)
from .backbone import VicinityVisionTransformer
from .block import VicinityBlock
from .config import BlockConfig, StageSpec, VariantSpec
from .error import ConfigError
from .gradcheck import GradCheckReport, grad_check, check_linear_attention, check_softmax_attention

logger = logging.getLogger(__name__)

LINEAR_MODES = (AttentionMode.VICINITY_2D, AttentionMode.LOCALITY_1D, AttentionMode.NO_LOCALITY)

PRECISIONS = {
    "double": (torch.float64, 1e-10),
    "single": (torch.float32, 1e-3),
}

GRAD_TOL = 1e-5
GRAD_SEEDS = (0, 1, 2)
# stacked layers with order-one weights carry enough curvature to need a smaller step
BACKBONE_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float = 0.0  # measured error, or 0/1 for boolean checks
    limit: float = 0.0


@dataclass
class SuiteReport:
    name: str
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def add(self, name: str, value: float, limit: float, passed: bool = None):
        passed = value <= limit if passed is None else passed
        self.results.append(CheckResult(name, bool(passed), float(value), float(limit)))
        if not passed:
            logger.warning("%s: %s failed (%.3e > %.3e)", self.name, name, value, limit)


def _precision(precision: str) -> Tuple[torch.dtype, float]:
    if precision not in PRECISIONS:
        raise ConfigError('Unknown precision "%s". Valid values: %s' % (precision, ", ".join(PRECISIONS)))
    return PRECISIONS[precision]


def _randn(generator: torch.Generator, shape, dtype) -> torch.Tensor:
    return torch.randn(shape, dtype=torch.float64, generator=generator).to(dtype)


def _randint(generator: torch.Generator, low: int, high: int) -> int:
    return int(torch.randint(low, high + 1, (1,), generator=generator))


def oracle_suite(cases: int = 100, seed: int = 0, precision: str = "double") -> SuiteReport:
    """
    Random (batch <= 4, grid up to 16 x 16, d <= 32) cases cycling through the linear modes,
    plus one block run through both attention paths.
    """
    dtype, tol = _precision(precision)
    generator = torch.Generator().manual_seed(seed)
    report = SuiteReport("oracle")
    worst = {mode: 0.0 for mode in LINEAR_MODES}
    for case in range(cases):
        mode = LINEAR_MODES[case % len(LINEAR_MODES)]
        batch = _randint(generator, 1, 4)
        grid = PositionGrid(_randint(generator, 1, 16), _randint(generator, 1, 16))
        d, dv = _randint(generator, 1, 32), _randint(generator, 1, 32)
        q = _randn(generator, (batch, grid.size, d), dtype)
        k = _randn(generator, (batch, grid.size, d), dtype)
        v = _randn(generator, (batch, grid.size, dv), dtype)
        err = (linear_attention(q, k, v, grid, mode) - quadratic_oracle(q, k, v, grid, mode)).abs().max().item()
        worst[mode] = max(worst[mode], err)
    for mode, err in worst.items():
        report.add("linear == oracle [%s]" % mode.value, err, tol)

    torch.manual_seed(seed)
    block = VicinityBlock(BlockConfig(dim=8, heads=2, fr_ratio=2, expansion=2)).to(dtype)
    grid = PositionGrid(4, 4)
    x = _randn(generator, (2, grid.size, 8), dtype)
    with torch.no_grad():
        err = (block(x, grid) - block(x, grid, use_oracle=True)).abs().max().item()
    report.add("block linear == block oracle", err, tol)
    return report


def _row_checks(report: SuiteReport, q: torch.Tensor, k: torch.Tensor, grid: PositionGrid,
                mode: AttentionMode) -> Tuple[float, float]:
    weights = oracle_weights(q, k, grid, mode)
    if mode is AttentionMode.SOFTMAX_ORACLE:
        live = torch.ones(weights.shape[:-1], dtype=torch.bool)
    else:
        raw = (torch.relu(q) @ torch.relu(k).transpose(-2, -1)) * locality_matrix(grid, mode, dtype=q.dtype)
        live = raw.sum(-1) > EPS
        # clamped rows are divided by eps instead of their sum, so they carry at most unit mass
        dead = weights[~live]
        if dead.numel():
            report.add("clamped rows sum to at most 1 [%s]" % mode.value, dead.sum(-1).max().item(), 1.0 + 1e-9)
    row_err = (weights.sum(-1)[live] - 1.0).abs().max().item() if live.any() else 0.0
    return row_err, -weights.min().item()


def invariant_suite(cases: int = 50, seed: int = 0, precision: str = "double") -> SuiteReport:
    dtype, tol = _precision(precision)
    row_tol = 1e-9 if dtype is torch.float64 else tol
    generator = torch.Generator().manual_seed(seed)
    report = SuiteReport("invariants")

    # re-weight bounds, exhaustive on 8 x 8
    grid = PositionGrid(8, 8)
    w = locality_matrix(grid, AttentionMode.VICINITY_2D)
    report.add("reweight within [0, 2]", max(-w.min().item(), w.max().item() - 2.0, 0.0), 1e-12)
    report.add("reweight diagonal == 2", (w.diagonal() - 2.0).abs().max().item(), 1e-15)
    report.add("reweight symmetric", (w - w.T).abs().max().item(), 1e-15)
    scalar = torch.tensor([[reweight_factor(i, j, grid) for j in range(grid.size)] for i in range(grid.size)], dtype=torch.float64)
    report.add("reweight_factor == locality_matrix", (scalar - w).abs().max().item(), 1e-12)

    # rows sum to one and never go negative, zero-row Q included every third case
    row_err, negative = 0.0, 0.0
    modes = LINEAR_MODES + (AttentionMode.SOFTMAX_ORACLE,)
    for case in range(cases):
        mode = modes[case % len(modes)]
        grid = PositionGrid(_randint(generator, 1, 8), _randint(generator, 1, 8))
        d = _randint(generator, 1, 16)
        q = _randn(generator, (2, grid.size, d), dtype)
        k = _randn(generator, (2, grid.size, d), dtype)
        if case % 3 == 0:
            rows = torch.rand(grid.size, generator=generator) < 0.5
            q[:, rows] = -q[:, rows].abs()
        e, n = _row_checks(report, q, k, grid, mode)
        row_err, negative = max(row_err, e), max(negative, n)
    report.add("rows sum to 1", row_err, row_tol)
    report.add("weights non-negative", max(negative, 0.0), 0.0)

    # locality: identical positive rows, maximum on the diagonal, non-increasing along row/column rays
    grid = PositionGrid(8, 8)
    ones = torch.ones((grid.size, 4), dtype=torch.float64)
    a = oracle_weights(ones, ones, grid, AttentionMode.VICINITY_2D).view(grid.n, grid.m, grid.n, grid.m)
    argmax_ok = True
    increase = 0.0
    for u in range(grid.n):
        for r in range(grid.m):
            row = a[u, r]
            argmax_ok &= int(row.flatten().argmax()) == u * grid.m + r
            for ray in (row[u, r:], row[u, :r + 1].flip(0), row[u:, r], row[:u + 1, r].flip(0)):
                if ray.numel() > 1:
                    increase = max(increase, (ray[1:] - ray[:-1]).max().item())
    report.add("weight maximal at own position", 0.0 if argmax_ok else 1.0, 0.0)
    report.add("weight non-increasing along rays", max(increase, 0.0), 1e-15)

    # transposing a square grid swaps the two angles and leaves the re-weighting unchanged
    grid = PositionGrid(6, 6)
    perm = torch.arange(grid.size).view(grid.n, grid.m).T.reshape(-1)
    q = _randn(generator, (1, grid.size, 5), dtype)
    k = _randn(generator, (1, grid.size, 5), dtype)
    v = _randn(generator, (1, grid.size, 3), dtype)
    out = linear_attention(q, k, v, grid, AttentionMode.VICINITY_2D)
    permuted = linear_attention(q[:, perm], k[:, perm], v[:, perm], grid, AttentionMode.VICINITY_2D)
    report.add("permutation equivariance", (permuted - out[:, perm]).abs().max().item(), tol)

    # expansion keeps row norms (cos^2 + sin^2 = 1)
    x = torch.relu(_randn(generator, (grid.size, 6), dtype))
    xe = expand_with_angles(x, angle_encode(grid, dtype=dtype), AttentionMode.VICINITY_2D)
    half = xe[:, :12].pow(2).sum(-1)
    report.add("expansion preserves row norms", (half - x.pow(2).sum(-1)).abs().max().item(), tol)

    s = softmax_weights(_randn(generator, (16, 4), dtype), _randn(generator, (16, 4), dtype))
    report.add("softmax rows sum to 1", (s.sum(-1) - 1.0).abs().max().item(), 1e-12 if dtype is torch.float64 else tol)
    return report


def randomize_parameters(module: nn.Module, generator: torch.Generator, scale: float = 0.3):
    """ Replace parameters with draws of order one so gradient checks are not dominated by tiny weights """
    with torch.no_grad():
        for name, p in module.named_parameters():
            noise = torch.randn(p.shape, dtype=torch.float64, generator=generator).to(p.dtype)
            if "norm" in name and name.endswith("weight"):
                p.copy_(1.0 + 0.1 * noise)
            else:
                p.copy_(scale * noise)


def relu_inputs(module: nn.Module, *inputs) -> List[torch.Tensor]:
    """ The query and key projections of every attention layer in module, for one forward pass """
    captured = []
    handles = []
    for m in module.modules():
        if isinstance(m, VicinityBlock):
            for proj in (m.attn.q, m.attn.k):
                handles.append(proj.register_forward_hook(lambda _m, _i, out: captured.append(out.detach())))
    try:
        with torch.no_grad():
            module(*inputs)
    finally:
        for h in handles:
            h.remove()
    return captured


def check_block(seed: int = 0, tol: float = GRAD_TOL, grid: PositionGrid = PositionGrid(4, 4)) -> GradCheckReport:
    generator = torch.Generator().manual_seed(seed)
    block = VicinityBlock(BlockConfig(dim=8, heads=2, fr_ratio=2, expansion=2)).double()
    randomize_parameters(block, generator)

    def sample(g: torch.Generator):
        return [torch.randn((1, grid.size, 8), dtype=torch.float64, generator=g)]

    return grad_check(
        lambda x: block(x, grid), sample, seed=seed, tol=tol, name="block_forward",
        input_names=("X",), params=list(block.named_parameters()),
        kink_probe=lambda x: relu_inputs(block, x, grid)
    )


def mini_backbone_spec() -> VariantSpec:
    """ Two blocks in total: one in each of the first two stages, the last two stages embed only """
    return VariantSpec(name="mini", stages=(
        StageSpec(channels=8, patch_size=4, fr_ratio=2, heads=1, expansion=2, depth=1),
        StageSpec(channels=8, patch_size=2, fr_ratio=2, heads=1, expansion=2, depth=1),
        StageSpec(channels=16, patch_size=2, fr_ratio=2, heads=2, expansion=2, depth=0),
        StageSpec(channels=16, patch_size=2, fr_ratio=2, heads=2, expansion=2, depth=0),
    ))


def check_mini_backbone(seed: int = 0, tol: float = GRAD_TOL, max_entries: int = 24, step: float = BACKBONE_STEP) -> GradCheckReport:
    generator = torch.Generator().manual_seed(seed)
    model = VicinityVisionTransformer(mini_backbone_spec(), class_count=3).double()
    randomize_parameters(model, generator)

    def sample(g: torch.Generator):
        return [torch.randn((1, 3, 32, 32), dtype=torch.float64, generator=g)]

    return grad_check(
        model, sample, seed=seed, step=step, tol=tol, name="mini_backbone",
        input_names=("images",), params=list(model.named_parameters()),
        kink_probe=lambda x: relu_inputs(model, x), max_entries=max_entries
    )


def gradient_suite(seeds: Sequence[int] = GRAD_SEEDS, tol: float = GRAD_TOL) -> SuiteReport:
    """ Always double precision """
    report = SuiteReport("gradients")
    grid = PositionGrid(4, 4)
    for seed in seeds:
        for mode in LINEAR_MODES:
            r = check_linear_attention(grid, mode, seed=seed, tol=tol)
            report.add("%s seed=%d" % (r.name, seed), r.max_rel_error, tol)
        r = check_softmax_attention(seed=seed, tol=tol)
        report.add("%s seed=%d" % (r.name, seed), r.max_rel_error, tol)
        r = check_block(seed, tol)
        report.add("%s seed=%d" % (r.name, seed), r.max_rel_error, tol)
        r = check_mini_backbone(seed, tol)
        report.add("%s seed=%d" % (r.name, seed), r.max_rel_error, tol)

        # the broken backward must be caught
        r = check_linear_attention(grid, AttentionMode.VICINITY_2D, seed=seed, tol=tol, corrupted=True)
        report.add("negative control %s seed=%d" % (r.name, seed), r.max_rel_error, tol, passed=not r.passed)
    return report


def run_all(precision: str = "double", seed: int = 0, cases: int = 100) -> List[SuiteReport]:
    _precision(precision)
    return [
        oracle_suite(cases, seed, precision),
        invariant_suite(seed=seed, precision=precision),
        gradient_suite(tuple(seed + s for s in GRAD_SEEDS)),
    ]


def format_summary(reports: Sequence[SuiteReport]) -> str:
    lines = ["%-11s %-52s %11s %11s  %s" % ("suite", "check", "value", "limit", "result")]
    for rep in reports:
        for r in rep.results:
            lines.append("%-11s %-52s %11.3e %11.3e  %s" % (rep.name, r.name, r.value, r.limit, "PASS" if r.passed else "FAIL"))
    lines.append("%d/%d suites passed" % (sum(r.passed for r in reports), len(reports)))
    return "\n".join(lines)
