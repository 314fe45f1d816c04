# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

from typing import Tuple, Optional

import torch
import torch.nn as nn
from einops import rearrange

from .attention import PositionGrid, TokenGrid, attend
from .config import BlockConfig
from .error import GridError


def init_weights(m: nn.Module):
    """ Truncated normal (std 0.02) weights, zero biases, unit norm scales """
    if isinstance(m, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(m.weight, std=.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class FeatureReductionAttention(nn.Module):
    """
    Projects C channels to C / R for Q, K and V, runs attention per head of width C / (R * H)
    and projects the concatenated heads back to C.
    """
    def __init__(self, config: BlockConfig):
        super().__init__()
        self.config = config
        reduced = config.reduced_dim
        self.q = nn.Linear(config.dim, reduced)
        self.k = nn.Linear(config.dim, reduced)
        self.v = nn.Linear(config.dim, reduced)
        self.proj = nn.Linear(reduced, config.dim)
        self.proj_drop = nn.Dropout(config.drop)

    def project(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.q(x), self.k(x), self.v(x)

    def heads(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, grid: PositionGrid,
              use_oracle: bool = False) -> torch.Tensor:
        h = self.config.heads
        q, k, v = (rearrange(t, 'b n (h d) -> b h n d', h=h) for t in (q, k, v))
        out = attend(q, k, v, grid, self.config.mode, self.config.eps, use_oracle=use_oracle)
        return self.proj_drop(self.proj(rearrange(out, 'b h n d -> b n (h d)')))

    def forward(self, x: torch.Tensor, grid: PositionGrid, use_oracle: bool = False) -> torch.Tensor:
        return self.heads(*self.project(x), grid, use_oracle=use_oracle)


class FeaturePreservingConnection(nn.Module):
    """ Global average pool over tokens, linear -> GELU -> linear, broadcast back to every token. """
    def __init__(self, dim: int, act_layer=nn.GELU):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.act = act_layer()
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=-2, keepdim=True)
        return self.fc2(self.act(self.fc1(pooled))).expand_as(x)


class DepthwiseConv(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim, 3, 1, 1, bias=True, groups=dim)

    def forward(self, x: torch.Tensor, grid: PositionGrid) -> torch.Tensor:
        x = rearrange(x, 'b (n m) c -> b c n m', n=grid.n, m=grid.m)
        return rearrange(self.conv(x), 'b c n m -> b (n m) c')


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int, dwconv: bool = False, drop: float = 0.0):
        super().__init__()
        hidden = dim * expansion
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = DepthwiseConv(hidden) if dwconv else None
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(drop)

    def forward(self, x: torch.Tensor, grid: PositionGrid) -> torch.Tensor:
        x = self.fc1(x)
        if self.dwconv is not None:
            x = self.dwconv(x, grid)
        x = self.drop(self.act(x))
        return self.drop(self.fc2(x))


class VicinityBlock(nn.Module):
    """
    Pre-norm transformer block with Vicinity attention:
        Y = X + Att(norm1(X)) + FPC(norm1(X))
        Z = Y + FFN(norm2(Y))
    The parameters of this module are the block's BlockParams.
    """
    def __init__(self, config: BlockConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.norm1 = nn.LayerNorm(config.dim)
        self.attn = FeatureReductionAttention(config)
        self.fpc = FeaturePreservingConnection(config.dim) if config.fpc else None
        self.norm2 = nn.LayerNorm(config.dim)
        self.ffn = FeedForward(config.dim, config.expansion, dwconv=config.ffn_dwconv, drop=config.drop)
        self.apply(init_weights)

    def _mix(self, h: torch.Tensor, grid: PositionGrid, use_oracle: bool) -> torch.Tensor:
        out = self.attn(h, grid, use_oracle=use_oracle)
        if self.fpc is not None:
            out = out + self.fpc(h)
        return out

    def forward(self, x: torch.Tensor, grid: PositionGrid, use_oracle: bool = False) -> torch.Tensor:
        if x.shape[-1] != self.config.dim:
            raise GridError("VicinityBlock: expected %d channels, got %d" % (self.config.dim, x.shape[-1]))
        if self.config.post_norm:
            y = self.norm1(x + self._mix(x, grid, use_oracle))
            return self.norm2(y + self.ffn(y, grid))
        y = x + self._mix(self.norm1(x), grid, use_oracle)
        return y + self.ffn(self.norm2(y), grid)


def fra_project(x: TokenGrid, block: VicinityBlock) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """ Q, K, V of shape (batch, N, C / R) """
    if x.channels != block.config.dim:
        raise GridError("fra_project: expected %d channels, got %d" % (block.config.dim, x.channels))
    return block.attn.project(x.data)


def multi_head_vicinity(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, grid: PositionGrid,
                        block: VicinityBlock, use_oracle: bool = False) -> torch.Tensor:
    """ Per-head attention with the block's mode, heads concatenated and projected back to C """
    return block.attn.heads(q, k, v, grid, use_oracle=use_oracle)


def fpc_forward(x: torch.Tensor, block: VicinityBlock) -> torch.Tensor:
    if block.fpc is None:
        return torch.zeros_like(x)
    return block.fpc(x)


def block_forward(x: TokenGrid, block: VicinityBlock, use_oracle: bool = False) -> TokenGrid:
    return TokenGrid(block(x.data, x.grid, use_oracle=use_oracle), x.grid)


def expanded_head_width(config: BlockConfig) -> int:
    """ Width of Q' / K' per head after the position expansion """
    return config.mode.expansion * config.head_dim
