# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

from typing import Final, Dict, Tuple, List

import torch
import torch.nn as nn

from .attention import AttentionMode, TokenGrid
from .block import VicinityBlock, init_weights
from .config import StageSpec, VariantSpec, VARIANT_NAMES
from .error import ConfigError, GridError

# Four-stage pyramid shared by all variants
STAGE_CHANNELS: Final[Tuple[int, ...]] = (96, 160, 320, 512)
STAGE_PATCH_SIZES: Final[Tuple[int, ...]] = (4, 2, 2, 2)
STAGE_HEADS: Final[Tuple[int, ...]] = (1, 2, 5, 8)
FR_RATIO: Final[int] = 2

VARIANT_DEPTHS: Final[Dict[str, Tuple[int, ...]]] = {
    "tiny": (2, 2, 2, 2),
    "small": (3, 3, 9, 3),
    "medium": (3, 3, 27, 3),
    "large": (4, 4, 36, 4),
}

VARIANT_EXPANSIONS: Final[Dict[str, Tuple[int, ...]]] = {
    "tiny": (8, 8, 4, 4),
    "small": (8, 8, 4, 4),
    "medium": (8, 8, 4, 4),
    "large": (4, 4, 4, 4),
}

# Smallest input side: four stages halve a stride-4 grid three times
MIN_SIDE: Final[int] = 32


def variant_spec(name: str, mode: AttentionMode = AttentionMode.VICINITY_2D, fpc_enabled: bool = True, **options) -> VariantSpec:
    """
    :param name: one of tiny, small, medium, large
    :param mode: Attention mode used by every block
    :param fpc_enabled: Feature Preserving Connection on/off
    :param options: other VariantSpec fields (overlap_embed, ffn_dwconv, post_norm, drop)
    """
    if name not in VARIANT_NAMES:
        raise ConfigError('Unknown variant "%s". Valid variants: %s' % (name, ", ".join(VARIANT_NAMES)))
    stages = tuple(
        StageSpec(channels=c, patch_size=p, fr_ratio=FR_RATIO, heads=h, expansion=e, depth=d)
        for c, p, h, e, d in zip(STAGE_CHANNELS, STAGE_PATCH_SIZES, STAGE_HEADS, VARIANT_EXPANSIONS[name], VARIANT_DEPTHS[name])
    )
    spec = VariantSpec(name=name, stages=stages, mode=mode, fpc=fpc_enabled, **options)
    spec.validate()
    return spec


def patch_geometry(patch_size: int, overlap: bool) -> Tuple[int, int, int]:
    """ (kernel, stride, padding). Overlapping: 7/4/3 for P=4 and 3/2/1 for P=2; otherwise P/P/0. """
    if overlap:
        return 2 * patch_size - 1, patch_size, patch_size - 1
    return patch_size, patch_size, 0


class PatchEmbed(nn.Module):
    """ Strided convolution from a (B, C_in, H, W) map to a TokenGrid of (H/P) x (W/P) tokens, then LayerNorm """
    def __init__(self, in_channels: int, out_channels: int, patch_size: int, overlap: bool = True):
        super().__init__()
        kernel, stride, padding = patch_geometry(patch_size, overlap)
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, out_channels, kernel_size=kernel, stride=stride, padding=padding)
        self.norm = nn.LayerNorm(out_channels)

    def forward(self, x: torch.Tensor) -> TokenGrid:
        _, _, h, w = x.shape
        if h % self.patch_size != 0 or w % self.patch_size != 0:
            raise GridError("PatchEmbed: %dx%d input is not divisible by stride %d" % (h, w, self.patch_size))
        tokens = TokenGrid.from_map(self.proj(x))
        tokens.data = self.norm(tokens.data)
        return tokens


class VicinityVisionTransformer(nn.Module):
    """
    Four stages of (patch embedding, Vicinity blocks), a final LayerNorm and a linear classifier
    on the globally averaged last-stage tokens. The module parameters are the ModelParams.
    """
    def __init__(self, spec: VariantSpec, class_count: int = 1000):
        super().__init__()
        spec.validate()
        if class_count < 2:
            raise ConfigError("class_count must be >= 2")
        self.spec = spec
        self.class_count = class_count

        in_channels = spec.in_channels
        self.embeds = nn.ModuleList()
        self.stages = nn.ModuleList()
        for k, s in enumerate(spec.stages):
            self.embeds.append(PatchEmbed(in_channels, s.channels, s.patch_size, overlap=spec.overlap_embed))
            self.stages.append(nn.ModuleList([VicinityBlock(spec.block_config(k)) for _ in range(s.depth)]))
            in_channels = s.channels
        self.norm = nn.LayerNorm(in_channels)
        self.head = nn.Linear(in_channels, class_count)
        self.apply(init_weights)

    def forward_features(self, images: torch.Tensor) -> List[TokenGrid]:
        _, _, h, w = images.shape
        if h < MIN_SIDE or w < MIN_SIDE or h % MIN_SIDE != 0 or w % MIN_SIDE != 0:
            raise GridError("Input %dx%d must be at least %d and divisible by %d" % (h, w, MIN_SIDE, MIN_SIDE))
        features = []
        x = images
        for embed, blocks in zip(self.embeds, self.stages):
            tokens = embed(x)
            data = tokens.data
            for blk in blocks:
                data = blk(data, tokens.grid)
            tokens = TokenGrid(data, tokens.grid)
            features.append(tokens)
            x = tokens.to_map()
        return features

    def forward_head(self, features: List[TokenGrid]) -> torch.Tensor:
        pooled = self.norm(features[-1].data).mean(dim=1)
        return self.head(pooled)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward_head(self.forward_features(images))


def build_variant(name: str, class_count: int = 1000, mode: AttentionMode = AttentionMode.VICINITY_2D,
                  fpc_enabled: bool = True, **options) -> Tuple[VariantSpec, VicinityVisionTransformer]:
    spec = variant_spec(name, mode=mode, fpc_enabled=fpc_enabled, **options)
    return spec, VicinityVisionTransformer(spec, class_count)


def patch_embed(x: torch.Tensor, model: VicinityVisionTransformer, k: int) -> TokenGrid:
    """ Stage-k embedding of an image (k = 0) or of the previous stage's feature map """
    return model.embeds[k](x)


def backbone_forward(images: torch.Tensor, model: VicinityVisionTransformer) -> List[TokenGrid]:
    """ Multi-scale features at strides 4, 8, 16, 32 """
    return model.forward_features(images)


def classify(features: List[TokenGrid], model: VicinityVisionTransformer) -> torch.Tensor:
    return model.forward_head(features)


def block_param_count(channels: int, fr_ratio: int, expansion: int, fpc: bool = True, ffn_dwconv: bool = False) -> int:
    c = channels
    r = channels // fr_ratio
    hidden = c * expansion
    count = 2 * c + 2 * c                   # two LayerNorms
    count += 3 * (c * r + r)                # Q, K, V
    count += r * c + c                      # output projection
    if fpc:
        count += 2 * (c * c + c)
    count += c * hidden + hidden + hidden * c + c
    if ffn_dwconv:
        count += hidden * 9 + hidden
    return count


def embed_param_count(in_channels: int, channels: int, patch_size: int, overlap: bool = True) -> int:
    kernel, _, _ = patch_geometry(patch_size, overlap)
    return in_channels * channels * kernel * kernel + channels + 2 * channels


def count_params(spec: VariantSpec, class_count: int = 1000) -> int:
    """ Closed-form parameter count; equals the element count of the built model """
    total = 0
    in_channels = spec.in_channels
    for s in spec.stages:
        total += embed_param_count(in_channels, s.channels, s.patch_size, spec.overlap_embed)
        total += s.depth * block_param_count(s.channels, s.fr_ratio, s.expansion, spec.fpc, spec.ffn_dwconv)
        in_channels = s.channels
    total += 2 * in_channels
    total += in_channels * class_count + class_count
    return total


def materialized_param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def trace_shapes(model: VicinityVisionTransformer, images: torch.Tensor) -> List[Tuple[str, Tuple[int, int]]]:
    """
    Run one forward pass and record (name, (tokens, channels)) per embedding, per query
    projection and per block output, in execution order.
    """
    trace = []
    handles = []

    def record(name):
        def hook(_module, _inputs, output):
            data = output.data if isinstance(output, TokenGrid) else output
            trace.append((name, (int(data.shape[-2]), int(data.shape[-1]))))
        return hook

    for k, (embed, blocks) in enumerate(zip(model.embeds, model.stages)):
        handles.append(embed.register_forward_hook(record("stage%d.embed" % k)))
        for j, blk in enumerate(blocks):
            handles.append(blk.attn.q.register_forward_hook(record("stage%d.block%d.q" % (k, j))))
            handles.append(blk.register_forward_hook(record("stage%d.block%d.out" % (k, j))))
    try:
        with torch.no_grad():
            model(images)
    finally:
        for h in handles:
            h.remove()
    return trace
