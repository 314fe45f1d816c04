# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple, Final

from .attention import AttentionMode, EPS
from .error import ConfigError
from .util import strict_dataclass

VARIANT_NAMES: Final[Tuple[str, ...]] = ("tiny", "small", "medium", "large")

DATASET_SOURCES: Final[Tuple[str, ...]] = ("synthetic", "cifar10", "cifar100")


@dataclass
class BlockConfig:
    """
    Hyperparameters of one Vicinity Attention Block.
    The projections map dim -> dim / fr_ratio, split into `heads` heads; the FFN widens by `expansion`.
    """
    dim: int
    heads: int = 1
    fr_ratio: int = 2
    expansion: int = 4
    mode: AttentionMode = AttentionMode.VICINITY_2D
    fpc: bool = True
    post_norm: bool = False
    ffn_dwconv: bool = False
    drop: float = 0.0
    eps: float = EPS

    def validate(self):
        if self.dim < 1 or self.heads < 1:
            raise ConfigError('BlockConfig: dim and heads must be >= 1')
        if self.fr_ratio < 1:
            raise ConfigError('BlockConfig: fr_ratio must be >= 1')
        if self.expansion < 1:
            raise ConfigError('BlockConfig: expansion must be >= 1')
        if self.dim % (self.fr_ratio * self.heads) != 0:
            raise ConfigError('BlockConfig: dim %d is not divisible by fr_ratio * heads = %d' % (self.dim, self.fr_ratio * self.heads))
        if not 0.0 <= self.drop < 1.0:
            raise ConfigError('BlockConfig: drop must be in [0, 1)')
        if self.eps <= 0:
            raise ConfigError('BlockConfig: eps must be > 0')

    @property
    def reduced_dim(self) -> int:
        return self.dim // self.fr_ratio

    @property
    def head_dim(self) -> int:
        return self.dim // (self.fr_ratio * self.heads)


@dataclass(frozen=True)
class StageSpec:
    channels: int
    patch_size: int
    fr_ratio: int
    heads: int
    expansion: int
    depth: int

    def validate(self):
        if self.patch_size not in (2, 4):
            raise ConfigError('StageSpec: patch size must be 2 or 4, got %d' % self.patch_size)
        if self.fr_ratio < 1 or self.heads < 1 or self.expansion < 1:
            raise ConfigError('StageSpec: fr_ratio, heads and expansion must be >= 1')
        if self.channels % (self.fr_ratio * self.heads) != 0:
            raise ConfigError('StageSpec: channels %d not divisible by fr_ratio * heads = %d' % (self.channels, self.fr_ratio * self.heads))
        if self.depth < 0:
            raise ConfigError('StageSpec: depth must be >= 0')


@dataclass(frozen=True)
class VariantSpec:
    """
    A four-stage pyramid description plus the ablation switches that change wiring, not shapes
    (mode) or that change shapes in a known way (fpc, ffn_dwconv, overlap_embed).
    """
    name: str
    stages: Tuple[StageSpec, ...]
    mode: AttentionMode = AttentionMode.VICINITY_2D
    fpc: bool = True
    overlap_embed: bool = True
    ffn_dwconv: bool = False
    post_norm: bool = False
    drop: float = 0.0
    in_channels: int = 3

    def validate(self):
        if len(self.stages) != 4:
            raise ConfigError('VariantSpec: expected 4 stages, got %d' % len(self.stages))
        for s in self.stages:
            s.validate()
        if self.stages[0].patch_size != 4 or any(s.patch_size != 2 for s in self.stages[1:]):
            raise ConfigError('VariantSpec: patch sizes must be (4, 2, 2, 2)')

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(s.channels for s in self.stages)

    @property
    def depths(self) -> Tuple[int, ...]:
        return tuple(s.depth for s in self.stages)

    def block_config(self, k: int) -> BlockConfig:
        s = self.stages[k]
        return BlockConfig(
            dim=s.channels, heads=s.heads, fr_ratio=s.fr_ratio, expansion=s.expansion,
            mode=self.mode, fpc=self.fpc, post_norm=self.post_norm, ffn_dwconv=self.ffn_dwconv, drop=self.drop
        )

    def with_fr_ratio(self, fr_ratio: int) -> 'VariantSpec':
        return replace(self, stages=tuple(replace(s, fr_ratio=fr_ratio) for s in self.stages))

    def scaled(self, channel_divisor: int = 1, depths: Optional[Tuple[int, ...]] = None) -> 'VariantSpec':
        """ Shrink channels by an integer divisor and optionally override depths (desk-scale models) """
        depths = depths or self.depths
        if len(depths) != 4:
            raise ConfigError('VariantSpec: depth override needs 4 values')
        return replace(
            self,
            name="%s/%d" % (self.name, channel_divisor) if channel_divisor != 1 else self.name,
            stages=tuple(replace(s, channels=s.channels // channel_divisor, depth=d) for s, d in zip(self.stages, depths))
        )


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    path: Optional[str] = None  # CIFAR binary directory; VVT_DATA_DIR when not given
    class_count: int = 10
    image_side: int = 32
    train_count: int = 1024
    val_count: int = 256
    upscale: Optional[int] = None  # CIFAR only
    template_size: int = 3  # synthetic only: side of the stamped class pattern

    def validate(self):
        if self.source not in DATASET_SOURCES:
            raise ConfigError('DatasetSpec: source must be one of %s' % ", ".join(DATASET_SOURCES))
        if self.class_count < 2:
            raise ConfigError('DatasetSpec: class_count must be >= 2')
        side = self.upscale or self.image_side
        if side % 32 != 0:
            raise ConfigError('DatasetSpec: image side %d is not divisible by 32' % side)
        if self.train_count < 1 or self.val_count < 0:
            raise ConfigError('DatasetSpec: train_count must be >= 1 and val_count >= 0')
        if self.source == "synthetic":
            if self.upscale is not None:
                raise ConfigError('DatasetSpec: upscale applies to CIFAR sources only, set image_side for synthetic data')
            if not 1 <= self.template_size <= self.image_side:
                raise ConfigError('DatasetSpec: template_size must be in [1, image_side]')


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    total_epochs: int = 300
    batch_size: int = 128
    seed: int = 0
    mode: AttentionMode = AttentionMode.VICINITY_2D
    fr_ratio: Optional[int] = None
    fpc: bool = True
    variant: str = "tiny"
    channel_divisor: int = 1
    depths: Optional[Tuple[int, ...]] = None
    betas: Tuple[float, float] = (0.9, 0.999)
    augment_crop: bool = False
    augment_flip: bool = False
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    out_dir: str = "runs/default"

    def validate(self):
        if self.lr < 0:
            raise ConfigError('TrainConfig: lr must be >= 0')
        if self.total_epochs < 1:
            raise ConfigError('TrainConfig: total_epochs must be >= 1')
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError('TrainConfig: warmup_epochs must be in [0, total_epochs)')
        if self.batch_size < 1:
            raise ConfigError('TrainConfig: batch_size must be >= 1')
        if self.variant not in VARIANT_NAMES:
            raise ConfigError('TrainConfig: unknown variant "%s". Valid variants: %s' % (self.variant, ", ".join(VARIANT_NAMES)))
        if self.fr_ratio is not None and self.fr_ratio < 1:
            raise ConfigError('TrainConfig: fr_ratio must be >= 1')
        if self.channel_divisor < 1:
            raise ConfigError('TrainConfig: channel_divisor must be >= 1')
        self.dataset.validate()

    @classmethod
    def from_json(cls, text: str) -> 'TrainConfig':
        try:
            data = json.loads(text)
        except json.JSONDecodeError as json_error:
            raise ConfigError("TrainConfig JSON Parsing Error: %s" % str(json_error))
        return strict_dataclass(cls, data)

    @classmethod
    def from_file(cls, path: str) -> 'TrainConfig':
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.from_json(f.read())
        except OSError as ex:
            raise ConfigError("Unable to read config %s: %s" % (path, ex))


@dataclass
class RunConfig:
    """ A parsed command line, validated before dispatch """
    command: str
    variant: str = "tiny"
    mode: AttentionMode = AttentionMode.VICINITY_2D
    modes: Tuple[AttentionMode, ...] = ()
    resolution: int = 224
    resolutions: Tuple[int, ...] = ()
    repeats: int = 3
    seed: int = 0
    config_path: Optional[str] = None
    output_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    data_dir: Optional[str] = None

    def validate(self):
        if self.variant not in VARIANT_NAMES:
            raise ConfigError('unknown variant "%s". Valid variants: %s' % (self.variant, ", ".join(VARIANT_NAMES)))
        for res in (self.resolution,) + tuple(self.resolutions):
            if res < 32 or res % 32 != 0:
                raise ConfigError('resolution %d is not a positive multiple of 32' % res)
        if self.repeats < 3:
            raise ConfigError('repeats must be >= 3')
