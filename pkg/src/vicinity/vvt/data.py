# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

import hashlib
import logging
import os
from typing import Optional, Tuple, List, Final

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import Dataset

from .config import DatasetSpec
from .error import DatasetError

logger = logging.getLogger(__name__)

DATA_DIR_ENV: Final[str] = "VVT_DATA_DIR"

CIFAR_SIDE: Final[int] = 32
CIFAR_PIXELS: Final[int] = 3 * CIFAR_SIDE * CIFAR_SIDE

# kind -> (label bytes, class count, extracted directory name, train files, test files)
CIFAR_LAYOUTS: Final[dict] = {
    "cifar10": (1, 10, "cifar-10-batches-bin", ["data_batch_%d.bin" % i for i in range(1, 6)], ["test_batch.bin"]),
    "cifar100": (2, 100, "cifar-100-binary", ["train.bin"], ["test.bin"]),
}


class ImageDataset(Dataset):
    """ Float images (count, 3, side, side) with integer labels in [0, class_count) """
    def __init__(self, images: torch.Tensor, labels: torch.Tensor, class_count: int, name: str = "dataset"):
        if images.dim() != 4 or images.shape[0] != labels.shape[0]:
            raise DatasetError("%s: %s images for %s labels" % (name, tuple(images.shape), tuple(labels.shape)))
        if images.shape[-1] != images.shape[-2]:
            raise DatasetError("%s: images must be square, got %dx%d" % (name, images.shape[-2], images.shape[-1]))
        self.images = images
        self.labels = labels.to(torch.int64)
        self.class_count = class_count
        self.name = name

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.images[index], self.labels[index]

    @property
    def side(self) -> int:
        return self.images.shape[-1]

    def subset(self, start: int, stop: int, name: Optional[str] = None) -> 'ImageDataset':
        return ImageDataset(self.images[start:stop], self.labels[start:stop], self.class_count, name or self.name)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.detach().cpu().contiguous().numpy().tobytes())
        h.update(self.labels.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def label_histogram(self) -> List[int]:
        return torch.bincount(self.labels, minlength=self.class_count).tolist()


def default_data_dir() -> Optional[str]:
    return os.environ.get(DATA_DIR_ENV)


def _resolve_cifar_file(path: str, kind: str, file_name: str) -> str:
    extracted = CIFAR_LAYOUTS[kind][2]
    for candidate in (os.path.join(path, file_name), os.path.join(path, extracted, file_name)):
        if os.path.isfile(candidate):
            return candidate
    raise DatasetError("%s: %s not found under %s" % (kind, file_name, path))


def read_cifar_records(file_path: str, kind: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Decode one CIFAR binary file into uint8 pixels (count, 3, 32, 32) and int64 labels.
    CIFAR-100 records carry a coarse then a fine label; the fine label is returned.
    """
    if kind not in CIFAR_LAYOUTS:
        raise DatasetError('Unknown CIFAR kind "%s". Valid kinds: %s' % (kind, ", ".join(CIFAR_LAYOUTS)))
    label_bytes, class_count = CIFAR_LAYOUTS[kind][0], CIFAR_LAYOUTS[kind][1]
    record = label_bytes + CIFAR_PIXELS
    try:
        raw = np.fromfile(file_path, dtype=np.uint8)
    except OSError as ex:
        raise DatasetError("Unable to read %s: %s" % (file_path, ex))
    if raw.size == 0 or raw.size % record != 0:
        raise DatasetError("%s: %d bytes is not a whole number of %d-byte records (truncated?)" % (file_path, raw.size, record))
    records = raw.reshape(-1, record)
    labels = records[:, label_bytes - 1].astype(np.int64)
    if label_bytes == 2 and int(records[:, 0].max()) >= 20:
        raise DatasetError("%s: coarse label out of range [0, 20)" % file_path)
    if int(labels.max()) >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise DatasetError("%s: record %d has label %d, out of range [0, %d)" % (file_path, bad, labels[bad], class_count))
    pixels = records[:, label_bytes:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return pixels, labels


def _read_split(path: str, kind: str, split: str) -> Tuple[np.ndarray, np.ndarray]:
    files = CIFAR_LAYOUTS[kind][3] if split == "train" else CIFAR_LAYOUTS[kind][4]
    parts = [read_cifar_records(_resolve_cifar_file(path, kind, f), kind) for f in files]
    return np.concatenate([p for p, _ in parts]), np.concatenate([lb for _, lb in parts])


def channel_stats(pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """ Per-channel mean and standard deviation of uint8 images (count, 3, H, W), in [0, 1] units """
    x = pixels.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def load_cifar_binary(path: Optional[str] = None, kind: str = "cifar10", split: str = "train",
                      upscale: Optional[int] = None, limit: Optional[int] = None,
                      stats: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> ImageDataset:
    """
    :param path: Directory with the binary files, or its parent. Defaults to $VVT_DATA_DIR
    :param kind: cifar10 or cifar100
    :param split: train or test
    :param upscale: Bilinear resize to this side (e.g. 64) for larger token grids
    :param limit: Keep only the first `limit` records
    :param stats: Normalization (mean, std); computed from the training split when not given
    """
    path = path or default_data_dir()
    if path is None:
        raise DatasetError("No CIFAR directory given and %s is not set" % DATA_DIR_ENV)
    if kind not in CIFAR_LAYOUTS:
        raise DatasetError('Unknown CIFAR kind "%s". Valid kinds: %s' % (kind, ", ".join(CIFAR_LAYOUTS)))
    if split not in ("train", "test"):
        raise DatasetError('Unknown split "%s". Valid splits: train, test' % split)

    pixels, labels = _read_split(path, kind, split)
    if stats is None:
        stats = channel_stats(pixels if split == "train" else _read_split(path, kind, "train")[0])
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    mean, std = stats
    images = (pixels.astype(np.float32) / 255.0 - mean.astype(np.float32)[:, None, None]) / std.astype(np.float32)[:, None, None]
    images = torch.from_numpy(np.ascontiguousarray(images))
    if upscale is not None and upscale != CIFAR_SIDE:
        if upscale % 32 != 0:
            raise DatasetError("upscale side %d is not divisible by 32" % upscale)
        images = F.interpolate(images, size=(upscale, upscale), mode="bilinear", align_corners=False)
    logger.info("Loaded %s/%s: %d images of side %d", kind, split, images.shape[0], images.shape[-1])
    return ImageDataset(images, torch.from_numpy(labels), CIFAR_LAYOUTS[kind][1], "%s-%s" % (kind, split))


def locality_templates(generator: torch.Generator, class_count: int, size: int = 3, amplitude: float = 1.0) -> torch.Tensor:
    """ Distinct random +-amplitude patterns, one (3, size, size) template per class """
    while True:
        templates = (torch.randint(0, 2, (class_count, 3, size, size), generator=generator) * 2 - 1).to(torch.float32)
        if torch.unique(templates.reshape(class_count, -1), dim=0).shape[0] == class_count:
            return templates * amplitude


def synthetic_locality_dataset(seed: int, count: int, side: int = 32, class_count: int = 10,
                               noise: float = 0.1, amplitude: float = 1.0, template_size: int = 3) -> ImageDataset:
    """
    Low-noise images with one class template stamped at a random location; the label is
    the stamped template's class. Labels are balanced (count // class_count per class, the
    remainder spread over the first classes) and shuffled. Same seed, same bytes.
    The dataset's `templates` attribute holds the generating patterns.
    """
    if side % 32 != 0 or side < 32:
        raise DatasetError("synthetic_locality_dataset: side %d is not a positive multiple of 32" % side)
    if class_count < 2 or count < 1:
        raise DatasetError("synthetic_locality_dataset: need count >= 1 and class_count >= 2")
    if not 1 <= template_size <= side:
        raise DatasetError("synthetic_locality_dataset: template_size %d does not fit side %d" % (template_size, side))
    generator = torch.Generator().manual_seed(seed)
    templates = locality_templates(generator, class_count, template_size, amplitude)
    labels = (torch.arange(count) % class_count)[torch.randperm(count, generator=generator)]
    images = noise * torch.randn((count, 3, side, side), generator=generator)
    rows = torch.randint(0, side - template_size + 1, (count,), generator=generator)
    cols = torch.randint(0, side - template_size + 1, (count,), generator=generator)
    for i in range(count):
        y, x = int(rows[i]), int(cols[i])
        images[i, :, y:y + template_size, x:x + template_size] = templates[labels[i]]
    dataset = ImageDataset(images, labels, class_count, "synthetic-%d" % seed)
    dataset.templates = templates
    return dataset


class TemplateMatcher(nn.Module):
    """
    Non-learned classifier for the synthetic dataset: logit c is minus the smallest sum of
    squared differences between template c and any same-sized window of the image.
    """
    def __init__(self, templates: torch.Tensor):
        super().__init__()
        self.register_buffer("templates", templates.clone())

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        t = self.templates.to(images.dtype)
        ones = torch.ones((1,) + tuple(t.shape[1:]), dtype=images.dtype, device=images.device)
        # |p - t|^2 = |p|^2 - 2 p.t + |t|^2 for every window p
        window_sq = F.conv2d(images * images, ones)
        cross = F.conv2d(images, t)
        t_sq = (t * t).sum(dim=(1, 2, 3)).view(1, -1, 1, 1)
        ssd = window_sq - 2 * cross + t_sq
        return -ssd.flatten(2).min(dim=-1).values


def build_datasets(spec: DatasetSpec, seed: int = 0, data_dir: Optional[str] = None) -> Tuple[ImageDataset, ImageDataset]:
    """ (train, validation) for a DatasetSpec """
    spec.validate()
    if spec.source == "synthetic":
        full = synthetic_locality_dataset(seed, spec.train_count + spec.val_count, spec.image_side, spec.class_count,
                                          template_size=spec.template_size)
        train = full.subset(0, spec.train_count, full.name + "-train")
        val = full.subset(spec.train_count, len(full), full.name + "-val")
        train.templates = val.templates = full.templates
        return train, val
    expected = CIFAR_LAYOUTS[spec.source][1]
    if spec.class_count != expected:
        raise DatasetError("%s has %d classes, config says %d" % (spec.source, expected, spec.class_count))
    path = spec.path or data_dir or default_data_dir()
    if path is None:
        raise DatasetError("No CIFAR directory given and %s is not set" % DATA_DIR_ENV)
    stats = channel_stats(_read_split(path, spec.source, "train")[0])
    train = load_cifar_binary(path, spec.source, "train", upscale=spec.upscale, limit=spec.train_count, stats=stats)
    val = load_cifar_binary(path, spec.source, "test", upscale=spec.upscale, limit=spec.val_count, stats=stats)
    return train, val
