import json
import math
import os
from dataclasses import replace

import pytest
import torch
import torch.nn as nn

import vicinity.vvt.train as lib_train
from vicinity.vvt.attention import AttentionMode
from vicinity.vvt.checkpoint import load_checkpoint
from vicinity.vvt.config import TrainConfig, DatasetSpec
from vicinity.vvt.data import build_datasets, synthetic_locality_dataset, TemplateMatcher
from vicinity.vvt.error import DivergenceError

SMOKE_CONFIG = os.path.join(os.path.dirname(os.path.dirname(__file__)), "configs", "smoke.json")


@pytest.fixture
def config():
    return TrainConfig(
        lr=1e-3, warmup_epochs=0, total_epochs=2, batch_size=32, seed=0,
        channel_divisor=4, depths=(1, 1, 1, 1),
        dataset=DatasetSpec(class_count=4, train_count=128, val_count=32),
    )


@pytest.fixture
def datasets(config):
    return build_datasets(config.dataset, seed=config.seed)


def test_warmup_cosine():
    factor = lib_train.warmup_cosine(4, 20)
    assert factor(0) == pytest.approx(0.25)
    assert factor(3) == pytest.approx(1.0)
    assert factor(4) == pytest.approx(1.0)
    assert factor(20) == pytest.approx(0.0, abs=1e-12)
    decay = [factor(s) for s in range(4, 21)]
    assert decay == sorted(decay, reverse=True)
    assert lib_train.warmup_cosine(0, 10)(0) == pytest.approx(1.0)


def test_augment_keeps_shape():
    images = torch.randn(8, 3, 32, 32)
    g1 = torch.Generator().manual_seed(0)
    g2 = torch.Generator().manual_seed(0)
    first = lib_train.augment(images, g1, crop=True, flip=True)
    second = lib_train.augment(images, g2, crop=True, flip=True)
    assert first.shape == images.shape
    assert torch.equal(first, second)
    assert torch.equal(lib_train.augment(images, g1, crop=False, flip=False), images)


def test_random_model_is_at_chance():
    data = synthetic_locality_dataset(seed=0, count=1000, class_count=10)
    model = lib_train.build_model(TrainConfig(channel_divisor=4, depths=(1, 1, 1, 1)), class_count=10)
    assert abs(lib_train.evaluate_top1(model, data) - 0.1) <= 0.03


def test_template_matcher_memorizes():
    data = synthetic_locality_dataset(seed=2, count=64, class_count=8)
    assert lib_train.evaluate_top1(TemplateMatcher(data.templates), data) == 1.0


def test_train_writes_outputs(config, datasets, tmp_path):
    train_set, val_set = datasets
    model = lib_train.build_model(config, train_set.class_count)
    result = lib_train.train(model, train_set, config, val_set, out_dir=str(tmp_path))

    assert [r.epoch for r in result.log] == [1, 2]
    assert all(math.isfinite(r.train_loss) for r in result.log)
    assert all(0.0 <= r.val_top1 <= 1.0 for r in result.log)
    assert lib_train.read_log(result.log_path) == result.log
    with open(result.log_path, "r", encoding="utf-8") as f:
        assert set(json.loads(f.readline())) == {"epoch", "lr", "train_loss", "val_top1"}

    saved = TrainConfig.from_file(os.path.join(str(tmp_path), lib_train.CONFIG_FILE))
    assert saved == config

    # evaluating the reloaded checkpoint gives the same accuracy
    _, restored = load_checkpoint(result.checkpoint_dir)
    assert lib_train.evaluate_top1(restored, val_set) == lib_train.evaluate_top1(model, val_set)


def test_train_is_deterministic(config, datasets):
    train_set, val_set = datasets
    runs = []
    for _ in range(2):
        model = lib_train.build_model(config, train_set.class_count)
        runs.append(lib_train.train(model, train_set, config, val_set, out_dir="").log)
    assert runs[0] == runs[1]


def test_zero_lr_freezes_parameters(config, datasets):
    train_set, _ = datasets
    frozen = replace(config, lr=0.0)
    model = lib_train.build_model(frozen, train_set.class_count)
    before = {n: t.clone() for n, t in model.state_dict().items()}
    result = lib_train.train(model, train_set, frozen, out_dir="")
    for name, tensor in model.state_dict().items():
        assert torch.equal(tensor, before[name]), name
    assert result.log[1].train_loss == pytest.approx(result.log[0].train_loss, rel=1e-5)
    assert result.final_top1 is None


class Exploding(nn.Module):
    def __init__(self, classes: int):
        super().__init__()
        self.fc = nn.Linear(3 * 32 * 32, classes)

    def forward(self, images):
        return self.fc(images.flatten(1)) * float("inf")


def test_divergence_is_reported(config, datasets):
    train_set, _ = datasets
    with pytest.raises(DivergenceError):
        lib_train.train(Exploding(train_set.class_count), train_set, config, out_dir="")


def test_compare_modes(config, datasets, tmp_path):
    train_set, val_set = datasets
    quick = replace(config, total_epochs=1)
    modes = list(AttentionMode)
    rows = lib_train.compare_modes(quick, modes, train_set, val_set, out_dir=str(tmp_path))
    assert [r.mode for r in rows] == modes
    for mode in modes:
        assert os.path.isfile(os.path.join(str(tmp_path), mode.value, lib_train.LOG_FILE))
    table = lib_train.format_comparison(rows)
    assert all(m.value in table for m in modes)
    assert len(table.splitlines()) == len(modes) + 1


@pytest.mark.slow
def test_smoke_run(tmp_path):
    config = TrainConfig.from_file(SMOKE_CONFIG)
    model, result = lib_train.fit(replace(config, out_dir=str(tmp_path)))
    assert result.final_loss < 0.5 * result.initial_loss
    assert result.final_top1 > 2.0 / config.dataset.class_count
    _, val_set = build_datasets(config.dataset, seed=config.seed)
    _, restored = load_checkpoint(result.checkpoint_dir)
    assert lib_train.evaluate_top1(restored, val_set) == lib_train.evaluate_top1(model, val_set)
