import os

import numpy as np
import pytest
import torch

import vicinity.vvt.data as lib_data
from vicinity.vvt.config import DatasetSpec
from vicinity.vvt.error import DatasetError
from vicinity.vvt.train import evaluate_top1


def write_records(path, labels, label_bytes=1, seed=0):
    rng = np.random.default_rng(seed)
    records = np.zeros((len(labels), label_bytes + lib_data.CIFAR_PIXELS), dtype=np.uint8)
    records[:, label_bytes - 1] = labels
    if label_bytes == 2:
        records[:, 0] = np.asarray(labels) // 5  # coarse label
    records[:, label_bytes:] = rng.integers(0, 256, size=(len(labels), lib_data.CIFAR_PIXELS), dtype=np.uint8)
    records.tofile(str(path))


@pytest.fixture
def cifar10_dir(tmp_path):
    root = tmp_path / "cifar-10-batches-bin"
    root.mkdir()
    for i in range(1, 6):
        write_records(root / ("data_batch_%d.bin" % i), [(i + j) % 10 for j in range(4)], seed=i)
    write_records(root / "test_batch.bin", list(range(10)), seed=99)
    return str(tmp_path)


@pytest.fixture
def cifar100_dir(tmp_path):
    write_records(tmp_path / "train.bin", [0, 42, 99, 7], label_bytes=2)
    write_records(tmp_path / "test.bin", [1, 2], label_bytes=2, seed=1)
    return str(tmp_path)


def test_cifar10(cifar10_dir):
    train = lib_data.load_cifar_binary(cifar10_dir, "cifar10", "train")
    assert len(train) == 20
    assert train.images.shape == (20, 3, 32, 32)
    assert train.class_count == 10
    assert train.labels[:4].tolist() == [1, 2, 3, 4]
    # normalized with the training split's own statistics
    assert torch.allclose(train.images.mean(dim=(0, 2, 3)), torch.zeros(3), atol=1e-4)
    assert torch.allclose(train.images.std(dim=(0, 2, 3), unbiased=False), torch.ones(3), atol=1e-3)

    test = lib_data.load_cifar_binary(cifar10_dir, "cifar10", "test")
    assert test.labels.tolist() == list(range(10))


def test_cifar100_fine_labels(cifar100_dir):
    train = lib_data.load_cifar_binary(cifar100_dir, "cifar100", "train")
    assert train.labels.tolist() == [0, 42, 99, 7]
    assert train.class_count == 100


def test_upscale_and_limit(cifar10_dir):
    data = lib_data.load_cifar_binary(cifar10_dir, "cifar10", "test", upscale=64, limit=3)
    assert data.images.shape == (3, 3, 64, 64)
    with pytest.raises(DatasetError):
        lib_data.load_cifar_binary(cifar10_dir, "cifar10", "test", upscale=48)


def test_checksum_is_stable(cifar10_dir):
    first = lib_data.load_cifar_binary(cifar10_dir, "cifar10", "train")
    second = lib_data.load_cifar_binary(cifar10_dir, "cifar10", "train")
    assert first.checksum() == second.checksum()


def test_truncated_file(tmp_path):
    path = tmp_path / "test_batch.bin"
    write_records(path, [1, 2])
    with open(path, "ab") as f:
        f.write(b"\x00" * 100)
    with pytest.raises(DatasetError):
        lib_data.read_cifar_records(str(path), "cifar10")


def test_label_out_of_range(tmp_path):
    path = tmp_path / "test_batch.bin"
    write_records(path, [1, 10])
    with pytest.raises(DatasetError):
        lib_data.read_cifar_records(str(path), "cifar10")

    path = tmp_path / "test.bin"
    write_records(path, [100], label_bytes=2)
    with pytest.raises(DatasetError):
        lib_data.read_cifar_records(str(path), "cifar100")


def test_missing_files(tmp_path):
    with pytest.raises(DatasetError):
        lib_data.load_cifar_binary(str(tmp_path), "cifar10", "train")
    with pytest.raises(DatasetError):
        lib_data.load_cifar_binary(str(tmp_path), "cifar10", "validation")
    with pytest.raises(DatasetError):
        lib_data.read_cifar_records(str(tmp_path / "x.bin"), "svhn")


@pytest.mark.skipif(not os.environ.get(lib_data.DATA_DIR_ENV), reason="%s is not set" % lib_data.DATA_DIR_ENV)
def test_real_cifar100():
    data = lib_data.load_cifar_binary(kind="cifar100", split="test")
    assert len(data) == 10000
    assert sorted(set(data.labels.tolist())) == list(range(100))


def test_synthetic_is_deterministic():
    first = lib_data.synthetic_locality_dataset(seed=5, count=64)
    second = lib_data.synthetic_locality_dataset(seed=5, count=64)
    third = lib_data.synthetic_locality_dataset(seed=6, count=64)
    assert first.checksum() == second.checksum()
    assert first.checksum() != third.checksum()


def test_synthetic_labels_are_balanced():
    data = lib_data.synthetic_locality_dataset(seed=0, count=1000, class_count=10)
    assert data.label_histogram() == [100] * 10
    data = lib_data.synthetic_locality_dataset(seed=0, count=103, class_count=10)
    histogram = data.label_histogram()
    assert max(histogram) - min(histogram) <= 1


def test_synthetic_templates_are_recoverable():
    data = lib_data.synthetic_locality_dataset(seed=1, count=64, class_count=4)
    assert torch.unique(data.templates.reshape(4, -1), dim=0).shape[0] == 4
    assert evaluate_top1(lib_data.TemplateMatcher(data.templates), data) == 1.0


def test_synthetic_arguments():
    with pytest.raises(DatasetError):
        lib_data.synthetic_locality_dataset(seed=0, count=4, side=40)
    with pytest.raises(DatasetError):
        lib_data.synthetic_locality_dataset(seed=0, count=4, class_count=1)
    with pytest.raises(DatasetError):
        lib_data.synthetic_locality_dataset(seed=0, count=4, template_size=33)


def test_build_datasets():
    train, val = lib_data.build_datasets(DatasetSpec(train_count=48, val_count=16, class_count=4), seed=0)
    assert (len(train), len(val)) == (48, 16)
    assert torch.equal(train.templates, val.templates)
    assert evaluate_top1(lib_data.TemplateMatcher(val.templates), val) == 1.0


def test_build_datasets_template_size():
    spec = DatasetSpec(train_count=32, val_count=16, class_count=4, template_size=8)
    train, val = lib_data.build_datasets(spec, seed=0)
    assert tuple(train.templates.shape) == (4, 3, 8, 8)
    assert evaluate_top1(lib_data.TemplateMatcher(val.templates), val) == 1.0


def test_build_datasets_from_cifar(cifar10_dir):
    spec = DatasetSpec(source="cifar10", path=cifar10_dir, train_count=8, val_count=4)
    train, val = lib_data.build_datasets(spec)
    assert (len(train), len(val)) == (8, 4)
    with pytest.raises(DatasetError):
        lib_data.build_datasets(DatasetSpec(source="cifar10", path=cifar10_dir, class_count=100))
