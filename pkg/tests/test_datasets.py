import gzip
import struct

import numpy as np
import pytest

from tdc_detector.core import DataError, SurrogateLoadError
from tdc_detector.datasets import (
    DataConfig,
    load_idx,
    load_surrogate,
    load_victim_dataset,
    read_cifar_binary,
    read_scin,
    stratified_split,
    synthetic_images,
    to_gray28,
    write_scin,
)


def _write_idx(tmp_path, images, labels, compress=False):
    img = struct.pack(">IIII", 0x803, len(images), 28, 28) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, len(labels)) + labels.astype(np.uint8).tobytes()
    suffix = ".gz" if compress else ""
    opener = gzip.open if compress else open
    img_path = tmp_path / f"images.idx{suffix}"
    lab_path = tmp_path / f"labels.idx{suffix}"
    with opener(img_path, "wb") as f:
        f.write(img)
    with opener(lab_path, "wb") as f:
        f.write(lab)
    return img_path, lab_path


@pytest.mark.parametrize("compress", [False, True])
def test_idx_reader(tmp_path, compress):
    images = np.arange(3 * 784).reshape(3, 28, 28) % 256
    labels = np.array([7, 0, 3])
    data = load_idx(*_write_idx(tmp_path, images, labels, compress))
    assert data.x.shape == (3, 1, 28, 28)
    np.testing.assert_allclose(data.x[1, 0], images[1] / 255.0)
    np.testing.assert_array_equal(data.y, labels)


def test_idx_reader_errors(tmp_path):
    img_path, _ = _write_idx(tmp_path, np.zeros((2, 28, 28)), np.zeros(2))
    with pytest.raises(DataError, match="magic"):
        load_idx(img_path, img_path)
    with pytest.raises(DataError, match="not found"):
        load_idx(tmp_path / "missing", tmp_path / "missing")
    truncated = tmp_path / "short.idx"
    truncated.write_bytes(img_path.read_bytes()[:100])
    with pytest.raises(DataError, match="truncated"):
        load_idx(truncated, truncated)


@pytest.mark.parametrize("cifar100", [False, True])
def test_cifar_reader(tmp_path, cifar100):
    n_label = 2 if cifar100 else 1
    rng = np.random.default_rng(0)
    records = rng.integers(0, 256, size=(4, n_label + 3072), dtype=np.uint8)
    path = tmp_path / "batch.bin"
    path.write_bytes(records.tobytes())
    images, labels = read_cifar_binary(path, cifar100)
    assert images.shape == (4, 3, 32, 32)
    np.testing.assert_array_equal(labels, records[:, n_label - 1])

    path.write_bytes(records.tobytes()[:-1])
    with pytest.raises(DataError):
        read_cifar_binary(path, cifar100)


def test_to_gray28():
    out = to_gray28(np.ones((2, 3, 32, 32)) * 0.5)
    assert out.shape == (2, 1, 28, 28)
    np.testing.assert_allclose(out, 0.5)


def test_synthetic_images(digits):
    assert digits.x.shape == (200, 1, 28, 28)
    assert np.bincount(digits.y).tolist() == [20] * 10
    assert digits.x.min() >= 0 and digits.x.max() <= 1
    again = synthetic_images(20, seed=0)
    np.testing.assert_array_equal(digits.x, again.x)
    other = synthetic_images(20, seed=0, family="fashion")
    assert not np.allclose(digits.x, other.x)


def test_stratified_split():
    labels = np.repeat(np.arange(4), 100)
    train, test = stratified_split(labels, 0.1, seed=3)
    assert len(train) == 360 and len(test) == 40
    assert np.bincount(labels[test]).tolist() == [10] * 4
    assert not set(train) & set(test)
    again = stratified_split(labels, 0.1, seed=3)
    np.testing.assert_array_equal(test, again[1])


def test_surrogates():
    cfg = DataConfig()
    x = load_surrogate("cifar10", cfg, 25, seed=1)
    assert x.shape == (25, 1, 28, 28)
    with pytest.raises(SurrogateLoadError):
        load_surrogate("imagenet", cfg, 5)
    with pytest.raises(SurrogateLoadError):
        load_surrogate("fashion", DataConfig(synthetic=False), 5)


def test_victim_dataset_without_files():
    assert len(load_victim_dataset(DataConfig(synthetic_per_class=3))) == 30
    with pytest.raises(DataError):
        load_victim_dataset(DataConfig(synthetic=False))


def test_scin_file(tmp_path, digits):
    path = tmp_path / "inputs.scin"
    write_scin(path, digits.x[:5])
    assert path.read_bytes()[:4] == b"SCIN"
    np.testing.assert_allclose(read_scin(path), digits.x[:5], atol=1e-7)
    with pytest.raises(DataError):
        write_scin(path, np.zeros((2, 3, 32, 32)))
