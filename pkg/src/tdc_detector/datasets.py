"""
Image datasets: IDX (MNIST / FashionMNIST) and CIFAR binary readers, the
built-in synthetic sets used when no downloads are available, and SCIN query
files.
"""
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from .core import DataError, SurrogateLoadError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SCIN_MAGIC = b"SCIN"
SCIN_VERSION = 1
IMAGE_SIDE = 28

# Surrogate families, also used as seeds for the synthetic generators
FAMILIES = {"mnist": 0, "fashion": 1, "cifar10": 2, "cifar100": 3}


@dataclass
class Dataset:
    """
    Grayscale image dataset.

    x : images, shape (N, 1, 28, 28), values in [0, 1]
    y : integer labels, shape (N,)
    """

    x: np.ndarray
    y: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} images but {len(self.y)} labels in {self.name!r}")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.name)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))

    def stratified_split(
        self, test_fraction: float, seed: int
    ) -> Tuple["Dataset", "Dataset"]:
        train_idx, test_idx = stratified_split(self.y, test_fraction, seed)
        return self.subset(train_idx), self.subset(test_idx)


def stratified_split(
    labels: np.ndarray, test_fraction: float, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Splits indices per class so that round(test_fraction * count) samples of
    every class go to the test side. Both index arrays are sorted.
    """
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _open(path: Union[str, Path]):
    path = Path(path)
    if not path.exists():
        raise DataError(f"File not found: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx_images(path: Union[str, Path]) -> np.ndarray:
    """
    Reads an IDX image file (optionally gzipped), returns floats in [0, 1] of
    shape (N, rows, cols).
    """
    with _open(path) as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != IDX_IMAGES_MAGIC:
            raise DataError(f"{path}: bad IDX image magic {magic:#010x}")
        data = np.frombuffer(f.read(n * rows * cols), dtype=np.uint8)
    if data.size != n * rows * cols:
        raise DataError(f"{path}: truncated, expected {n} images of {rows}x{cols}")
    return data.reshape(n, rows, cols).astype(float) / 255.0


def read_idx_labels(path: Union[str, Path]) -> np.ndarray:
    with _open(path) as f:
        magic, n = struct.unpack(">II", f.read(8))
        if magic != IDX_LABELS_MAGIC:
            raise DataError(f"{path}: bad IDX label magic {magic:#010x}")
        data = np.frombuffer(f.read(n), dtype=np.uint8)
    if data.size != n:
        raise DataError(f"{path}: truncated, expected {n} labels")
    return data.astype(int)


def load_idx(images_path, labels_path, name: str = "") -> Dataset:
    x = read_idx_images(images_path)
    y = read_idx_labels(labels_path)
    logger.info("Loaded %d images from %s", len(x), images_path)
    return Dataset(x[:, None, :, :], y, name)


def read_cifar_binary(path: Union[str, Path], cifar100: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Reads a CIFAR-10 (1 label byte) or CIFAR-100 (coarse + fine label bytes)
    binary batch. Returns images (N, 3, 32, 32) in [0, 1] and labels (fine
    labels for CIFAR-100).
    """
    n_label = 2 if cifar100 else 1
    record = n_label + 3 * 32 * 32
    with _open(path) as f:
        raw = np.frombuffer(f.read(), dtype=np.uint8)
    if raw.size == 0 or raw.size % record:
        raise DataError(f"{path}: size {raw.size} is not a multiple of the record size {record}")
    raw = raw.reshape(-1, record)
    labels = raw[:, n_label - 1].astype(int)
    images = raw[:, n_label:].reshape(-1, 3, 32, 32).astype(float) / 255.0
    return images, labels


def to_gray28(images: np.ndarray) -> np.ndarray:
    """
    Converts (N, C, H, W) or (N, H, W) images to (N, 1, 28, 28) grayscale by
    averaging the channels and resizing bilinearly, values clipped to [0, 1].
    """
    images = np.asarray(images, dtype=float)
    if images.ndim == 4:
        images = images.mean(axis=1)
    if images.ndim != 3:
        raise DataError(f"Expected (N, C, H, W) or (N, H, W) images, got {images.shape}")
    h, w = images.shape[1:]
    out = zoom(images, (1, IMAGE_SIDE / h, IMAGE_SIDE / w), order=1)
    return np.clip(out, 0.0, 1.0)[:, None, :, :]


def synthetic_images(
    n_per_class: int,
    seed: int = 0,
    family: str = "mnist",
    n_classes: int = 10,
    noise: float = 0.15,
) -> Dataset:
    """
    Builds a 10-class 28x28 grayscale dataset from smoothed random class
    prototypes plus per-sample noise and a random shift of up to one pixel.
    Each family draws a different set of prototypes.
    """
    proto_rng = np.random.default_rng([FAMILIES[family], 7919])
    blobs = (proto_rng.random((n_classes, IMAGE_SIDE, IMAGE_SIDE)) < 0.2).astype(float)
    protos = gaussian_filter(blobs, sigma=(0, 1.5, 1.5))
    protos /= protos.max(axis=(1, 2), keepdims=True)

    rng = np.random.default_rng([FAMILIES[family], seed])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    labels = labels[rng.permutation(len(labels))]
    x = protos[labels] + noise * rng.standard_normal((len(labels), IMAGE_SIDE, IMAGE_SIDE))
    shifts = rng.integers(-1, 2, size=(len(labels), 2))
    for i, (dr, dc) in enumerate(shifts):
        x[i] = np.roll(x[i], (dr, dc), axis=(0, 1))
    return Dataset(np.clip(x, 0.0, 1.0)[:, None], labels, f"synthetic-{family}")


@dataclass
class DataConfig:
    """
    Locations of the external datasets. With synthetic set, the built-in
    generator replaces every file.
    """

    synthetic: bool = True
    mnist_images: Optional[str] = None
    mnist_labels: Optional[str] = None
    fashion_images: Optional[str] = None
    fashion_labels: Optional[str] = None
    cifar10: Optional[str] = None
    cifar100: Optional[str] = None
    synthetic_per_class: int = 100


def load_victim_dataset(cfg: DataConfig, seed: int = 0) -> Dataset:
    """
    Returns the 10-class 28x28 grayscale set victims are trained on.
    """
    if cfg.synthetic:
        return synthetic_images(cfg.synthetic_per_class, seed=seed, family="mnist")
    if cfg.mnist_images is None or cfg.mnist_labels is None:
        raise DataError("No MNIST files configured and synthetic data disabled")
    return load_idx(cfg.mnist_images, cfg.mnist_labels, "mnist")


def load_surrogate(source: str, cfg: DataConfig, n: int, seed: int = 0) -> np.ndarray:
    """
    Returns n surrogate query images of shape (N, 1, 28, 28) for one of the
    sources fashion, cifar10 or cifar100.
    """
    if source not in ("fashion", "cifar10", "cifar100"):
        raise SurrogateLoadError(f"Unknown surrogate source {source!r}")
    if cfg.synthetic:
        per_class = int(np.ceil(n / 10))
        return synthetic_images(per_class, seed=seed, family=source).x[:n]

    path = cfg.fashion_images if source == "fashion" else getattr(cfg, source)
    if path is None:
        raise SurrogateLoadError(f"No file configured for surrogate {source!r}")
    try:
        if source == "fashion":
            x = read_idx_images(path)[:, None]
        else:
            x = to_gray28(read_cifar_binary(path, cifar100=source == "cifar100")[0])
    except DataError as err:
        raise SurrogateLoadError(f"Cannot load surrogate {source!r}: {err}") from err

    if len(x) < n:
        raise SurrogateLoadError(f"Surrogate {source!r} holds {len(x)} images, {n} requested")
    idx = np.random.default_rng(seed).choice(len(x), size=n, replace=False)
    return x[np.sort(idx)]


def write_scin(path: Union[str, Path], images: np.ndarray) -> None:
    """
    Writes query inputs as an SCIN file: magic, u32 version, u32 count, then
    784 little-endian f32 per record.
    """
    flat = np.asarray(images, dtype="<f4").reshape(len(images), -1)
    if flat.shape[1] != IMAGE_SIDE * IMAGE_SIDE:
        raise DataError(f"SCIN records hold 784 values, got {flat.shape[1]}")
    with open(path, "wb") as f:
        f.write(SCIN_MAGIC)
        f.write(struct.pack("<II", SCIN_VERSION, len(flat)))
        f.write(flat.tobytes())


def read_scin(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != SCIN_MAGIC:
        raise DataError(f"{path} is not an SCIN file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != SCIN_VERSION:
        raise DataError(f"Unsupported SCIN version {version}")
    flat = np.frombuffer(data, dtype="<f4", count=count * 784, offset=12)
    return flat.reshape(count, 1, IMAGE_SIDE, IMAGE_SIDE).astype(float)
