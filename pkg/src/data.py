"""Dataset ingestion: CIFAR-10 binary batches and the procedural shapes dataset"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np

from src.errors import DataFormatError
from src.formats import load_image_container, save_image_container
from src.models import LabeledDataset, SynthDataset

logger = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"

SHAPE_KINDS = ("circle", "square", "triangle", "cross")
SHAPE_OFFSET = 6
SHAPE_RADIUS = (6, 12)
SHAPE_MIN_CONTRAST = 0.3
SHAPE_NOISE_STD = 0.05


def read_cifar10_batch(path: Path, records: int = CIFAR_RECORDS_PER_FILE) -> Tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch: 1 label byte + 3072 channel-planar pixel bytes per record"""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"CIFAR-10 batch {path} does not exist")
    raw = np.fromfile(path, dtype=np.uint8)
    expected = records * CIFAR_RECORD_BYTES
    if raw.size != expected:
        raise DataFormatError(f"{path.name}: expected {expected} bytes ({records} records), found {raw.size}")
    table = raw.reshape(records, CIFAR_RECORD_BYTES)
    labels = table[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DataFormatError(f"{path.name}: label byte {labels.max()} outside [0, 9]")
    images = (table[:, 1:].reshape(records, 3, 32, 32).astype(np.float32) / 255.0)
    return images, labels


def read_cifar10_binary(directory: Path) -> Tuple[LabeledDataset, LabeledDataset]:
    """Read the five training batches and the test batch from ``directory``"""
    directory = Path(directory)
    parts = [read_cifar10_batch(directory / name) for name in CIFAR_TRAIN_FILES]
    train = LabeledDataset(images=np.concatenate([p[0] for p in parts]),
                           labels=np.concatenate([p[1] for p in parts]), num_classes=10, split="train")
    test_images, test_labels = read_cifar10_batch(directory / CIFAR_TEST_FILE)
    test = LabeledDataset(images=test_images, labels=test_labels, num_classes=10, split="test")
    logger.info(f"Loaded CIFAR-10 from {directory}: {len(train)} train / {len(test)} test images")
    return train, test


def write_cifar10_batch(path: Path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write records in the CIFAR-10 binary layout (used for fixtures and exports)"""
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).reshape(len(images), -1)
    table = np.concatenate([labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(table.tobytes())


def _in_triangle(xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    """Isosceles triangle with apex (cx, cy - r) and base y = cy + r"""
    if r <= 0:
        return np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    below_apex = ys >= cy - r
    above_base = ys <= cy + r
    half_width = (ys - (cy - r)) / 2.0
    return below_apex & above_base & (np.abs(xs - cx) <= half_width)


def render_shape_mask(kind: str, cx: int, cy: int, radius: int, size: int = 32) -> np.ndarray:
    """Noiseless boolean footprint of one shape on a size x size grid"""
    ys, xs = np.mgrid[0:size, 0:size]
    dx, dy = xs - cx, ys - cy
    if kind == "circle":
        return dx * dx + dy * dy <= radius * radius
    if kind == "square":
        return (np.abs(dx) <= radius * 0.8) & (np.abs(dy) <= radius * 0.8)
    if kind == "triangle":
        return _in_triangle(xs, ys, cx, cy, radius) & ~_in_triangle(xs, ys, cx, cy, radius - 3)
    if kind == "cross":
        arm = max(1.0, radius / 4.0)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= radius))
    raise ValueError(f"unknown shape kind {kind!r}")


def _draw_colors(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    while True:
        fg, bg = rng.uniform(0.0, 1.0, size=3), rng.uniform(0.0, 1.0, size=3)
        if np.abs(fg - bg).max() >= SHAPE_MIN_CONTRAST:
            return fg, bg


def generate_shapes_dataset(seed: int, n_per_class: int, classes: int = 4, size: int = 32,
                            split: str = "train") -> LabeledDataset:
    """Circles, squares, triangle outlines and crosses with seeded placement and colors"""
    if not 1 <= classes <= len(SHAPE_KINDS):
        raise ValueError(f"classes must be in [1, {len(SHAPE_KINDS)}]")
    rng = np.random.default_rng(seed)
    total = n_per_class * classes
    images = np.empty((total, 3, size, size), dtype=np.float32)
    labels = np.arange(total, dtype=np.int64) % classes
    for i, label in enumerate(labels):
        cx = size // 2 + int(rng.integers(-SHAPE_OFFSET, SHAPE_OFFSET + 1))
        cy = size // 2 + int(rng.integers(-SHAPE_OFFSET, SHAPE_OFFSET + 1))
        radius = int(rng.integers(SHAPE_RADIUS[0], SHAPE_RADIUS[1] + 1))
        fg, bg = _draw_colors(rng)
        mask = render_shape_mask(SHAPE_KINDS[label], cx, cy, radius, size)
        image = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        image = image + rng.normal(0.0, SHAPE_NOISE_STD, size=image.shape)
        images[i] = np.clip(image, 0.0, 1.0)
    return LabeledDataset(images=images, labels=labels, num_classes=classes, split=split)


def load_dataset_pair(data_section, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Train/test datasets described by a ``data`` config section"""
    if data_section.dataset == "cifar10":
        return read_cifar10_binary(data_section.data_dir)
    train = generate_shapes_dataset(seed, data_section.shapes_train_per_class, data_section.shapes_classes,
                                    data_section.image_size, split="train")
    test = generate_shapes_dataset(seed + 1_000_003, data_section.shapes_test_per_class,
                                   data_section.shapes_classes, data_section.image_size, split="test")
    logger.info(f"Generated shapes dataset: {len(train)} train / {len(test)} test images")
    return train, test


def export_labeled(ds: LabeledDataset, path: Path) -> None:
    """Store a labeled dataset in the DFDS container with the u8 label block"""
    save_image_container(path, ds.images, {"kind": "labeled", "split": ds.split,
                                           "num_classes": ds.num_classes}, labels=ds.labels)


def import_labeled(path: Path) -> LabeledDataset:
    images, header, labels = load_image_container(path)
    if labels is None:
        raise DataFormatError(f"{path} carries no label block")
    return LabeledDataset(images=images, labels=labels, num_classes=header["num_classes"],
                          split=header.get("split", "train"))


@dataclass
class Batch:
    images: np.ndarray
    labels: Optional[np.ndarray]
    indices: np.ndarray


def batch_iterator(ds: Union[LabeledDataset, SynthDataset], batch_size: int,
                   shuffle_seed: Optional[int] = None) -> Iterator[Batch]:
    """Storage order without a seed, a seeded permutation otherwise; last batch may be short"""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    labels = getattr(ds, "labels", None)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(images=ds.images[idx], labels=None if labels is None else labels[idx], indices=idx)
