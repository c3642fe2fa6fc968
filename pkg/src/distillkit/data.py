"""Dataset ingestion (IDX, CSV), synthetic class blobs and deterministic batching."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from distillkit.errors import DataFormatError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_UBYTE = 0x08

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Dataset:
    """Normalised features with integer labels in ``[0, num_classes)``."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        if len(self.features) == 0:
            raise DataFormatError("a dataset needs at least one example")
        if len(self.features) != len(self.labels):
            raise DataFormatError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise DataFormatError("features contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    def reshaped(self, shape: Sequence[int]) -> "Dataset":
        """Return the same examples with per-example features reshaped to ``shape``."""
        feats = self.features.reshape((len(self), *shape))
        return Dataset(feats, self.labels, self.num_classes, self.split)

    def digest(self) -> str:
        """Content hash of the examples, independent of how they were produced."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(str((self.features.shape, self.num_classes)).encode())
        return h.hexdigest()[:16]


##############################  IDX  ##########################################


def read_idx(path: PathLike) -> np.ndarray:
    """Decode an unsigned-byte IDX file into a ``uint8`` array of its stored shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != _IDX_UBYTE or ndim == 0:
        raise DataFormatError(f"{path}: wrong magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = math.prod(dims)
    payload = raw[header_end:]
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()


def write_idx(path: PathLike, array: np.ndarray) -> Path:
    """Encode a ``uint8`` array as an IDX file (big-endian dimension header)."""
    values = np.asarray(array)
    if values.dtype != np.uint8:
        raise DataFormatError(f"IDX writer supports uint8 only, got {values.dtype}")
    header = struct.pack(">HBB", 0, _IDX_UBYTE, values.ndim)
    header += struct.pack(f">{values.ndim}I", *values.shape)
    path = Path(path)
    path.write_bytes(header + values.tobytes())
    return path


def _magic(path: PathLike) -> int:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if len(head) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    return int.from_bytes(head, "big")


def load_idx(
    images_path: PathLike,
    labels_path: PathLike,
    *,
    mean: float = 0.0,
    std: float = 1.0,
    num_classes: Optional[int] = None,
    split: str = "train",
) -> Dataset:
    """Load an IDX image/label pair, scaling pixels to [0, 1] then standardising."""
    if _magic(images_path) != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: wrong magic, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if _magic(labels_path) != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: wrong magic, expected 0x{IDX_LABELS_MAGIC:08x}")
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if len(images) != len(labels):
        raise DataFormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    if std <= 0:
        raise DataFormatError("normalisation std must be positive")
    features = (images.astype(np.float64) / 255.0 - mean) / std
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    logger.info("loaded %d IDX examples from %s", len(labels), images_path)
    return Dataset(features.reshape(len(labels), -1), labels, k, split)


##############################  CSV  ##########################################


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(
    path: PathLike,
    *,
    mean: float = 0.0,
    std: float = 1.0,
    num_classes: Optional[int] = None,
    split: str = "train",
) -> Dataset:
    """Load ``label,feature...`` rows; a header row is detected by a non-numeric first field."""
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    width = len(rows[0])
    if width < 2 or any(len(r) != width for r in rows):
        raise DataFormatError(f"{path}: rows must all have a label and the same number of features")
    try:
        table = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-numeric value in data rows") from exc
    labels = table[:, 0]
    if np.any(labels != np.round(labels)):
        raise DataFormatError(f"{path}: labels must be integers")
    labels = labels.astype(np.int64)
    if std <= 0:
        raise DataFormatError("normalisation std must be positive")
    features = (table[:, 1:] - mean) / std
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(features, labels, k, split)


##############################  Synthetic  ####################################


def synth_blobs(
    num_classes: int,
    n_per_class: int,
    dim: int,
    spread: float,
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Gaussian class blobs around unit-sphere centres, split 80/20 per class.

    Returns:
        tuple[Dataset, Dataset]: The shuffled train split and the test split.
    """
    if num_classes < 2 or n_per_class < 5 or dim < 1 or spread <= 0:
        raise DataFormatError("synth_blobs needs K >= 2, n_per_class >= 5, dim >= 1, spread > 0")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    n_train = int(round(0.8 * n_per_class))
    train_x, train_y, test_x, test_y = [], [], [], []
    for k in range(num_classes):
        points = centers[k] + spread * rng.normal(size=(n_per_class, dim))
        train_x.append(points[:n_train])
        test_x.append(points[n_train:])
        train_y.append(np.full(n_train, k))
        test_y.append(np.full(n_per_class - n_train, k))
    order = rng.permutation(n_train * num_classes)
    train = Dataset(np.concatenate(train_x)[order], np.concatenate(train_y)[order], num_classes, "train")
    test = Dataset(np.concatenate(test_x), np.concatenate(test_y), num_classes, "test")
    return train, test


def nearest_center_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of classifying ``test`` by the nearest class mean of ``train``."""
    flat_train = train.features.reshape(len(train), -1)
    flat_test = test.features.reshape(len(test), -1)
    means = np.stack([flat_train[train.labels == k].mean(axis=0) for k in range(train.num_classes)])
    dist = ((flat_test[:, None, :] - means[None, :, :]) ** 2).sum(axis=-1)
    return float(np.mean(dist.argmin(axis=1) == test.labels))


##############################  Batching  #####################################


def batches(
    dataset: Dataset,
    batch_size: int,
    *,
    shuffle: bool = True,
    seed: int = 0,
    epoch: int = 0,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(features, labels)`` batches; the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.features[idx], dataset.labels[idx]
