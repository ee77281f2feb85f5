"""CIFAR-10 ingestion, splits, poison masks and the ITF1 tensor format.

Images travel as numpy arrays shaped ``(N, H, W, C)`` (or ``(H, W, C)`` for a
single image).  The value domain is carried by the dtype: ``uint8`` arrays are
in the Byte domain ``[0, 255]``, floating arrays are in the Unit domain
``[0, 1]``.
"""
from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CIFAR_SHAPE = (32, 32, 3)
CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)


class DataError(ValueError):
    """Base class for malformed or inconsistent input data."""


class MalformedFileError(DataError):
    pass


class InvalidLabelError(DataError):
    pass


class CapacityError(DataError):
    """Raised when a split asks for more examples than exist."""


class Domain(enum.Enum):
    UNIT = "unit"
    BYTE = "byte"


def domain_of(images: np.ndarray) -> Domain:
    if images.dtype == np.uint8:
        return Domain.BYTE
    if np.issubdtype(images.dtype, np.floating):
        return Domain.UNIT
    raise TypeError(f"unsupported image dtype {images.dtype}")


def to_unit(images: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Byte -> Unit.  Floating input is returned as ``dtype`` unchanged."""
    if images.dtype == np.uint8:
        return images.astype(dtype) / 255.0
    return np.asarray(images, dtype=dtype)


def to_byte(images: np.ndarray) -> np.ndarray:
    """Unit -> Byte with round-half-up and clamping.  Byte input passes through."""
    if images.dtype == np.uint8:
        return images
    scaled = np.floor(np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5)
    return scaled.astype(np.uint8)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LabeledDataset:
    """Images, integer labels and a per-example poison mask.

    ``indices`` records where each example came from in its ``source``
    collection so that train/test disjointness can be audited.
    """

    images: np.ndarray
    labels: np.ndarray
    poison_mask: np.ndarray
    num_classes: int = 10
    indices: np.ndarray | None = None
    source: str = ""

    def __post_init__(self):
        n = len(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        mask = np.asarray(self.poison_mask, dtype=bool)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(labels) != n or len(mask) != n:
            raise DataError("images, labels and poison_mask must have equal length")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidLabelError(f"labels must lie in [0, {self.num_classes})")
        indices = np.arange(n) if self.indices is None else np.asarray(self.indices, dtype=np.int64)
        if len(indices) != n:
            raise DataError("indices must match the number of images")
        object.__setattr__(self, "images", _readonly(self.images))
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "poison_mask", _readonly(mask))
        object.__setattr__(self, "indices", _readonly(indices))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, idx: Sequence[int] | np.ndarray) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            images=self.images[idx],
            labels=self.labels[idx],
            poison_mask=self.poison_mask[idx],
            indices=self.indices[idx],
        )

    def with_images(self, images: np.ndarray) -> "LabeledDataset":
        return replace(self, images=images)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class SplitSpec:
    train_count: int
    test_count: int = 0
    per_class_balanced: bool = True
    seed: int = 0


def load_cifar_binary(path: str | os.PathLike | Iterable[str | os.PathLike]) -> LabeledDataset:
    """Read one or more CIFAR-10 binary batch files.

    Each record is one label byte followed by 3072 pixel bytes stored as
    channel planes (R, G, B), each row-major 32x32.
    """
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    chunks = []
    for p in paths:
        raw = np.fromfile(p, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD:
            raise MalformedFileError(f"{p}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
        chunks.append(raw.reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise InvalidLabelError(f"record {bad[0]} has label byte {labels[bad[0]]}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    source = ",".join(Path(p).name for p in paths)
    return LabeledDataset(images, labels, np.zeros(len(labels), bool), 10, source=source)


def load_cifar_dir(directory: str | os.PathLike, train: bool = True) -> LabeledDataset:
    d = Path(directory)
    if train:
        return load_cifar_binary([d / f"data_batch_{i}.bin" for i in range(1, 6)])
    return load_cifar_binary(d / "test_batch.bin")


def write_cifar_binary(path: str | os.PathLike, ds: LabeledDataset) -> None:
    if ds.shape != CIFAR_SHAPE:
        raise DataError(f"CIFAR layout needs 32x32x3 images, got {ds.shape}")
    planar = to_byte(ds.images).transpose(0, 3, 1, 2).reshape(len(ds), -1)
    np.concatenate([ds.labels.astype(np.uint8)[:, None], planar], axis=1).tofile(path)


def _balanced_pick(order: np.ndarray, labels: np.ndarray, count: int, num_classes: int) -> np.ndarray:
    """Take ``count`` entries of ``order`` so class counts differ by at most one."""
    quota = np.full(num_classes, count // num_classes)
    # remainder goes to the classes with the most available examples, ties by class id
    avail = np.bincount(labels[order], minlength=num_classes)
    extra = np.lexsort((np.arange(num_classes), -avail))[: count % num_classes]
    quota[extra] += 1
    if np.any(quota > avail):
        raise CapacityError(f"cannot draw {count} class-balanced examples from {len(order)}")
    picked = []
    for c in range(num_classes):
        members = order[labels[order] == c]
        picked.append(members[: quota[c]])
    return np.concatenate(picked) if picked else np.empty(0, np.int64)


def subset(ds: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic disjoint train/test draw from ``ds``."""
    if spec.train_count < 0 or spec.test_count < 0:
        raise ValueError("split counts must be non-negative")
    n = len(ds)
    if spec.train_count + spec.test_count > n:
        raise CapacityError(f"split needs {spec.train_count + spec.test_count} examples, have {n}")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n)
    if spec.per_class_balanced:
        train_idx = _balanced_pick(order, ds.labels, spec.train_count, ds.num_classes)
        rest = order[~np.isin(order, train_idx)]
        test_idx = _balanced_pick(rest, ds.labels, spec.test_count, ds.num_classes)
        train_idx = rng.permutation(train_idx)
        test_idx = rng.permutation(test_idx)
    else:
        train_idx = order[: spec.train_count]
        test_idx = order[spec.train_count : spec.train_count + spec.test_count]
    return ds.take(train_idx), ds.take(test_idx)


def mark_poisoned(
    ds: LabeledDataset,
    fraction: float | None = None,
    class_id: int | None = None,
    seed: int = 0,
) -> LabeledDataset:
    """Flag a seeded random fraction of examples, or every example of one class."""
    if (fraction is None) == (class_id is None):
        raise ValueError("give exactly one of fraction or class_id")
    if class_id is not None:
        if not 0 <= class_id < ds.num_classes:
            raise ValueError(f"class_id {class_id} outside [0, {ds.num_classes})")
        mask = ds.labels == class_id
    else:
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"fraction {fraction} outside [0, 1]")
        k = int(np.floor(fraction * len(ds) + 0.5))
        chosen = np.random.default_rng(seed).choice(len(ds), size=k, replace=False)
        mask = np.zeros(len(ds), bool)
        mask[chosen] = True
    return replace(ds, poison_mask=mask)


# --- ITF1 ------------------------------------------------------------------
# magic "ITF1", u32 height, u32 width, u32 channels, u8 domain tag, payload.
# The payload may hold several images back to back; the count follows from
# the payload length.

_ITF1_MAGIC = b"ITF1"
_ITF1_HEADER = struct.Struct("<4sIIIB")
_DOMAIN_TAG = {Domain.BYTE: 0, Domain.UNIT: 1}


def write_itf1(path: str | os.PathLike, images: np.ndarray) -> None:
    a = np.asarray(images)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise DataError(f"ITF1 stores (N, H, W, C) or (H, W, C) tensors, got {a.shape}")
    domain = domain_of(a)
    payload = a.astype("u1") if domain is Domain.BYTE else a.astype("<f4")
    _, h, w, c = a.shape
    with open(path, "wb") as f:
        f.write(_ITF1_HEADER.pack(_ITF1_MAGIC, h, w, c, _DOMAIN_TAG[domain]))
        f.write(np.ascontiguousarray(payload).tobytes())


def read_itf1(path: str | os.PathLike) -> np.ndarray:
    """Return the stored tensor as ``(N, H, W, C)``; uint8 or float32."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _ITF1_HEADER.size:
        raise MalformedFileError(f"{path}: truncated ITF1 header")
    magic, h, w, c, tag = _ITF1_HEADER.unpack_from(blob)
    if magic != _ITF1_MAGIC:
        raise MalformedFileError(f"{path}: bad magic {magic!r}")
    if tag not in (0, 1):
        raise MalformedFileError(f"{path}: unknown domain tag {tag}")
    dtype = np.dtype("u1") if tag == 0 else np.dtype("<f4")
    body = blob[_ITF1_HEADER.size:]
    per_image = h * w * c * dtype.itemsize
    if per_image == 0 or len(body) % per_image:
        raise MalformedFileError(f"{path}: payload of {len(body)} bytes does not fit {h}x{w}x{c}")
    out = np.frombuffer(body, dtype=dtype).reshape(-1, h, w, c)
    return out.astype(np.float32) if tag == 1 else out.copy()
