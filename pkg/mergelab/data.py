"""Datasets, minibatch sampling and stochastic augmentation.

All randomness flows through :class:`RngStream` objects whose state is four
unsigned 64-bit integers, so a run can be checkpointed and replayed exactly.
"""
from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

IMAGE_MAGIC = b"MLAB"
IMAGE_VERSION = 1
IMAGE_HEADER = struct.Struct("<4sIIIII")

CLUSTER_RADIUS = 3.0
CLUSTER_SIGMA = 0.5

_U64 = (1 << 64) - 1


class ImageFormatError(ValueError):
    """Malformed image binary; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    task_id: int = 0
    class_count: int = 0

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.flags.writeable:
            inputs = inputs.copy()
        if labels.flags.writeable:
            labels = labels.copy()
        if inputs.shape[0] != labels.shape[0]:
            raise ValueError(f"{inputs.shape[0]} samples but {labels.shape[0]} labels")
        count = self.class_count or (int(labels.max()) + 1 if labels.size else 0)
        if labels.size and (labels.min() < 0 or labels.max() >= count):
            raise ValueError(f"Labels outside [0, {count})")
        if self.split not in ("train", "test"):
            raise ValueError(f"Unknown split {self.split!r}")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_count", count)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.split, self.task_id, self.class_count)

    def head(self, n: int) -> "Dataset":
        """First ``n`` samples (deterministic evaluation subsets)."""
        return self.subset(np.arange(min(n, len(self))))


@dataclass(frozen=True)
class TaskSplits:
    train: Dataset
    test: Dataset


def combine(*datasets: Dataset, task_id: int = -1) -> Dataset:
    """Concatenate datasets of one split into a multi-task dataset."""
    if not datasets:
        raise ValueError("Nothing to combine")
    shapes = {d.sample_shape for d in datasets}
    if len(shapes) != 1:
        raise ValueError(f"Cannot combine samples of shapes {sorted(shapes)}")
    return Dataset(
        np.concatenate([d.inputs for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        datasets[0].split,
        task_id,
        max(d.class_count for d in datasets),
    )


# ----------------------------------------------------------------------
# Named random streams
STREAM_TAGS = {"init": 0, "data": 1, "augment": 2, "eval": 3}


@dataclass
class RngStream:
    """Counter-based random stream.

    ``state()`` is ``(seed, events, cursor, epoch)``: the Philox key, the
    number of augmentation draws taken, the position inside the current epoch
    permutation and the epoch counter.
    """

    name: str
    seed: int
    events: int = 0
    cursor: int = 0
    epoch: int = 0
    _perm: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    _perm_key: tuple[int, int] = field(default=(-1, -1), repr=False, compare=False)

    @classmethod
    def from_seed(cls, seed: int, name: str) -> "RngStream":
        tag = STREAM_TAGS.get(name, zlib.crc32(name.encode("utf-8")))
        derived = np.random.SeedSequence(int(seed) & _U64, spawn_key=(tag,)).generate_state(1, np.uint64)[0]
        return cls(name, int(derived))

    @classmethod
    def from_state(cls, name: str, state: tuple[int, int, int, int]) -> "RngStream":
        seed, events, cursor, epoch = (int(s) for s in state)
        return cls(name, seed, events, cursor, epoch)

    def state(self) -> tuple[int, int, int, int]:
        return (self.seed, self.events, self.cursor, self.epoch)

    def copy(self) -> "RngStream":
        return RngStream.from_state(self.name, self.state())

    def generator(self, counter: int, tag: int) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed, counter=[0, 0, counter & _U64, tag])
        return np.random.Generator(bitgen)

    def permutation(self, n: int) -> np.ndarray:
        if self._perm is None or self._perm_key != (self.epoch, n):
            self._perm = self.generator(self.epoch, 0).permutation(n)
            self._perm_key = (self.epoch, n)
        return self._perm

    def next_event(self) -> np.random.Generator:
        gen = self.generator(self.events, 1)
        self.events += 1
        return gen


# ----------------------------------------------------------------------
# Synthetic tasks
def make_synthetic(
    task_id: int,
    n_train: int,
    n_test: int,
    class_count: int,
    input_dim: int,
    seed: int,
) -> TaskSplits:
    """Gaussian-mixture classification task.

    Class centers lie on the sphere of radius 3 and depend on both ``seed``
    and ``task_id``; samples are drawn around them with σ = 0.5.
    """
    if class_count < 2:
        raise ValueError(f"Need at least 2 classes, got {class_count}")
    if n_train <= 0 or n_test < 0 or input_dim <= 0:
        raise ValueError(f"Invalid sizes n_train={n_train} n_test={n_test} dim={input_dim}")
    rng = np.random.default_rng([int(seed), int(task_id)])
    centers = rng.standard_normal((class_count, input_dim))
    centers *= CLUSTER_RADIUS / np.linalg.norm(centers, axis=1, keepdims=True)
    total = n_train + n_test
    labels = rng.integers(0, class_count, size=total)
    inputs = centers[labels] + CLUSTER_SIGMA * rng.standard_normal((total, input_dim))
    inputs = inputs.astype(np.float32)
    train = Dataset(inputs[:n_train], labels[:n_train], "train", task_id, class_count)
    test = Dataset(inputs[n_train:], labels[n_train:], "test", task_id, class_count)
    logger.debug("Synthetic task %d: %d train / %d test, %d classes", task_id, n_train, n_test, class_count)
    return TaskSplits(train, test)


# ----------------------------------------------------------------------
# Image binary format
def read_image_binary(
    path: str | Path,
    *,
    split: str = "train",
    task_id: int = 0,
    class_count: Optional[int] = None,
) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != IMAGE_MAGIC:
        raise ImageFormatError("Bad magic, expected b'MLAB'", 0)
    if len(blob) < IMAGE_HEADER.size:
        raise ImageFormatError("Truncated header", len(blob))
    _, version, count, channels, height, width = IMAGE_HEADER.unpack_from(blob, 0)
    if version != IMAGE_VERSION:
        raise ImageFormatError(f"Unsupported version {version}", 4)
    if channels == 0 or height == 0 or width == 0:
        raise ImageFormatError(f"Empty image geometry {channels}x{height}x{width}", 12)
    pixels = channels * height * width
    record = 1 + pixels
    expected = IMAGE_HEADER.size + count * record
    if len(blob) < expected:
        full_records = (len(blob) - IMAGE_HEADER.size) // record
        raise ImageFormatError(f"Truncated file: {full_records} of {count} records", IMAGE_HEADER.size + full_records * record)
    if len(blob) > expected:
        raise ImageFormatError(f"{len(blob) - expected} trailing bytes after {count} records", expected)
    body = np.frombuffer(blob, dtype=np.uint8, count=count * record, offset=IMAGE_HEADER.size).reshape(count, record)
    labels = body[:, 0].astype(np.int64)
    if class_count is not None and labels.size:
        bad = np.flatnonzero(labels >= class_count)
        if bad.size:
            raise ImageFormatError(
                f"Label {labels[bad[0]]} outside [0, {class_count})", IMAGE_HEADER.size + int(bad[0]) * record
            )
    images = (body[:, 1:].astype(np.float32) / 255.0).reshape(count, channels, height, width)
    logger.info("Loaded %d images (%dx%dx%d) from %s", count, channels, height, width, path)
    return Dataset(images, labels, split, task_id, class_count or 0)


def write_image_binary(dataset: Dataset, path: str | Path) -> Path:
    if not dataset.is_image:
        raise ValueError("Only image datasets can be written in the image format")
    if dataset.class_count > 256:
        raise ValueError("Labels must fit in one byte")
    count, channels, height, width = dataset.inputs.shape
    pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8).reshape(count, -1)
    body = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    path = Path(path)
    path.write_bytes(IMAGE_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, count, channels, height, width) + body.tobytes())
    return path


# ----------------------------------------------------------------------
# Sampling and augmentation
@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def sample_batch(dataset: Dataset, batch_size: int, stream: RngStream) -> Batch:
    """Next batch of the stream's epoch permutation; advances the stream.

    The last batch of an epoch may be short; the next call starts a new
    epoch with a fresh permutation.
    """
    n = len(dataset)
    if batch_size < 1:
        raise ValueError(f"Batch size must be >= 1, got {batch_size}")
    if batch_size > n:
        raise ValueError(f"Batch size {batch_size} exceeds dataset size {n}")
    perm = stream.permutation(n)
    idx = perm[stream.cursor : stream.cursor + batch_size]
    stream.cursor += idx.size
    if stream.cursor >= n:
        stream.cursor = 0
        stream.epoch += 1
    return Batch(dataset.inputs[idx], dataset.labels[idx], idx.copy())


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


@dataclass(frozen=True)
class AugmentSpec:
    enabled: bool = False
    flip_prob: float = 0.5
    crop_pad: int = 4
    jitter: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.crop_pad < 0 or self.jitter < 0:
            raise ValueError("crop_pad and jitter must be non-negative")

    def label(self) -> str:
        return "on" if self.enabled else "off"


def augment(batch: Batch, spec: AugmentSpec, stream: RngStream) -> Batch:
    """Label-preserving per-sample transforms; one stream event per call."""
    if not spec.enabled:
        return batch
    return augment_with(batch, spec, stream.next_event())


def augment_with(batch: Batch, spec: AugmentSpec, gen: np.random.Generator) -> Batch:
    if not spec.enabled:
        return batch
    x = np.array(batch.inputs, copy=True)
    n = x.shape[0]
    if x.ndim == 4:
        side = min(x.shape[2], x.shape[3])
        if spec.crop_pad >= side:
            raise ValueError(f"Crop pad {spec.crop_pad} must be smaller than the image side {side}")
        flips = gen.random(n) < spec.flip_prob
        x[flips] = x[flips][..., ::-1]
        if spec.crop_pad:
            pad = spec.crop_pad
            padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            offsets = gen.integers(0, 2 * pad + 1, size=(n, 2))
            h, w = x.shape[2], x.shape[3]
            for i, (dy, dx) in enumerate(offsets):
                x[i] = padded[i, :, dy : dy + h, dx : dx + w]
    elif x.ndim == 2:
        if spec.jitter > 0:
            x = x + (spec.jitter * gen.standard_normal(x.shape)).astype(x.dtype)
    else:
        raise ValueError(f"Cannot augment inputs of shape {x.shape}")
    return Batch(x, batch.labels, batch.indices)
