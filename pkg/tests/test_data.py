from __future__ import annotations

import numpy as np
import pytest

from mergelab.data import (
    AugmentSpec,
    Batch,
    Dataset,
    ImageFormatError,
    IMAGE_HEADER,
    RngStream,
    augment,
    combine,
    make_synthetic,
    read_image_binary,
    sample_batch,
    steps_per_epoch,
    write_image_binary,
)


def _images(n=5, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n, 3, 8, 8)).astype(np.float32) / 255.0
    return Dataset(pixels, rng.integers(0, 10, size=n), "train", 0, 10)


def test_synthetic_task_is_deterministic_and_task_dependent():
    a = make_synthetic(0, 64, 32, 4, 6, seed=3)
    b = make_synthetic(0, 64, 32, 4, 6, seed=3)
    c = make_synthetic(1, 64, 32, 4, 6, seed=3)
    np.testing.assert_array_equal(a.train.inputs, b.train.inputs)
    assert not np.array_equal(a.train.inputs, c.train.inputs)
    assert a.train.inputs.dtype == np.float32
    assert len(a.train) == 64 and len(a.test) == 32
    assert a.test.split == "test"


def test_synthetic_rejects_degenerate_sizes():
    with pytest.raises(ValueError):
        make_synthetic(0, 10, 5, 1, 4, seed=0)
    with pytest.raises(ValueError):
        make_synthetic(0, 0, 5, 3, 4, seed=0)


def test_dataset_validates_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.array([0, 1, 5]), class_count=3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]))


def test_combine_concatenates_tasks(tiny_task):
    other = make_synthetic(1, 32, 8, 4, 6, seed=0)
    pooled = combine(tiny_task.train, other.train)
    assert len(pooled) == len(tiny_task.train) + 32
    assert pooled.task_id == -1


def test_image_binary_round_trip(tmp_path):
    dataset = _images()
    path = write_image_binary(dataset, tmp_path / "train.bin")
    loaded = read_image_binary(path, class_count=10)
    np.testing.assert_allclose(loaded.inputs, dataset.inputs, atol=1e-7)
    np.testing.assert_array_equal(loaded.labels, dataset.labels)
    assert loaded.sample_shape == (3, 8, 8)


def test_image_binary_errors_carry_offsets(tmp_path):
    path = write_image_binary(_images(), tmp_path / "train.bin")
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.bin"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ImageFormatError) as exc:
        read_image_binary(bad_magic)
    assert exc.value.offset == 0

    record = 1 + 3 * 8 * 8
    truncated = tmp_path / "short.bin"
    truncated.write_bytes(blob[: IMAGE_HEADER.size + 2 * record + 10])
    with pytest.raises(ImageFormatError) as exc:
        read_image_binary(truncated)
    assert exc.value.offset == IMAGE_HEADER.size + 2 * record

    with pytest.raises(ImageFormatError):
        read_image_binary(path, class_count=1)
    with pytest.raises(FileNotFoundError):
        read_image_binary(tmp_path / "missing.bin")


def test_image_binary_rejects_trailing_bytes(tmp_path):
    dataset = _images()
    path = write_image_binary(dataset, tmp_path / "train.bin")
    blob = path.read_bytes()
    padded = tmp_path / "padded.bin"
    padded.write_bytes(blob + b"\x00\x00")
    with pytest.raises(ImageFormatError) as exc:
        read_image_binary(padded)
    assert exc.value.offset == len(blob)
    assert read_image_binary(path).class_count == int(dataset.labels.max()) + 1


def test_sample_batch_covers_each_epoch_once(tiny_task):
    stream = RngStream.from_seed(0, "data")
    seen = []
    for _ in range(steps_per_epoch(len(tiny_task.train), 48)):
        seen.append(sample_batch(tiny_task.train, 48, stream).indices)
    sizes = [len(s) for s in seen]
    assert sizes == [48, 48, 32]
    assert sorted(np.concatenate(seen).tolist()) == list(range(128))
    assert stream.epoch == 1 and stream.cursor == 0


def test_stream_state_replays_batches(tiny_task):
    stream = RngStream.from_seed(9, "data")
    sample_batch(tiny_task.train, 16, stream)
    replay = RngStream.from_state("data", stream.state())
    for _ in range(12):
        a = sample_batch(tiny_task.train, 16, stream)
        b = sample_batch(tiny_task.train, 16, replay)
        np.testing.assert_array_equal(a.indices, b.indices)


def test_named_streams_are_independent():
    data = RngStream.from_seed(5, "data")
    aug = RngStream.from_seed(5, "augment")
    assert data.seed != aug.seed
    assert RngStream.from_seed(5, "data").seed == data.seed


def test_sample_batch_rejects_oversized_batches(tiny_task):
    with pytest.raises(ValueError):
        sample_batch(tiny_task.train, 500, RngStream.from_seed(0, "data"))


def test_augmentation_is_stream_driven_and_label_preserving():
    dataset = _images(6)
    batch = Batch(dataset.inputs, dataset.labels, np.arange(6))
    spec = AugmentSpec(enabled=True, flip_prob=0.5, crop_pad=2)
    s1, s2 = RngStream.from_seed(1, "augment"), RngStream.from_seed(1, "augment")
    a = augment(batch, spec, s1)
    b = augment(batch, spec, s2)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, batch.labels)
    assert s1.events == 1
    assert not np.array_equal(a.inputs, batch.inputs)
    assert augment(batch, AugmentSpec(), s1) is batch


def test_vector_augmentation_adds_jitter(tiny_task):
    batch = Batch(tiny_task.train.inputs[:8], tiny_task.train.labels[:8], np.arange(8))
    out = augment(batch, AugmentSpec(enabled=True, jitter=0.2), RngStream.from_seed(0, "augment"))
    assert out.inputs.shape == batch.inputs.shape
    assert 0 < np.std(out.inputs - batch.inputs) < 0.5


def test_crop_pad_must_fit_the_image():
    dataset = _images(2)
    batch = Batch(dataset.inputs, dataset.labels, np.arange(2))
    with pytest.raises(ValueError):
        augment(batch, AugmentSpec(enabled=True, crop_pad=8), RngStream.from_seed(0, "augment"))
