from __future__ import annotations

import numpy as np
import pytest

from mergelab import nets
from mergelab import tensor_core as tc
from mergelab.nets import ArchDescriptor, ArchMismatchError, ParamVector
from mergelab.tensor_core import ShapeError, Tensor


def test_layout_is_contiguous_and_counts_parameters(mlp_norm_arch):
    lay = nets.layout(mlp_norm_arch)
    offset = 0
    for slot in lay.slots:
        assert slot.offset == offset
        offset += slot.size
    assert offset == lay.size == nets.parameter_count(mlp_norm_arch)
    # 6->8 and 8->8 weights with scale/shift, then an 8->4 head
    assert lay.size == 6 * 8 + 16 + 8 * 8 + 16 + 8 * 4 + 4
    assert lay.aux_size == 2 * (8 + 8)


def test_smallest_mlp_has_two_parameters():
    arch = nets.mlp([1, 1])
    assert nets.parameter_count(arch) == 2
    assert arch.hidden_blocks == 0


def test_decay_mask_excludes_biases_and_shifts(mlp_arch, mlp_norm_arch):
    mask = nets.decay_mask(mlp_arch)
    for slot in nets.layout(mlp_arch).slots:
        expected = 1.0 if slot.role == "weight" else 0.0
        assert np.all(mask[slot.offset : slot.offset + slot.size] == expected)
    norm_mask = nets.decay_mask(mlp_norm_arch)
    shift = nets.layout(mlp_norm_arch).slot("block0.bn_shift")
    scale = nets.layout(mlp_norm_arch).slot("block0.bn_scale")
    assert not np.any(norm_mask[shift.offset : shift.offset + shift.size])
    assert np.all(norm_mask[scale.offset : scale.offset + scale.size] == 1.0)


def test_invalid_architectures_are_rejected():
    with pytest.raises(ValueError):
        nets.mlp([4, 0, 2])
    with pytest.raises(ValueError):
        nets.tiny_cnn((3, 6, 6), 10, channels=(4, 8))  # 6 not divisible by 4
    with pytest.raises(ValueError):
        ArchDescriptor("resnet", (2, 2), (2,), 2, ())


def test_canonical_text_round_trip(cnn_arch, mlp_norm_arch):
    for arch in (cnn_arch, mlp_norm_arch, nets.mlp([3, 2], bn_eps=1e-3)):
        assert ArchDescriptor.from_canonical(arch.canonical()) == arch


def test_build_is_deterministic_and_respects_init_rules(mlp_norm_arch):
    a = nets.build(mlp_norm_arch, 11)
    b = nets.build(mlp_norm_arch, 11)
    c = nets.build(mlp_norm_arch, 12)
    assert a.equals(b)
    assert not a.equals(c)
    tensors = a.unpack()
    bound = np.sqrt(2.0) * np.sqrt(3.0 / 6)
    assert np.all(np.abs(tensors["block0.weight"]) <= bound + 1e-6)
    np.testing.assert_array_equal(tensors["block0.bn_scale"], 1.0)
    np.testing.assert_array_equal(tensors["head.bias"], 0.0)
    np.testing.assert_array_equal(tensors["block1.running_var"], 1.0)


def test_param_vector_is_read_only_and_validated(mlp_norm_arch):
    params = nets.build(mlp_norm_arch, 0)
    with pytest.raises(ValueError):
        params.values[0] = 1.0
    with pytest.raises(ShapeError):
        ParamVector(mlp_norm_arch, np.zeros(3, dtype=np.float32), params.aux.copy())
    bad_aux = np.zeros_like(params.aux)
    with pytest.raises(ValueError, match="variances"):
        params.with_values(params.values, bad_aux)


def test_pack_unpack_round_trip(cnn_arch):
    params = nets.build(cnn_arch, 4)
    tensors = {k: v for k, v in params.unpack().items() if "running" not in k}
    stats = {k: v for k, v in params.unpack().items() if "running" in k}
    assert nets.pack(cnn_arch, tensors, stats).equals(params)


def test_compatibility_check(mlp_arch, mlp_norm_arch):
    a = nets.build(mlp_arch, 0)
    b = nets.build(mlp_norm_arch, 0)
    assert not a.compatible(b)
    with pytest.raises(ArchMismatchError):
        a.require_compatible(b)


def test_forward_shapes_and_mode_semantics(mlp_norm_arch, tiny_task):
    params = nets.build(mlp_norm_arch, 1)
    x = tiny_task.train.inputs[:10]
    train = nets.forward(params, x, "train")
    assert train.logits.shape == (10, 4)
    assert not np.array_equal(train.aux, params.aux)
    evaluated = nets.forward(params, x, "eval")
    np.testing.assert_array_equal(evaluated.aux, params.aux)
    with pytest.raises(ShapeError):
        nets.forward(params, np.ones((2, 5)), "eval")
    with pytest.raises(ValueError):
        nets.forward(params, x, "predict")


def test_cnn_forward_runs_on_images(cnn_arch):
    params = nets.build(cnn_arch, 0)
    images = np.random.default_rng(0).random((3, 1, 4, 4)).astype(np.float32)
    out = nets.logits(params, images)
    assert out.shape == (3, 3)
    assert np.all(np.isfinite(out))


def test_evaluate_reports_loss_and_accuracy(mlp_arch, tiny_task):
    params = nets.build(mlp_arch, 0)
    loss, acc = nets.evaluate(params, tiny_task.test.inputs, tiny_task.test.labels, batch_size=16)
    assert loss > 0
    assert 0.0 <= acc <= 1.0
    full_loss, full_acc = nets.evaluate(params, tiny_task.test.inputs, tiny_task.test.labels)
    assert loss == pytest.approx(full_loss, rel=1e-5)
    assert acc == full_acc


def test_loss_and_grad_returns_new_statistics(mlp_norm_arch, tiny_task):
    params = nets.build(mlp_norm_arch, 0)
    step = nets.loss_and_grad(params, tiny_task.train.inputs[:16], tiny_task.train.labels[:16])
    assert step.grad.shape == params.values.shape
    assert step.aux.shape == params.aux.shape
    assert np.isfinite(step.loss)


@pytest.mark.parametrize("scale", [0.5, 2.0])
def test_normalized_mlp_is_scale_invariant(mlp_norm_arch, tiny_task, scale):
    params = nets.build(mlp_norm_arch, 3)
    deviation = nets.check_scale_invariance(params, scale, tiny_task.train.inputs[:64])
    assert deviation < 1e-5


def test_plain_mlp_is_not_scale_invariant(tiny_task):
    arch = nets.mlp([6, 16, 16, 4])
    params = nets.build(arch, 3)
    assert nets.check_scale_invariance(params, 2.0, tiny_task.train.inputs[:64]) > 1e-2


def test_scale_invariance_rejects_non_positive_scale(mlp_norm_arch, tiny_task):
    with pytest.raises(ValueError):
        nets.check_scale_invariance(nets.build(mlp_norm_arch, 0), 0.0, tiny_task.train.inputs[:8])


@pytest.mark.parametrize("arch_name", ["mlp_arch", "cnn_arch"])
def test_loss_and_grad_matches_finite_differences(f64, request, arch_name):
    arch = request.getfixturevalue(arch_name)
    params = nets.build(arch, 1).astype(np.float64)
    rng = np.random.default_rng(4)
    inputs = rng.standard_normal((5,) + arch.input_shape)
    labels = rng.integers(0, arch.class_count, size=5)
    step = nets.loss_and_grad(params, inputs, labels, "eval")
    closure = nets.loss_closure(params, inputs, labels, "eval")
    numeric = tc.numerical_gradient(lambda z: closure(Tensor(z)).item(), params.values, h=1e-6)
    np.testing.assert_allclose(step.grad, numeric, rtol=1e-4, atol=1e-7)


def test_param_vector_leaves_the_callers_buffer_alone(mlp_arch):
    raw = np.zeros(nets.parameter_count(mlp_arch), dtype=np.float32)
    params = ParamVector(mlp_arch, raw)
    raw[0] = 5.0
    assert raw.flags.writeable
    assert params.values[0] == 0.0
    shared = ParamVector(mlp_arch, params.values)
    assert shared.values is params.values
