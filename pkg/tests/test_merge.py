from __future__ import annotations

import numpy as np
import pytest

from mergelab import merge, nets
from mergelab.merge import MergeSpec, apply_merge, linear_interpolate, recompute_statistics, task_arithmetic_merge, task_vector
from mergelab.nets import ArchMismatchError


def _random_params(arch, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    params = nets.build(arch, seed)
    values = rng.standard_normal(len(params)).astype(dtype)
    aux = params.aux.astype(dtype)
    if aux.size:
        aux = aux + rng.uniform(0.1, 1.0, size=aux.size).astype(dtype)
    return nets.ParamVector(arch, values, aux)


def test_endpoints_are_exact_copies(mlp_norm_arch):
    a = _random_params(mlp_norm_arch, 1)
    b = _random_params(mlp_norm_arch, 2)
    assert linear_interpolate(a, b, 0.0).equals(a)
    assert linear_interpolate(a, b, 1.0).equals(b)


@pytest.mark.parametrize("alpha", [0.25, 0.5, 0.375, 0.875])
def test_linear_interpolation_is_symmetric(mlp_norm_arch, alpha):
    a = _random_params(mlp_norm_arch, 3)
    b = _random_params(mlp_norm_arch, 4)
    assert linear_interpolate(a, b, alpha).equals(linear_interpolate(b, a, 1.0 - alpha))


def test_identical_models_merge_to_themselves(mlp_norm_arch):
    a = _random_params(mlp_norm_arch, 5)
    merged = linear_interpolate(a, a, 0.5)
    np.testing.assert_array_equal(merged.values, a.values)
    np.testing.assert_array_equal(merged.aux, a.aux)


def test_extrapolation_keeps_variances_positive(mlp_norm_arch):
    a = _random_params(mlp_norm_arch, 6)
    mask = nets.variance_mask(mlp_norm_arch)
    shrunk = a.aux.copy()
    shrunk[mask] *= 0.1
    b = a.with_values(a.values, shrunk)
    # 1.5 * 0.1v - 0.5v < 0 on every variance entry
    merged = linear_interpolate(a, b, 1.5)
    variances = merged.aux[mask]
    assert np.all(variances > 0)
    assert np.any(variances <= np.float32(merge.VAR_FLOOR))


def test_incompatible_models_are_rejected(mlp_arch, mlp_norm_arch):
    with pytest.raises(ArchMismatchError):
        linear_interpolate(_random_params(mlp_arch, 0), _random_params(mlp_norm_arch, 0), 0.5)
    with pytest.raises(ArchMismatchError):
        task_vector(_random_params(mlp_arch, 0), _random_params(mlp_norm_arch, 0))


def test_single_task_vector_reconstructs_the_finetuned_model(mlp_norm_arch):
    base = _random_params(mlp_norm_arch, 8)
    tuned = _random_params(mlp_norm_arch, 9)
    merged = task_arithmetic_merge(base, [task_vector(tuned, base)], [1.0])
    assert merged.equals(tuned)


def test_zero_coefficients_return_the_base(mlp_norm_arch):
    base = _random_params(mlp_norm_arch, 10)
    tuned = _random_params(mlp_norm_arch, 11)
    merged = task_arithmetic_merge(base, [task_vector(tuned, base)], [0.0])
    assert merged.equals(base)


def test_two_vector_task_arithmetic_equals_interpolation():
    arch = nets.mlp([4, 6, 3])
    alphas = np.random.default_rng(0).uniform(0.0, 1.0, size=1000)
    for seed, alpha in enumerate(alphas):
        base = _random_params(arch, 3 * seed, np.float64)
        a = _random_params(arch, 3 * seed + 1, np.float64)
        b = _random_params(arch, 3 * seed + 2, np.float64)
        ta = task_arithmetic_merge(base, [task_vector(a, base), task_vector(b, base)], [1.0 - alpha, alpha])
        lin = linear_interpolate(a, b, float(alpha))
        np.testing.assert_allclose(ta.values, lin.values, rtol=1e-7, atol=1e-12)


def test_task_arithmetic_validates_inputs(mlp_arch):
    base = _random_params(mlp_arch, 0)
    tau = task_vector(_random_params(mlp_arch, 1), base)
    with pytest.raises(ValueError):
        task_arithmetic_merge(base, [tau], [0.5, 0.5])
    with pytest.raises(ValueError):
        task_arithmetic_merge(base, [], [])


def test_recompute_statistics_is_deterministic_and_keeps_values(mlp_norm_arch, tiny_task):
    params = nets.build(mlp_norm_arch, 0)
    once = recompute_statistics(params, tiny_task.train, 4, batch_size=32)
    twice = recompute_statistics(params, tiny_task.train, 4, batch_size=32)
    assert once.equals(twice)
    np.testing.assert_array_equal(once.values, params.values)
    assert not np.array_equal(once.aux, params.aux)


def test_recompute_is_a_no_op_without_normalization(mlp_arch, tiny_task):
    params = nets.build(mlp_arch, 0)
    assert recompute_statistics(params, tiny_task.train) is params


def test_recompute_policy_needs_data(mlp_norm_arch):
    a = _random_params(mlp_norm_arch, 0)
    with pytest.raises(ValueError):
        linear_interpolate(a, a, 0.5, policy="recompute")
    with pytest.raises(ValueError):
        linear_interpolate(a, a, 0.5, policy="average")


def test_apply_merge_dispatch(mlp_norm_arch, tiny_task):
    base = _random_params(mlp_norm_arch, 0)
    a = _random_params(mlp_norm_arch, 1)
    b = _random_params(mlp_norm_arch, 2)
    lin = apply_merge(MergeSpec("linear", 0.5), [a, b])
    assert lin.equals(linear_interpolate(a, b, 0.5))
    ta = apply_merge(MergeSpec("task_arithmetic", 0.5), [a, b], base=base)
    assert ta.values.shape == base.values.shape
    recomputed = apply_merge(MergeSpec("linear", 0.5, policy="recompute"), [a, b], dataset=tiny_task.train)
    np.testing.assert_array_equal(recomputed.values, lin.values)
    with pytest.raises(ValueError):
        apply_merge(MergeSpec("task_arithmetic"), [a, b])
    with pytest.raises(ValueError):
        MergeSpec("ties")
