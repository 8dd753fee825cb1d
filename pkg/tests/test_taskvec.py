import numpy as np
import pytest

from wemoe import taskvec as tvm
from wemoe import tensor as T
from wemoe import vit
from wemoe.errors import ContractError, ShapeError, StructureError
from wemoe.taskvec import (SparseRecord, compute_task_vector, kept_count,
                           l2_module_distance, magnitude_quantiles,
                           prune_task_vector, sparse_axpy)
from wemoe.tensor import Tensor
from wemoe.tree import module_tag
from wemoe.vit import ViTConfig

CFG = ViTConfig(image_size=8, patch_size=4, d_model=8, n_heads=2, n_blocks=2,
                mlp_hidden=16, n_tasks=1, classes_per_task=(2,))


def _trees(seed):
    base = vit.init_encoder(CFG, seed=seed)
    rng = np.random.default_rng(seed + 100)
    other = {k: Tensor(v.data + rng.standard_normal(v.shape).astype(v.data.dtype) * 0.1)
             for k, v in base.items()}
    return base, other


def test_identical_models_zero_vector():
    base, _ = _trees(0)
    tv = compute_task_vector(base, base)
    assert all(np.all(t.data == 0) for t in tv.tree.values())


def test_additive_inverse_roundtrip():
    with T.use_dtype("f64"):
        base, other = _trees(1)
        tv = compute_task_vector(other, base)
        rebuilt = tvm.apply_task_vector(base, tv)
        for k in base:
            np.testing.assert_array_equal(rebuilt[k].data, other[k].data)


def test_roundtrip_f32_tolerance():
    base, other = _trees(2)
    tv = compute_task_vector(other, base)
    rebuilt = tvm.apply_task_vector(base, tv)
    for k in base:
        np.testing.assert_allclose(rebuilt[k].data, other[k].data, atol=1e-6)


def test_elementwise_oracle():
    base, other = _trees(3)
    tv = compute_task_vector(other, base)
    for k in base:  # independent subtraction loop
        expect = np.asarray([a - b for a, b in zip(other[k].data.ravel(), base[k].data.ravel())])
        np.testing.assert_array_equal(tv.tree[k].data.ravel(), expect)


def test_structure_mismatch_names_first_divergent_tensor():
    base, other = _trees(4)
    del other["blocks.0.mlp.b0"]
    with pytest.raises(StructureError) as err:
        compute_task_vector(other, base)
    assert "blocks.0.mlp.b0" in str(err.value)


def test_l2_distance_zero_and_pythagorean():
    base, _ = _trees(5)
    assert l2_module_distance(base, base, "MLP", 0) == 0.0
    probe = {k: v.copy() for k, v in base.items()}
    probe["blocks.1.mlp.b1"] = Tensor(base["blocks.1.mlp.b1"].data.copy())
    probe["blocks.1.mlp.b1"].data[0] += 3
    probe["blocks.1.mlp.b1"].data[1] += 4
    assert abs(l2_module_distance(probe, base, "MLP", 1) - 25.0) < 1e-5


def test_l2_distance_flatten_and_sum_oracle():
    base, other = _trees(6)
    for tag in ("Attention", "LayerNorm", "MLP"):
        for layer in range(CFG.n_blocks):
            got = l2_module_distance(other, base, tag, layer)
            deltas = [other[n].data.astype(np.float64) - base[n].data.astype(np.float64)
                      for n in sorted(base) if f"blocks.{layer}." in n and module_tag(n) == tag]
            expect = float(np.sum(np.concatenate([d.ravel() for d in deltas]) ** 2))
            assert abs(got - expect) < 1e-12


def test_l2_distance_unknown_tag():
    base, _ = _trees(7)
    with pytest.raises(ContractError):
        l2_module_distance(base, base, "Conv", 0)


def test_l2_distances_reconcile_with_full_norm():
    base, other = _trees(8)
    total = 0.0
    for layer in range(CFG.n_blocks):
        for tag in ("Attention", "LayerNorm", "MLP"):
            total += l2_module_distance(other, base, tag, layer)
    tv = compute_task_vector(other, base)
    blocks_only = [n for n in tv.tree if n.startswith("blocks.")]
    full = float(sum(np.sum(tv.tree[n].data.astype(np.float64) ** 2) for n in blocks_only))
    assert abs(total - full) / full < 1e-6


def test_quantiles_constant_and_hand_case():
    base, _ = _trees(9)
    tv = compute_task_vector(base, base)
    for k in tv.tree:
        tv.tree[k] = Tensor(np.full(tv.tree[k].shape, -0.25))
    got = magnitude_quantiles(tv, 0, [0.1, 0.5, 0.9])
    np.testing.assert_allclose(got, [0.25, 0.25, 0.25], rtol=1e-6)


def test_quantile_order_statistic_interpolation():
    vals = np.array([1.0, 2.0, 3.0, 4.0])
    assert float(np.quantile(vals, 0.5, method="linear")) == 2.5


def test_quantiles_monotone():
    base, other = _trees(10)
    tv = compute_task_vector(other, base)
    qs = [0.1, 0.25, 0.5, 0.75, 0.9]
    got = magnitude_quantiles(tv, 1, qs)
    assert all(a <= b for a, b in zip(got, got[1:]))


def test_quantiles_validate_range():
    base, other = _trees(11)
    tv = compute_task_vector(other, base)
    with pytest.raises(ContractError):
        magnitude_quantiles(tv, 0, [0.0])


def test_prune_rho_zero_is_dense():
    base, other = _trees(12)
    tv = compute_task_vector(other, base)
    sv = prune_task_vector(tv, 0, rho=0.0)
    for suffix in tvm.MLP_TENSORS:
        name = f"blocks.0.{suffix}"
        np.testing.assert_array_equal(sv.records[name].to_dense(), tv.tree[name].data)


def test_prune_sort_by_magnitude_oracle():
    vals = np.array([0.1, -0.2, 0.05, 0.3])
    rec = _prune_flat(vals, rho=0.5)
    np.testing.assert_array_equal(rec.indices, [1, 3])
    np.testing.assert_allclose(rec.values, [-0.2, 0.3])
    rec = _prune_flat(vals, rho=0.75)
    np.testing.assert_array_equal(rec.indices, [3])
    np.testing.assert_allclose(rec.values, [0.3])


def _prune_flat(vals, rho):
    # wrap a flat array as a one-tensor group to exercise the same kernel
    tv = tvm.TaskVector(0, {"blocks.0.mlp.b0": Tensor(vals)})
    sv = tvm.prune_group(tv, ["blocks.0.mlp.b0"], rho, layer=0)
    return sv.records["blocks.0.mlp.b0"]


def test_prune_tie_break_lower_index_first():
    vals = np.array([0.5, -0.5, 0.5, 0.1])
    rec = _prune_flat(vals, rho=0.5)
    np.testing.assert_array_equal(rec.indices, [0, 1])


def test_prune_kept_count_round_half_up():
    assert kept_count(4, 0.5) == 2
    assert kept_count(4, 0.75) == 1
    assert kept_count(10, 0.9) == 1
    assert kept_count(4_722_432, 0.9) == 472_243
    assert kept_count(3, 0.5) == 2  # 1.5 rounds up


def test_prune_roundtrip_exact_positions_and_values():
    base, other = _trees(13)
    tv = compute_task_vector(other, base)
    sv = prune_task_vector(tv, 1, rho=0.7)
    for name, rec in sv.records.items():
        dense = rec.to_dense()
        nz = np.flatnonzero(dense.ravel())
        np.testing.assert_array_equal(nz, rec.indices.astype(np.int64))
        np.testing.assert_array_equal(dense.ravel()[nz], tv.tree[name].data.ravel()[nz])


def test_prune_nested_kept_sets():
    base, other = _trees(14)
    tv = compute_task_vector(other, base)
    keeps = {}
    for rho in (0.2, 0.5, 0.8, 0.95):
        sv = prune_task_vector(tv, 0, rho=rho)
        keeps[rho] = {
            (name, int(i)) for name, rec in sv.records.items() for i in rec.indices
        }
    assert keeps[0.95] <= keeps[0.8] <= keeps[0.5] <= keeps[0.2]


def test_prune_group_size_matches_rounding():
    base, other = _trees(15)
    tv = compute_task_vector(other, base)
    total = sum(tv.tree[f"blocks.0.{s}"].size for s in tvm.MLP_TENSORS)
    for rho in (0.0, 0.3, 0.9):
        sv = prune_task_vector(tv, 0, rho=rho)
        assert sv.nnz() == kept_count(total, rho)


def test_sparse_axpy_zero_coeff_and_empty():
    rng = np.random.default_rng(16)
    dest = rng.standard_normal((4, 5))
    rec = SparseRecord(np.array([1, 7]), np.array([2.0, -1.0]), (4, 5))
    np.testing.assert_array_equal(sparse_axpy(dest, 0.0, rec), dest)
    empty = SparseRecord(np.array([], dtype=np.uint32), np.array([]), (4, 5))
    np.testing.assert_array_equal(sparse_axpy(dest, 3.0, empty), dest)


def test_sparse_axpy_densify_oracle():
    rng = np.random.default_rng(17)
    dest = rng.standard_normal((6, 3)).astype(np.float32)
    idx = np.sort(rng.choice(18, size=7, replace=False))
    rec = SparseRecord(idx, rng.standard_normal(7).astype(np.float32), (6, 3))
    got = sparse_axpy(dest, 0.37, rec)
    expect = dest + 0.37 * rec.to_dense()
    np.testing.assert_allclose(got, expect, atol=1e-7)
    np.testing.assert_array_equal(dest, dest)  # input untouched


def test_sparse_axpy_shape_guard():
    rec = SparseRecord(np.array([0]), np.array([1.0]), (2, 2))
    with pytest.raises(ShapeError):
        sparse_axpy(np.zeros((3, 3)), 1.0, rec)


def test_sparse_record_validates_indices():
    with pytest.raises(ContractError):
        SparseRecord(np.array([3, 1]), np.array([1.0, 2.0]), (2, 2))
    with pytest.raises(ContractError):
        SparseRecord(np.array([4]), np.array([1.0]), (2, 2))
