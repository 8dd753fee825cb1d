"""Task vectors: dense deltas, drift measurement and magnitude pruning.

A task vector is the parameter-space difference between a fine-tuned
expert and the shared pre-trained model. Sparse task vectors keep the
top-magnitude fraction of one module's elements as (flat index, value)
records; pruning groups the four MLP tensors of a (task, layer) module
jointly by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError, StructureError
from .tensor import Tensor
from .tree import ParamTree, block_names, check_same_structure, module_tag

MLP_TENSORS = ("mlp.w0", "mlp.b0", "mlp.w1", "mlp.b1")


@dataclass
class TaskVector:
    """Dense delta tree theta_i - theta_0 for one task."""

    task_id: int
    tree: ParamTree


@dataclass
class SparseRecord:
    """Magnitude-pruned view of one dense tensor.

    indices are flat positions into the dense shape, strictly ascending.
    """

    indices: np.ndarray
    values: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.uint32)
        self.values = np.asarray(self.values)
        self.shape = tuple(int(s) for s in self.shape)
        size = int(np.prod(self.shape)) if self.shape else 1
        if self.indices.size != self.values.size:
            raise ContractError("sparse record: indices/values length mismatch")
        if self.indices.size:
            if int(self.indices.max()) >= size:
                raise ContractError("sparse record: index out of range for dense shape")
            if np.any(np.diff(self.indices.astype(np.int64)) <= 0):
                raise ContractError("sparse record: indices must be strictly increasing")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(int(np.prod(self.shape)), dtype=self.values.dtype)
        out[self.indices] = self.values
        return out.reshape(self.shape)


@dataclass
class SparseTaskVector:
    """Pruned deltas of one (task, layer) module group."""

    task_id: int
    layer: int
    rho: float
    records: dict[str, SparseRecord] = field(default_factory=dict)

    def nnz(self) -> int:
        return sum(r.nnz for r in self.records.values())


def compute_task_vector(theta_i: ParamTree, theta_0: ParamTree, task_id: int = 0) -> TaskVector:
    """Elementwise difference theta_i - theta_0 over identical structures."""
    check_same_structure(theta_i, theta_0)
    tree = {
        name: Tensor(theta_i[name].data - theta_0[name].data, dtype=theta_i[name].data.dtype)
        for name in theta_i
    }
    return TaskVector(task_id, tree)


def apply_task_vector(theta_0: ParamTree, tv: TaskVector, coeff: float = 1.0) -> ParamTree:
    check_same_structure(theta_0, tv.tree)
    return {
        name: Tensor(theta_0[name].data + coeff * tv.tree[name].data,
                     dtype=theta_0[name].data.dtype)
        for name in theta_0
    }


def l2_module_distance(theta_i: ParamTree, theta_0: ParamTree, module_kind: str, layer: int) -> float:
    """Squared L2 norm of the concatenated deltas of one tagged block module."""
    if module_kind not in ("Attention", "LayerNorm", "MLP"):
        raise ContractError(f"unknown module tag {module_kind!r}")
    names = block_names(theta_0, layer, tag=module_kind)
    if not names:
        raise ContractError(f"no block {layer} tensors tagged {module_kind}")
    total = 0.0
    for name in names:
        d = theta_i[name].data.astype(np.float64) - theta_0[name].data.astype(np.float64)
        total += float(np.sum(d * d))
    return total


def magnitude_quantiles(tv: TaskVector, layer: int, quantiles: list[float]) -> list[float]:
    """Quantiles of |elements| over one layer's MLP delta tensors."""
    for q in quantiles:
        if not 0.0 < q < 1.0:
            raise ContractError(f"quantile {q} outside (0, 1)")
    names = [n for n in block_names(tv.tree, layer) if module_tag(n) == "MLP"]
    if not names:
        raise ContractError(f"no MLP tensors in layer {layer}")
    mags = np.concatenate([np.abs(tv.tree[n].data.ravel()) for n in names])
    return [float(np.quantile(mags, q, method="linear")) for q in quantiles]


def kept_count(total: int, rho: float) -> int:
    """round-half-up((1 - rho) * total), the number of surviving elements."""
    return int(math.floor((1.0 - rho) * total + 0.5))


def prune_group(tv: TaskVector, names: list[str], rho: float, layer: int) -> SparseTaskVector:
    """Keep the top (1-rho) fraction by |value| jointly across ``names``.

    Ties are broken in favour of lower flat index within the concatenated
    group ordering.
    """
    if not 0.0 <= rho < 1.0:
        raise ContractError(f"rho must be in [0, 1), got {rho}")
    flats = [tv.tree[n].data.ravel() for n in names]
    sizes = [f.size for f in flats]
    offsets = np.cumsum([0] + sizes)
    allvals = np.concatenate(flats)
    keep = kept_count(allvals.size, rho)
    # primary key |value| descending, secondary key flat index ascending
    order = np.lexsort((np.arange(allvals.size), -np.abs(allvals)))
    chosen = np.sort(order[:keep])
    records: dict[str, SparseRecord] = {}
    for i, name in enumerate(names):
        lo, hi = offsets[i], offsets[i + 1]
        local = chosen[(chosen >= lo) & (chosen < hi)] - lo
        records[name] = SparseRecord(
            indices=local.astype(np.uint32),
            values=allvals[offsets[i] + local],
            shape=tv.tree[name].shape,
        )
    return SparseTaskVector(tv.task_id, layer, rho, records)


def prune_task_vector(tv: TaskVector, layer: int, rho: float) -> SparseTaskVector:
    """Prune one (task, layer) MLP module jointly over its four tensors."""
    names = [f"blocks.{layer}.{suffix}" for suffix in MLP_TENSORS]
    for n in names:
        if n not in tv.tree:
            raise ContractError(f"task vector lacks tensor {n!r}")
    return prune_group(tv, names, rho, layer)


def sparse_axpy(dest: np.ndarray, coeff: float, record: SparseRecord) -> np.ndarray:
    """dest + coeff * record, scattered onto the stored flat indices.

    Pure: returns a new array, untouched entries copied from dest.
    """
    if tuple(dest.shape) != record.shape:
        raise ShapeError(f"sparse_axpy dense shape {record.shape} vs dest {dest.shape}")
    if record.nnz and int(record.indices.max()) >= dest.size:
        raise ContractError("sparse_axpy: index out of range")
    out = dest.copy()
    if record.nnz:
        flat = out.reshape(-1)
        flat[record.indices] = flat[record.indices] + coeff * record.values
    return out


def dense_record(arr: np.ndarray) -> SparseRecord:
    """Trivial record keeping every element (rho = 0 limit)."""
    flat = arr.ravel()
    return SparseRecord(np.arange(flat.size, dtype=np.uint32), flat.copy(), arr.shape)
