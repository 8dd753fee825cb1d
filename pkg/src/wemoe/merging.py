"""Merge constructions and merged-model evaluation.

Four ways to combine experts sharing a pre-trained initialization:

* weight averaging — elementwise mean of full trees;
* task arithmetic — theta0 + lambda * sum of task vectors (static);
* weight-ensembling MoE — non-critical modules merged statically, critical
  modules up-scaled into MoE modules holding the pre-trained weights, a
  dictionary of per-task deltas and a router that emits per-sample merging
  weights from the module input;
* the efficient variant — magnitude-pruned sparse dictionaries plus a
  single router shared by every layer.

Also home to the parameter-count oracle used to sanity-check merged-model
sizes against the reference ViT-B/32 dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .errors import ContractError, ShapeError
from .taskvec import SparseRecord, TaskVector, kept_count, prune_group
from .tensor import Tensor
from .tree import ParamTree, check_same_structure, module_tag
from .vit import (TaskHead, ViTConfig, attention_sublayer, encoder_param_count,
                  get_preset, mlp_sublayer, patch_embed)

STRATEGY_MLP_ONLY = "mlp-only"
STRATEGY_ATT_MLP = "att-mlp"
STRATEGY_ENTIRE_BLOCK = "entire-block"
STRATEGIES = (STRATEGY_MLP_ONLY, STRATEGY_ATT_MLP, STRATEGY_ENTIRE_BLOCK)

_ATT_TENSORS = ("att.wq", "att.bq", "att.wk", "att.bk", "att.wv", "att.bv", "att.wo", "att.bo")
_MLP_TENSORS = ("mlp.w0", "mlp.b0", "mlp.w1", "mlp.b1")
_LN_TENSORS = ("ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta")

# suffixes covered by the dynamic dictionary, per module kind
KIND_TENSORS = {
    "mlp": _MLP_TENSORS,
    "att": _ATT_TENSORS,
    "block": ("ln1.gamma", "ln1.beta") + _ATT_TENSORS + ("ln2.gamma", "ln2.beta") + _MLP_TENSORS,
}


# ---------------------------------------------------------------------------
# routers


@dataclass
class RouterParams:
    """Affine(-ReLU-affine) stack mapping token states to merging weights.

    Depth 0 is a constant bias, depth 1 a single affine map, depth 2 a
    two-layer ReLU network. Outputs are raw (unnormalized) weights.
    """

    l_fc: int
    n_tasks: int
    in_dim: int
    hidden: int
    tensors: dict[str, Tensor]

    def parameter_names(self) -> list[str]:
        return sorted(self.tensors)

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_router(
    n_tasks: int,
    in_dim: int,
    l_fc: int,
    lam: float,
    seed: int,
    hidden: int | None = None,
    std: float = 0.1,
    zero_weights: bool = False,
) -> RouterParams:
    """Router whose initial output equals the static merging coefficient.

    Weight matrices are Gaussian with the given std (variance 0.01 by
    default); the output bias carries lambda so a fresh router reproduces
    task arithmetic. ``zero_weights`` zeroes the matrices (test mode) so
    the collapse is exact for any depth.
    """
    if l_fc not in (0, 1, 2):
        raise ContractError(f"router depth must be 0, 1 or 2, got {l_fc}")
    h = in_dim if hidden is None else hidden
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(77,)))

    def gauss(shape):
        w = np.zeros(shape) if zero_weights else rng.standard_normal(shape) * std
        return Tensor(w, requires_grad=True)

    tensors: dict[str, Tensor] = {}
    if l_fc == 0:
        tensors["b0"] = Tensor(np.full(n_tasks, lam), requires_grad=True)
    elif l_fc == 1:
        tensors["w0"] = gauss((in_dim, n_tasks))
        tensors["b0"] = Tensor(np.full(n_tasks, lam), requires_grad=True)
    else:
        tensors["w0"] = gauss((in_dim, h))
        tensors["b0"] = Tensor(np.zeros(h), requires_grad=True)
        tensors["w1"] = gauss((h, n_tasks))
        tensors["b1"] = Tensor(np.full(n_tasks, lam), requires_grad=True)
    return RouterParams(l_fc, n_tasks, in_dim, h, tensors)


def router_forward(router: RouterParams, h: Tensor) -> Tensor:
    """Per-token merging weights; output shape = h.shape[:-1] + (n_tasks,)."""
    if h.shape[-1] != router.in_dim:
        raise ShapeError(f"router expects feature dim {router.in_dim}, got {h.shape[-1]}")
    t = router.tensors
    if router.l_fc == 0:
        b = T.reshape(t["b0"], (1,) * (h.ndim - 1) + (router.n_tasks,))
        return T.broadcast_to(b, h.shape[:-1] + (router.n_tasks,))
    if router.l_fc == 1:
        return T.matmul(h, t["w0"]) + t["b0"]
    return T.matmul(T.relu(T.matmul(h, t["w0"]) + t["b0"]), t["w1"]) + t["b1"]


# ---------------------------------------------------------------------------
# static merges


def merge_weight_average(models: list[ParamTree]) -> ParamTree:
    """Elementwise arithmetic mean of one or more identical structures."""
    if not models:
        raise ContractError("weight averaging needs at least one model")
    first = models[0]
    for other in models[1:]:
        check_same_structure(first, other)
    out: ParamTree = {}
    for name in first:
        acc = np.zeros_like(first[name].data, dtype=np.float64)
        for m in models:
            acc += m[name].data
        out[name] = Tensor((acc / len(models)).astype(first[name].data.dtype))
    return out


def merge_task_arithmetic(
    theta_0: ParamTree,
    task_vectors: list[TaskVector],
    lam: float,
    modules: set[str] | None = None,
) -> ParamTree:
    """theta0 + lambda * sum(task vectors) on the filtered module tags.

    ``modules=None`` merges every tensor; otherwise only tensors whose tag
    is in the set are merged and the rest are copied from theta0.
    """
    if lam < 0:
        raise ContractError(f"lambda must be non-negative, got {lam}")
    for tv in task_vectors:
        check_same_structure(theta_0, tv.tree)
    out: ParamTree = {}
    for name, t in theta_0.items():
        if modules is not None and module_tag(name) not in modules:
            out[name] = Tensor(t.data.copy(), dtype=t.data.dtype)
            continue
        acc = t.data.astype(np.float64).copy()
        for tv in task_vectors:
            acc += lam * tv.tree[name].data
        out[name] = Tensor(acc.astype(t.data.dtype))
    return out


# ---------------------------------------------------------------------------
# MoE up-scaling


@dataclass
class MergeConfig:
    strategy: str = STRATEGY_MLP_ONLY
    lambda_init: float = 0.3
    l_fc: int = 2
    shared_router: bool = False
    rho: float = 0.0
    router_hidden: int | None = None
    router_std: float = 0.1
    zero_router_weights: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}; have {STRATEGIES}")
        if not 0.0 <= self.rho < 1.0:
            raise ContractError(f"rho must be in [0, 1), got {self.rho}")


@dataclass
class MoEModule:
    """One up-scaled module: pre-trained base, delta dictionary, router."""

    kind: str
    layer: int
    names: tuple[str, ...]
    base: dict[str, np.ndarray]
    entries: list[dict[str, SparseRecord]]
    router: RouterParams
    statics: dict[str, Tensor]
    sparse: bool
    _base_flat: np.ndarray | None = field(default=None, repr=False)
    _stack: np.ndarray | None = field(default=None, repr=False)
    _tensor_stacks: dict | None = field(default=None, repr=False)
    _csr: dict | None = field(default=None, repr=False)

    @property
    def n_tasks(self) -> int:
        return len(self.entries)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: self.base[n].shape for n in self.names}

    def base_flat(self) -> np.ndarray:
        if self._base_flat is None:
            self._base_flat = np.concatenate([self.base[n].ravel() for n in self.names])
        return self._base_flat

    def dense_stack(self) -> np.ndarray:
        """(n_tasks, module_size) densified dictionary, cached."""
        if self._stack is None:
            rows = []
            for entry in self.entries:
                rows.append(np.concatenate([entry[n].to_dense().ravel() for n in self.names]))
            self._stack = np.stack(rows)
        return self._stack

    def tensor_stack(self, name: str) -> np.ndarray:
        """(n_tasks, tensor_size) densified dictionary slice for one tensor."""
        if self._tensor_stacks is None:
            self._tensor_stacks = {}
        if name not in self._tensor_stacks:
            self._tensor_stacks[name] = np.stack(
                [entry[name].to_dense().ravel() for entry in self.entries]
            )
        return self._tensor_stacks[name]

    def delta_cat(self, name: str) -> np.ndarray:
        """(in_dim, n_tasks * out_dim) column-concatenated 2-d deltas."""
        if self._tensor_stacks is None:
            self._tensor_stacks = {}
        key = ("cat", name)
        if key not in self._tensor_stacks:
            self._tensor_stacks[key] = np.concatenate(
                [entry[name].to_dense() for entry in self.entries], axis=1
            )
        return self._tensor_stacks[key]

    def entry_csr(self, task: int, name: str):
        """scipy CSR of one 2-d delta, for the decomposed forward path."""
        if self._csr is None:
            self._csr = {}
        key = (task, name)
        if key not in self._csr:
            rec = self.entries[task][name]
            rows, cols = np.unravel_index(rec.indices.astype(np.int64), rec.shape)
            self._csr[key] = sp.csr_matrix((rec.values, (rows, cols)), shape=rec.shape)
        return self._csr[key]

    def dict_value_count(self) -> int:
        return sum(rec.nnz for entry in self.entries for rec in entry.values())


@dataclass
class MergedModel:
    """Statically merged trunk plus the list of dynamic MoE modules."""

    config: ViTConfig
    strategy: str
    lambda_init: float
    rho: float
    l_fc: int
    shared_router: bool
    static_tree: ParamTree
    modules: list[MoEModule]
    heads: list[TaskHead]
    seed: int = 0

    def __post_init__(self):
        self._by_slot = {(m.kind, m.layer): m for m in self.modules}

    @property
    def n_tasks(self) -> int:
        return self.modules[0].n_tasks if self.modules else len(self.heads)

    def module_at(self, kind: str, layer: int) -> MoEModule | None:
        return self._by_slot.get((kind, layer))

    def routers(self) -> list[RouterParams]:
        seen: dict[int, RouterParams] = {}
        for m in self.modules:
            seen.setdefault(id(m.router), m.router)
        return list(seen.values())

    def router_tensors(self) -> dict[str, Tensor]:
        """Unique trainable tensors, stably named for optimizers and I/O."""
        out: dict[str, Tensor] = {}
        if self.shared_router:
            router = self.modules[0].router
            for nm in router.parameter_names():
                out[f"router.shared.{nm}"] = router.tensors[nm]
            return out
        for i, m in enumerate(self.modules):
            for nm in m.router.parameter_names():
                out[f"moe.{i}.router.{nm}"] = m.router.tensors[nm]
        return out

    def trainable_param_count(self) -> int:
        return sum(t.size for t in self.router_tensors().values())


def _strategy_kinds(strategy: str) -> tuple[str, ...]:
    if strategy == STRATEGY_MLP_ONLY:
        return ("mlp",)
    if strategy == STRATEGY_ATT_MLP:
        return ("att", "mlp")
    return ("block",)


def _static_suffixes(strategy: str) -> tuple[str, ...]:
    """Per-block tensors that stay statically merged under a strategy."""
    covered = set()
    for kind in _strategy_kinds(strategy):
        covered.update(KIND_TENSORS[kind])
    return tuple(s for s in _LN_TENSORS + _ATT_TENSORS + _MLP_TENSORS if s not in covered)


def upscale_to_wemoe(
    theta_0: ParamTree,
    task_vectors: list[TaskVector],
    config: ViTConfig,
    merge: MergeConfig,
    heads: list[TaskHead] | None = None,
) -> MergedModel:
    """Build a merged model: static trunk + per-strategy MoE modules.

    rho > 0 prunes each (task, module) dictionary entry by magnitude;
    shared_router makes all modules reference one router instance.
    """
    if not task_vectors:
        raise ContractError("up-scaling needs at least one task vector")
    for tv in task_vectors:
        check_same_structure(theta_0, tv.tree)
    kinds = _strategy_kinds(merge.strategy)
    covered: set[str] = set()
    for layer in range(config.n_blocks):
        for kind in kinds:
            covered.update(f"blocks.{layer}.{s}" for s in KIND_TENSORS[kind])

    # all non-covered tensors follow the static rule
    static_names = {n for n in theta_0 if n not in covered}
    static_tree: ParamTree = {}
    for name in static_names:
        acc = theta_0[name].data.astype(np.float64).copy()
        for tv in task_vectors:
            acc += merge.lambda_init * tv.tree[name].data
        static_tree[name] = Tensor(acc.astype(theta_0[name].data.dtype))

    shared: RouterParams | None = None
    if merge.shared_router:
        shared = init_router(
            len(task_vectors), config.d_model, merge.l_fc, merge.lambda_init,
            seed=merge.seed, hidden=merge.router_hidden, std=merge.router_std,
            zero_weights=merge.zero_router_weights,
        )

    modules: list[MoEModule] = []
    slot = 0
    for layer in range(config.n_blocks):
        for kind in kinds:
            names = tuple(f"blocks.{layer}.{s}" for s in KIND_TENSORS[kind])
            base = {n: theta_0[n].data.copy() for n in names}
            entries = []
            for tv in task_vectors:
                if merge.rho > 0.0:
                    sv = prune_group(tv, list(names), merge.rho, layer)
                    entries.append(sv.records)
                else:
                    entries.append({
                        n: SparseRecord(
                            np.arange(tv.tree[n].size, dtype=np.uint32),
                            tv.tree[n].data.ravel().copy(),
                            tv.tree[n].shape,
                        )
                        for n in names
                    })
            if shared is not None:
                router = shared
            else:
                router = init_router(
                    len(task_vectors), config.d_model, merge.l_fc, merge.lambda_init,
                    seed=int(np.random.SeedSequence(merge.seed, spawn_key=(slot,)).generate_state(1)[0]),
                    hidden=merge.router_hidden, std=merge.router_std,
                    zero_weights=merge.zero_router_weights,
                )
            statics: dict[str, Tensor] = {}
            if kind == "mlp":
                statics = {f"ln2.{p}": static_tree[f"blocks.{layer}.ln2.{p}"] for p in ("gamma", "beta")}
            elif kind == "att":
                statics = {f"ln1.{p}": static_tree[f"blocks.{layer}.ln1.{p}"] for p in ("gamma", "beta")}
            modules.append(MoEModule(
                kind=kind, layer=layer, names=names, base=base, entries=entries,
                router=router, statics=statics, sparse=merge.rho > 0.0,
            ))
            slot += 1

    return MergedModel(
        config=config,
        strategy=merge.strategy,
        lambda_init=merge.lambda_init,
        rho=merge.rho,
        l_fc=merge.l_fc,
        shared_router=merge.shared_router,
        static_tree=static_tree,
        modules=modules,
        heads=list(heads) if heads else [],
        seed=merge.seed,
    )


# ---------------------------------------------------------------------------
# dynamic forward


def module_lambdas(module: MoEModule, h: Tensor) -> Tensor:
    """Per-sample merging weights: token-mean of the router outputs."""
    if h.shape[-2] == 0:
        raise ContractError("module input has zero tokens")
    return T.tmean(router_forward(module.router, h), axis=-2)


def _merged_weight_tensors(module: MoEModule, lam: Tensor) -> dict[str, Tensor]:
    """Materialize per-sample merged weights: base + dictionary @ lambda."""
    b = lam.shape[0]
    out: dict[str, Tensor] = {}
    for name in module.names:
        suffix = name.split(".", 2)[-1]
        shape = module.base[name].shape
        flat = T.matmul(lam, T.constant(module.tensor_stack(name))) + T.constant(
            module.base[name].ravel()
        )
        w = T.reshape(flat, (b,) + shape)
        if suffix.startswith("ln"):
            # per-sample LN affines broadcast over the token axis
            w = T.reshape(w, (b, 1) + shape)
        out[suffix] = w
    out.update(module.statics)
    return out


def _lift(h: Tensor) -> tuple[Tensor, bool]:
    if h.ndim == 2:
        return T.reshape(h, (1,) + h.shape), True
    return h, False


def _unlift(h: Tensor, lifted: bool) -> Tensor:
    return T.reshape(h, h.shape[1:]) if lifted else h


def wemoe_mlp_forward(
    module: MoEModule,
    h: Tensor,
    config: ViTConfig,
    path: str = "stacked",
) -> Tensor:
    """MoE MLP sublayer with per-sample merged weights.

    ``materialize`` assembles the merged weights explicitly (dictionary
    lookup); ``decomposed`` evaluates the base term plus per-task delta
    matvecs, exercising the sparse structure directly; ``stacked`` is the
    decomposed computation vectorized over tasks into one concatenated
    GEMM (default). All paths agree within float tolerance.
    """
    if module.kind != "mlp":
        raise ContractError(f"wemoe_mlp_forward on a {module.kind!r} module")
    h, lifted = _lift(h)
    lam = module_lambdas(module, h)
    if path == "materialize":
        weights = _merged_weight_tensors(module, lam)
        out = mlp_sublayer(h, weights, config)
    elif path == "decomposed":
        out = _mlp_decomposed(module, h, lam, config)
    elif path == "stacked":
        out = _mlp_task_stacked(module, h, lam, config)
    else:
        raise ContractError(f"unknown forward path {path!r}")
    return _unlift(out, lifted)


def ewemoe_mlp_forward(module: MoEModule, h: Tensor, config: ViTConfig,
                       path: str = "materialize") -> Tensor:
    """Sparse-dictionary MoE MLP forward (shared-router variant)."""
    return wemoe_mlp_forward(module, h, config, path=path)


def _delta_linear(module: MoEModule, a: Tensor, lam: Tensor, wname: str, bname: str) -> Tensor:
    """sum_t lambda_t * (a @ dW_t + db_t) using the sparse records."""
    b = lam.shape[0]
    out = None
    for t in range(module.n_tasks):
        wrec = module.entries[t][wname]
        brec = module.entries[t][bname]
        if wrec.nnz:
            term = T.matmul_const_sparse(a, module.entry_csr(t, wname))
        else:
            term = T.constant(np.zeros(a.shape[:-1] + (wrec.shape[1],), dtype=a.data.dtype))
        if brec.nnz:
            term = term + T.constant(brec.to_dense())
        lam_t = T.reshape(T.slice_axis(lam, 1, t, t + 1), (b, 1, 1))
        contrib = lam_t * term
        out = contrib if out is None else out + contrib
    return out


def _mlp_decomposed(module: MoEModule, h: Tensor, lam: Tensor, config: ViTConfig) -> Tensor:
    w0n, b0n, w1n, b1n = module.names
    a = T.layer_norm(h, module.statics["ln2.gamma"], module.statics["ln2.beta"], config.ln_eps)
    mid = T.matmul(a, T.constant(module.base[w0n])) + T.constant(module.base[b0n])
    mid = mid + _delta_linear(module, a, lam, w0n, b0n)
    act = T.gelu(mid)
    out = T.matmul(act, T.constant(module.base[w1n])) + T.constant(module.base[b1n])
    out = out + _delta_linear(module, act, lam, w1n, b1n)
    return h + out


def _stacked_linear(module: MoEModule, a: Tensor, lam: Tensor, wname: str, bname: str) -> Tensor:
    """base linear plus lambda-weighted task deltas, one concatenated GEMM."""
    b, n_tok = a.shape[0], a.shape[1]
    n = module.n_tasks
    out_dim = module.base[wname].shape[1]
    base = T.matmul(a, T.constant(module.base[wname])) + T.constant(module.base[bname])
    deltas = T.reshape(T.matmul(a, T.constant(module.delta_cat(wname))), (b, n_tok, n, out_dim))
    lam4 = T.reshape(lam, (b, 1, n, 1))
    mixed = T.tsum(deltas * lam4, axis=2)
    bias = T.reshape(T.matmul(lam, T.constant(module.tensor_stack(bname))), (b, 1, out_dim))
    return base + mixed + bias


def _mlp_task_stacked(module: MoEModule, h: Tensor, lam: Tensor, config: ViTConfig) -> Tensor:
    w0n, b0n, w1n, b1n = module.names
    a = T.layer_norm(h, module.statics["ln2.gamma"], module.statics["ln2.beta"], config.ln_eps)
    act = T.gelu(_stacked_linear(module, a, lam, w0n, b0n))
    return h + _stacked_linear(module, act, lam, w1n, b1n)


def _moe_sublayer(module: MoEModule, h: Tensor, config: ViTConfig,
                  lam_sink: list | None = None, mlp_path: str = "stacked") -> Tensor:
    lam = module_lambdas(module, h)
    if lam_sink is not None:
        lam_sink.append((module.kind, module.layer, lam.data.copy()))
    if module.kind == "mlp":
        if mlp_path == "stacked":
            return _mlp_task_stacked(module, h, lam, config)
        if mlp_path == "decomposed":
            return _mlp_decomposed(module, h, lam, config)
        if mlp_path == "materialize":
            return mlp_sublayer(h, _merged_weight_tensors(module, lam), config)
        raise ContractError(f"unknown forward path {mlp_path!r}")
    weights = _merged_weight_tensors(module, lam)
    if module.kind == "att":
        return attention_sublayer(h, weights, config)
    # whole block: one lambda drives both sublayers
    h = attention_sublayer(h, weights, config)
    return mlp_sublayer(h, weights, config)


def _block_weights(tree: ParamTree, layer: int) -> dict[str, Tensor]:
    p = f"blocks.{layer}."
    return {name[len(p):]: t for name, t in tree.items() if name.startswith(p)}


def merged_features(model: MergedModel, images, collect_lambdas: bool = False,
                    mlp_path: str = "stacked"):
    """Class-token features of the merged model; optionally the per-layer
    routing weights actually used (list of (kind, layer, (B, n)) entries)."""
    cfg = model.config
    tree = model.static_tree
    lam_sink: list | None = [] if collect_lambdas else None
    h = patch_embed(images, tree, cfg)
    for layer in range(cfg.n_blocks):
        block_mod = model.module_at("block", layer)
        if block_mod is not None:
            h = _moe_sublayer(block_mod, h, cfg, lam_sink, mlp_path)
            continue
        att_mod = model.module_at("att", layer)
        if att_mod is not None:
            h = _moe_sublayer(att_mod, h, cfg, lam_sink, mlp_path)
        else:
            h = attention_sublayer(h, _block_weights(tree, layer), cfg)
        mlp_mod = model.module_at("mlp", layer)
        if mlp_mod is not None:
            h = _moe_sublayer(mlp_mod, h, cfg, lam_sink, mlp_path)
        else:
            h = mlp_sublayer(h, _block_weights(tree, layer), cfg)
    h = T.layer_norm(h, tree["final_ln.gamma"], tree["final_ln.beta"], cfg.ln_eps)
    feats = T.reshape(T.slice_axis(h, 1, 0, 1), (h.shape[0], h.shape[2]))
    if collect_lambdas:
        return feats, lam_sink
    return feats


# ---------------------------------------------------------------------------
# parameter counting


@dataclass(frozen=True)
class CountPreset:
    """Dims + pinned base-model size used by the counting oracle."""

    d_model: int
    mlp_hidden: int
    n_blocks: int
    base_params: int


# Reference ViT-B/32 image classifier: vision tower plus the frozen
# open-vocabulary head machinery retained at deployment (pinned).
VITB32_BASE_PARAMS = 113_447_681


def count_preset(preset) -> CountPreset:
    if isinstance(preset, CountPreset):
        return preset
    if isinstance(preset, ViTConfig):
        return CountPreset(preset.d_model, preset.mlp_hidden, preset.n_blocks,
                           encoder_param_count(preset))
    if preset == "vitb32-dims":
        return CountPreset(768, 3072, 12, VITB32_BASE_PARAMS)
    return count_preset(get_preset(preset))


@dataclass(frozen=True)
class ParamCount:
    trainable: int
    total: int

    @property
    def ratio(self) -> float:
        return self.trainable / self.total

    @property
    def trainable_m(self) -> float:
        return self.trainable / 1e6

    @property
    def total_m(self) -> float:
        return self.total / 1e6


def router_param_count(l_fc: int, d: int, n_tasks: int, hidden: int | None = None) -> int:
    h = d if hidden is None else hidden
    if l_fc == 0:
        return n_tasks
    if l_fc == 1:
        return d * n_tasks + n_tasks
    if l_fc == 2:
        return d * h + h + h * n_tasks + n_tasks
    raise ContractError(f"router depth must be 0, 1 or 2, got {l_fc}")


def _module_sizes(preset: CountPreset, strategy: str) -> list[int]:
    d, m = preset.d_model, preset.mlp_hidden
    sizes = {
        "mlp": 2 * d * m + m + d,
        "att": 4 * d * d + 4 * d,
        "block": 4 * d + 4 * d * d + 4 * d + 2 * d * m + m + d,
    }
    return [sizes[k] for k in _strategy_kinds(strategy)]


def count_parameters(
    preset,
    n_tasks: int,
    l_fc: int = 2,
    rho: float = 0.0,
    shared_router: bool = False,
    strategy: str = STRATEGY_MLP_ONLY,
    include_index_storage: bool = False,
) -> ParamCount:
    """Size of an up-scaled model, from dims alone.

    Counts stored values only; sparse index storage is excluded by default
    to match value-based accounting, opt in via include_index_storage.
    """
    p = count_preset(preset)
    module_sizes = _module_sizes(p, strategy)
    routers_per_layer = len(module_sizes)
    n_router_instances = routers_per_layer if shared_router else routers_per_layer * p.n_blocks
    trainable = n_router_instances * router_param_count(l_fc, p.d_model, n_tasks)
    dict_values = sum(
        n_tasks * p.n_blocks * kept_count(size, rho) for size in module_sizes
    )
    total = p.base_params + dict_values + trainable
    if include_index_storage and rho > 0.0:
        total += dict_values
    return ParamCount(trainable=trainable, total=total)


def count_parameters_of_model(model: MergedModel, include_index_storage: bool = False) -> ParamCount:
    """Walk an actual merged model and count stored values."""
    total = sum(t.size for t in model.static_tree.values())
    for mod in model.modules:
        total += sum(arr.size for arr in mod.base.values())
        nnz = mod.dict_value_count()
        total += nnz
        if include_index_storage and mod.sparse:
            total += nnz
    trainable = model.trainable_param_count()
    return ParamCount(trainable=trainable, total=total + trainable)
