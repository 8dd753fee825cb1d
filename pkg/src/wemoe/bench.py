"""Multi-task merging benchmark on synthetic tasks.

Pipeline: pre-train a shared base on a generic-shapes distribution, fine-tune
one expert per task from it, then compare merging methods under three
protocols: standard (merge all, evaluate all), generalization (merge seen
tasks only, evaluate unseen tasks with their own heads) and robustness
(adapt and evaluate on corrupted test sets).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .data import (Corruption, SyntheticTaskSpec, TaskDataset, apply_corruption,
                   generate_task_dataset, PRETRAIN_FAMILY)
from .errors import ContractError
from .merging import (MergeConfig, MergedModel, merge_task_arithmetic,
                      merge_weight_average, merged_features, upscale_to_wemoe)
from .taskvec import TaskVector, compute_task_vector
from .tensor import Tape, Tensor
from .tree import ParamTree, tree_copy
from .tta import AdamState, TTAConfig, adam_step, tta_train
from .vit import TaskHead, ViTConfig, classify, config_with_tasks, init_encoder, init_head, vit_encode

METHODS = ("pretrained", "individual", "weight-average", "task-arithmetic", "wemoe", "ewemoe")
PROTOCOLS = ("standard", "generalization", "robustness")


@dataclass
class BenchConfig:
    vit: ViTConfig
    seed: int = 0
    pretrain_epochs: int = 6
    pretrain_size: int = 768
    finetune_epochs: int = 10
    finetune_lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    head_target_prob: float = 0.9  # 0 disables post-finetune head calibration
    lam: float = 0.3
    rho: float = 0.9
    l_fc: int = 2
    # benchmark default uses the narrow-init sensitivity setting: at desk
    # width the deep-layer hidden norms make std-0.1 router noise swamp the
    # lambda_init anchor, breaking init-equivalence in practice
    router_std: float = 0.01
    tta: TTAConfig = field(default_factory=TTAConfig)
    n_seen: int | None = None
    corruptions: tuple[Corruption, ...] = ()
    tta_on_clean: bool = False  # robustness alternative: adapt on clean data


# ---------------------------------------------------------------------------
# training


def _adam_train(
    tree: ParamTree,
    head: TaskHead,
    images: np.ndarray,
    labels: np.ndarray,
    config: ViTConfig,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    weight_decay: float = 0.0,
) -> None:
    """Cross-entropy training of encoder + head, in place.

    weight_decay is decoupled (AdamW style) and keeps hidden-state norms
    from inflating, which matters downstream: router drift during test-time
    adaptation scales with the feature norms.
    """
    named = {f"tree.{k}": v for k, v in tree.items()}
    named["head.w"] = head.w
    named["head.b"] = head.b
    for t in named.values():
        t.requires_grad = True
    state = AdamState()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(17,)))
    n = len(images)
    for _epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            with Tape() as tape:
                logits = classify(vit_encode(images[idx], tree, config), head)
                from .vit import cross_entropy
                loss = cross_entropy(logits, labels[idx])
            grads = tape.backward(loss)
            garr = {
                name: grads[t].data if t in grads else np.zeros_like(t.data)
                for name, t in named.items()
            }
            values = {name: t.data for name, t in named.items()}
            new_values, state = adam_step(values, garr, state, lr=lr)
            decay = 1.0 - lr * weight_decay
            for name, t in named.items():
                v = new_values[name]
                # decay weight matrices only; biases, LN affines and
                # embeddings keep their scale
                if weight_decay and name.split(".")[-1].startswith(("w", "patch_w")):
                    v = v * decay
                t.data = v.astype(t.data.dtype, copy=False)
    for t in named.values():
        t.requires_grad = False


def calibrate_head_scale(
    tree: ParamTree,
    head: TaskHead,
    images: np.ndarray,
    config: ViTConfig,
    target_prob: float = 0.9,
    batch_size: int = 64,
) -> float:
    """Temperature-scale a trained head so mean top-class probability on its
    own data is ~target_prob.

    Cross-entropy training inflates logit scales, which leaves the entropy
    objective of test-time adaptation riddled with confidently-wrong minima.
    Rescaling (w, b) by a scalar never changes any argmax, so accuracies are
    untouched; only prediction sharpness is normalized.
    """
    logits = []
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        logits.append(classify(vit_encode(batch, tree, config), head).data)
    z = np.concatenate(logits).astype(np.float64)

    def mean_top_prob(scale: float) -> float:
        s = z * scale
        s = s - s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        return float(p.max(axis=-1).mean())

    lo, hi = 1e-3, 1.0
    if mean_top_prob(hi) <= target_prob:
        return 1.0  # already moderate; never sharpen
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if mean_top_prob(mid) > target_prob:
            hi = mid
        else:
            lo = mid
    scale = 0.5 * (lo + hi)
    head.w = Tensor(head.w.data * scale, dtype=head.w.data.dtype)
    head.b = Tensor(head.b.data * scale, dtype=head.b.data.dtype)
    return scale


def pretrain(config: ViTConfig, cfg: BenchConfig) -> ParamTree:
    """Shared base encoder: brief joint training on generic shapes."""
    spec = SyntheticTaskSpec(PRETRAIN_FAMILY, classes=6, train_size=cfg.pretrain_size,
                             test_size=64, noise=0.08, seed=cfg.seed,
                             image_size=config.image_size)
    ds = generate_task_dataset(spec)
    tree = init_encoder(config, seed=cfg.seed)
    head = init_head(config, -1, 6, seed=cfg.seed)
    images, labels = ds.train()
    _adam_train(tree, head, images, labels, config, cfg.pretrain_epochs,
                cfg.finetune_lr, cfg.batch_size, seed=cfg.seed,
                weight_decay=cfg.weight_decay)
    return tree


def finetune(
    theta_0: ParamTree,
    dataset: TaskDataset,
    config: ViTConfig,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    task_id: int = 0,
    weight_decay: float = 0.0,
    head_target_prob: float = 0.0,
) -> tuple[ParamTree, TaskHead]:
    """Expert for one task, trained from the shared base; head frozen after.

    head_target_prob > 0 temperature-calibrates the trained head on its own
    training images before freezing (argmax-invariant).
    """
    tree = tree_copy(theta_0, requires_grad=False)
    head = init_head(config, task_id, dataset.spec.classes, seed=seed)
    if epochs > 0:
        images, labels = dataset.train()
        _adam_train(tree, head, images, labels, config, epochs, lr, batch_size, seed=seed,
                    weight_decay=weight_decay)
        if head_target_prob > 0:
            calibrate_head_scale(tree, head, images, config, target_prob=head_target_prob)
    head.frozen = True
    return tree, head


def model_features(model, images, config: ViTConfig | None = None) -> Tensor:
    if isinstance(model, MergedModel):
        return merged_features(model, images)
    if config is None:
        raise ContractError("plain trees need a ViTConfig to evaluate")
    return vit_encode(images, model, config)


def evaluate_accuracy(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    head: TaskHead,
    config: ViTConfig | None = None,
    batch_size: int = 64,
) -> float:
    """Fraction of argmax-correct predictions; deterministic."""
    correct = 0
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        logits = classify(model_features(model, batch, config), head)
        pred = np.argmax(logits.data, axis=-1)
        correct += int(np.sum(pred == labels[start:start + batch_size]))
    return correct / len(images)


# ---------------------------------------------------------------------------
# suite preparation


@dataclass
class Suite:
    """Prepared ingredients shared by every protocol run."""

    config: ViTConfig
    theta0: ParamTree
    datasets: list[TaskDataset]
    experts: list[ParamTree]
    heads: list[TaskHead]
    task_vectors: list[TaskVector]

    @property
    def task_names(self) -> list[str]:
        return [d.spec.family for d in self.datasets]


def prepare_suite(task_specs: list[SyntheticTaskSpec], cfg: BenchConfig) -> Suite:
    with threadpool_limits(limits=1, user_api="blas"):
        return _prepare_suite(task_specs, cfg)


def _prepare_suite(task_specs: list[SyntheticTaskSpec], cfg: BenchConfig) -> Suite:
    # single-threaded BLAS: the desk-scale GEMMs are too small to parallelize
    specs = [dataclasses.replace(s, seed=s.seed + 7919 * cfg.seed) for s in task_specs]
    config = config_with_tasks(cfg.vit, tuple(s.classes for s in specs))
    datasets = [generate_task_dataset(s) for s in specs]
    theta0 = pretrain(config, cfg)
    experts: list[ParamTree] = []
    heads: list[TaskHead] = []
    for i, ds in enumerate(datasets):
        tree, head = finetune(theta0, ds, config, cfg.finetune_epochs, cfg.finetune_lr,
                              seed=cfg.seed + 101 * (i + 1), batch_size=cfg.batch_size,
                              task_id=i, weight_decay=cfg.weight_decay,
                              head_target_prob=cfg.head_target_prob)
        experts.append(tree)
        heads.append(head)
    tvs = [compute_task_vector(e, theta0, task_id=i) for i, e in enumerate(experts)]
    for ds in datasets:
        ds.reset_access_log()
    return Suite(config, theta0, datasets, experts, heads, tvs)


def _build_moe(suite: Suite, cfg: BenchConfig, tvs: list[TaskVector],
               heads: list[TaskHead], sparse: bool) -> MergedModel:
    merge = MergeConfig(
        strategy="mlp-only",
        lambda_init=cfg.lam,
        l_fc=cfg.l_fc,
        shared_router=sparse,
        rho=cfg.rho if sparse else 0.0,
        router_std=cfg.router_std,
        seed=cfg.seed,
    )
    return upscale_to_wemoe(suite.theta0, tvs, suite.config, merge, heads=heads)


def _run_tta(model: MergedModel, tta_sets: dict[int, np.ndarray], cfg: BenchConfig):
    return tta_train(model, tta_sets, cfg.tta)


# ---------------------------------------------------------------------------
# report


@dataclass
class BenchReport:
    protocol: str
    columns: list[str]
    rows: list[dict]
    manifest: dict[str, str]

    def to_markdown(self) -> str:
        header = ["method"] + self.columns
        lines = ["| " + " | ".join(header) + " |",
                 "| " + " | ".join("---" for _ in header) + " |"]
        for row in self.rows:
            cells = [str(row.get("method", ""))]
            for c in self.columns:
                v = row.get(c, "")
                cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def to_csv_rows(self) -> list[tuple]:
        out = [tuple(["method"] + self.columns)]
        for row in self.rows:
            out.append(tuple([row.get("method", "")] +
                             [row.get(c, "") for c in self.columns]))
        return out

    def value(self, method: str, column: str, **match):
        for row in self.rows:
            if row.get("method") == method and all(row.get(k) == v for k, v in match.items()):
                return row[column]
        raise KeyError((method, column, match))


def _per_task_row(method: str, accs: list[float], names: list[str], **extra) -> dict:
    row = {"method": method, **extra}
    for name, acc in zip(names, accs):
        row[name] = acc
    row["avg"] = float(np.mean(accs))
    return row


def run_merge_benchmark(
    methods: list[str],
    task_specs: list[SyntheticTaskSpec],
    protocol: str = "standard",
    cfg: BenchConfig | None = None,
    suite: Suite | None = None,
) -> BenchReport:
    """Per-task and average accuracy per method under the chosen protocol."""
    if protocol not in PROTOCOLS:
        raise ContractError(f"unknown protocol {protocol!r}")
    if len(task_specs) < 2:
        raise ContractError("benchmark needs at least 2 tasks")
    for m in methods:
        if m not in METHODS:
            raise ContractError(f"unknown method {m!r}; have {METHODS}")
    if cfg is None:
        raise ContractError("run_merge_benchmark needs a BenchConfig")
    if suite is None:
        suite = prepare_suite(task_specs, cfg)

    with threadpool_limits(limits=1, user_api="blas"):
        return _run_protocol(methods, protocol, cfg, suite)


def _run_protocol(methods, protocol, cfg, suite) -> "BenchReport":
    manifest = {
        "protocol": protocol,
        "seed": str(cfg.seed),
        "lambda": str(cfg.lam),
        "rho": str(cfg.rho),
        "l_fc": str(cfg.l_fc),
        "tta_steps": str(cfg.tta.steps),
        "tta_lr": str(cfg.tta.lr),
        "tta_batch": str(cfg.tta.batch_size),
        "tasks": ",".join(suite.task_names),
    }

    if protocol == "standard":
        return _standard_protocol(methods, suite, cfg, manifest)
    if protocol == "generalization":
        return _generalization_protocol(methods, suite, cfg, manifest)
    return _robustness_protocol(methods, suite, cfg, manifest)


def _eval_method_all_tasks(model, suite: Suite, heads: list[TaskHead],
                           datasets: list[TaskDataset]) -> list[float]:
    accs = []
    for i, ds in enumerate(datasets):
        images, labels = ds.test()
        accs.append(evaluate_accuracy(model, images, labels, heads[i], suite.config))
    return accs


def _standard_protocol(methods, suite, cfg, manifest) -> BenchReport:
    names = suite.task_names
    rows = []
    for method in methods:
        if method == "individual":
            accs = []
            for i, ds in enumerate(suite.datasets):
                images, labels = ds.test()
                accs.append(evaluate_accuracy(suite.experts[i], images, labels,
                                              suite.heads[i], suite.config))
            rows.append(_per_task_row(method, accs, names))
            continue
        model = _build_static_or_moe(method, suite, cfg, suite.task_vectors, suite.heads)
        if isinstance(model, MergedModel):
            tta_sets = {i: ds.test()[0] for i, ds in enumerate(suite.datasets)}
            _run_tta(model, tta_sets, cfg)
        rows.append(_per_task_row(method, _eval_method_all_tasks(model, suite, suite.heads,
                                                                 suite.datasets), names))
    return BenchReport("standard", names + ["avg"], rows, manifest)


def _build_static_or_moe(method, suite, cfg, tvs, heads):
    if method == "pretrained":
        return suite.theta0
    if method == "weight-average":
        experts = [suite.experts[tv.task_id] for tv in tvs]
        return merge_weight_average(experts)
    if method == "task-arithmetic":
        return merge_task_arithmetic(suite.theta0, tvs, cfg.lam)
    if method == "wemoe":
        return _build_moe(suite, cfg, tvs, heads, sparse=False)
    if method == "ewemoe":
        return _build_moe(suite, cfg, tvs, heads, sparse=True)
    raise ContractError(f"method {method!r} not valid here")


def _generalization_protocol(methods, suite, cfg, manifest) -> BenchReport:
    n = len(suite.datasets)
    n_seen = cfg.n_seen if cfg.n_seen is not None else n - 2
    if not 1 <= n_seen < n:
        raise ContractError("generalization needs a non-trivial seen/unseen split")
    seen = list(range(n_seen))
    unseen = list(range(n_seen, n))
    manifest["n_seen"] = str(n_seen)
    names = suite.task_names
    seen_cols = [f"seen:{names[i]}" for i in seen]
    unseen_cols = [f"unseen:{names[i]}" for i in unseen]
    seen_tvs = [suite.task_vectors[i] for i in seen]
    seen_heads = [suite.heads[i] for i in seen]

    rows = []
    for method in methods:
        if method in ("individual",):
            raise ContractError("individual row is undefined for generalization")
        model = _build_static_or_moe(method, suite, cfg, seen_tvs, seen_heads)
        if isinstance(model, MergedModel):
            tta_sets = {i: suite.datasets[t].test()[0] for i, t in enumerate(seen)}
            _run_tta(model, tta_sets, cfg)
        row = {"method": method}
        seen_accs, unseen_accs = [], []
        for col, t in zip(seen_cols, seen):
            images, labels = suite.datasets[t].test()
            acc = evaluate_accuracy(model, images, labels, suite.heads[t], suite.config)
            row[col] = acc
            seen_accs.append(acc)
        for col, t in zip(unseen_cols, unseen):
            images, labels = suite.datasets[t].test()
            acc = evaluate_accuracy(model, images, labels, suite.heads[t], suite.config)
            row[col] = acc
            unseen_accs.append(acc)
        row["avg_seen"] = float(np.mean(seen_accs))
        row["avg_unseen"] = float(np.mean(unseen_accs))
        rows.append(row)

    # protocol isolation: the merge/adapt/evaluate phase must never touch
    # unseen training data (expert preparation happened before log reset)
    for t in unseen:
        if "train" in suite.datasets[t].access_log:
            raise ContractError(
                f"generalization protocol read training data of unseen task {names[t]!r}"
            )
    return BenchReport("generalization", seen_cols + unseen_cols + ["avg_seen", "avg_unseen"],
                       rows, manifest)


def _robustness_protocol(methods, suite, cfg, manifest) -> BenchReport:
    if not cfg.corruptions:
        raise ContractError("robustness protocol needs a corruption list")
    names = suite.task_names
    settings: list[tuple[str, TaskDataset | None]] = [("clean", None)]
    for corr in cfg.corruptions:
        settings.append((f"{corr.kind}-s{corr.severity}", corr))
    manifest["corruptions"] = ",".join(s for s, _ in settings[1:])

    rows = []
    for setting_name, corr in settings:
        if corr is None:
            datasets = suite.datasets
        else:
            datasets = [apply_corruption(ds, corr) for ds in suite.datasets]
        for method in methods:
            if method == "individual":
                accs = []
                for i, ds in enumerate(datasets):
                    images, labels = ds.test()
                    accs.append(evaluate_accuracy(suite.experts[i], images, labels,
                                                  suite.heads[i], suite.config))
                rows.append(_per_task_row(method, accs, names, setting=setting_name))
                continue
            model = _build_static_or_moe(method, suite, cfg, suite.task_vectors, suite.heads)
            if isinstance(model, MergedModel):
                # adapt on the same (possibly corrupted) unlabeled distribution
                tta_source = suite.datasets if (cfg.tta_on_clean or corr is None) else datasets
                tta_sets = {i: ds.test()[0] for i, ds in enumerate(tta_source)}
                _run_tta(model, tta_sets, cfg)
            rows.append(_per_task_row(
                method, _eval_method_all_tasks(model, suite, suite.heads, datasets),
                names, setting=setting_name))
    return BenchReport("robustness", ["setting"] + names + ["avg"], rows, manifest)
