"""Diagnostics over experts and merged models, emitted as tabular data.

Everything here is a pure read of immutable models: per-layer drift of
fine-tuned experts from the base, routing-weight summaries (violin data as
quantile tables), first-choice matrices and loss-landscape grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .merging import MergedModel, merged_features
from .taskvec import TaskVector, l2_module_distance
from .tensor import Tensor
from .tree import ParamTree
from .vit import TaskHead, ViTConfig, classify, cross_entropy, vit_encode

DRIFT_MODULES = ("Attention", "LayerNorm", "MLP")


@dataclass
class DriftRow:
    layer: int
    module: str
    mean_sq_l2: float


def drift_report(theta_0: ParamTree, experts: list[ParamTree],
                 n_blocks: int) -> list[DriftRow]:
    """Per-layer, per-module mean squared-L2 drift over the experts."""
    if not experts:
        raise ContractError("drift report needs at least one expert")
    rows = []
    for layer in range(n_blocks):
        for module in DRIFT_MODULES:
            vals = [l2_module_distance(e, theta_0, module, layer) for e in experts]
            rows.append(DriftRow(layer, module, float(np.mean(vals))))
    return rows


def drift_csv_rows(rows: list[DriftRow]) -> list[tuple]:
    return [("layer", "module", "mean_sq_l2")] + [
        (r.layer, r.module, r.mean_sq_l2) for r in rows
    ]


def mlp_exceeds_att_layer_count(rows: list[DriftRow]) -> tuple[int, int]:
    """(layers where MLP drift > Attention drift, total layers)."""
    by_layer: dict[int, dict[str, float]] = {}
    for r in rows:
        by_layer.setdefault(r.layer, {})[r.module] = r.mean_sq_l2
    wins = sum(1 for d in by_layer.values() if d["MLP"] > d["Attention"])
    return wins, len(by_layer)


# ---------------------------------------------------------------------------
# routing analyses


def collect_lambdas(model: MergedModel, images) -> list[tuple[str, int, np.ndarray]]:
    """Per-module routing weights for a batch: (kind, layer, (B, n)) entries."""
    _, lam = merged_features(model, images, collect_lambdas=True)
    return lam


@dataclass
class RoutingSummaryRow:
    layer: int
    source_task: int
    candidate_task: int
    mean: float
    minimum: float
    q25: float
    median: float
    q75: float
    maximum: float


def routing_distribution(
    model: MergedModel,
    task_images: dict[int, np.ndarray],
    layers: list[int],
) -> list[RoutingSummaryRow]:
    """Quantile summaries of lambda components over test samples.

    For each requested layer and each source task's images, summarizes the
    distribution of every candidate weight.
    """
    n_layers = model.config.n_blocks
    for l in layers:
        if not 0 <= l < n_layers:
            raise ContractError(f"layer {l} out of range 0..{n_layers - 1}")
    rows = []
    for source, images in sorted(task_images.items()):
        lam_by_layer = {layer: arr for kind, layer, arr in collect_lambdas(model, images)
                        if kind in ("mlp", "block")}
        for l in layers:
            lam = lam_by_layer[l]
            for cand in range(lam.shape[1]):
                col = lam[:, cand].astype(np.float64)
                rows.append(RoutingSummaryRow(
                    layer=l, source_task=source, candidate_task=cand,
                    mean=float(col.mean()), minimum=float(col.min()),
                    q25=float(np.quantile(col, 0.25)), median=float(np.median(col)),
                    q75=float(np.quantile(col, 0.75)), maximum=float(col.max()),
                ))
    return rows


def routing_csv_rows(rows: list[RoutingSummaryRow]) -> list[tuple]:
    header = ("layer", "source_task", "candidate_task", "mean", "min", "q25",
              "median", "q75", "max")
    return [header] + [
        (r.layer, r.source_task, r.candidate_task, r.mean, r.minimum, r.q25,
         r.median, r.q75, r.maximum)
        for r in rows
    ]


@dataclass
class FirstChoiceMatrix:
    """Argmax shares of routing weights.

    shares[source, layer, candidate] is the fraction of the source task's
    samples whose largest lambda at that layer selects the candidate task.
    Ties break to the lowest index and are tallied separately.
    """

    task_ids: list[int]
    layers: list[int]
    shares: np.ndarray  # (n_sources, n_layers, n_candidates)
    ties: np.ndarray    # (n_sources, n_layers)

    def diagonal(self) -> np.ndarray:
        """(n_sources, n_layers) share of own-task first choices."""
        n = len(self.task_ids)
        return np.stack([self.shares[i, :, i] for i in range(n)])


def first_choice_matrix(model: MergedModel, task_images: dict[int, np.ndarray]) -> FirstChoiceMatrix:
    """Per (source task, layer) argmax shares over the candidate weights."""
    task_ids = sorted(task_images)
    layer_ids: list[int] | None = None
    shares = []
    ties = []
    for source in task_ids:
        lam_entries = [(layer, arr) for kind, layer, arr in
                       collect_lambdas(model, task_images[source])
                       if kind in ("mlp", "block")]
        if layer_ids is None:
            layer_ids = [layer for layer, _ in lam_entries]
        per_layer_shares = []
        per_layer_ties = []
        for _layer, lam in lam_entries:
            b, n = lam.shape
            best = lam.argmax(axis=1)  # ties resolve to the lowest index
            tie_count = int(np.sum((lam == lam.max(axis=1, keepdims=True)).sum(axis=1) > 1))
            counts = np.bincount(best, minlength=n)
            per_layer_shares.append(counts / b)
            per_layer_ties.append(tie_count / b)
        shares.append(np.stack(per_layer_shares))
        ties.append(np.asarray(per_layer_ties))
    return FirstChoiceMatrix(task_ids, layer_ids or [], np.stack(shares), np.stack(ties))


def first_choice_csv_rows(fcm: FirstChoiceMatrix) -> list[tuple]:
    rows = [("task", "layer", "choice", "share")]
    for i, task in enumerate(fcm.task_ids):
        for j, layer in enumerate(fcm.layers):
            for cand in range(fcm.shares.shape[2]):
                rows.append((task, layer, cand, float(fcm.shares[i, j, cand])))
    return rows


# ---------------------------------------------------------------------------
# loss landscape


@dataclass
class LandscapePoint:
    l1: float
    l2: float
    loss1: float
    loss2: float

    @property
    def loss_sum(self) -> float:
        return self.loss1 + self.loss2


def _task_loss(tree: ParamTree, images, labels, head: TaskHead, config: ViTConfig,
               batch_size: int = 64) -> float:
    total = 0.0
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        logits = classify(vit_encode(batch, tree, config), head)
        total += cross_entropy(logits, labels[start:start + batch_size]).item() * len(batch)
    return total / len(images)


def loss_landscape_grid(
    theta_0: ParamTree,
    tau_1: TaskVector,
    tau_2: TaskVector,
    eval_1: tuple[np.ndarray, np.ndarray, TaskHead],
    eval_2: tuple[np.ndarray, np.ndarray, TaskHead],
    config: ViTConfig,
    lambdas_1: np.ndarray | None = None,
    lambdas_2: np.ndarray | None = None,
) -> list[LandscapePoint]:
    """Cross-entropy of theta0 + l1*tau1 + l2*tau2 on both tasks' test sets.

    The default grid spans [-1, 1] in steps of 0.25 on both axes.
    """
    if lambdas_1 is None:
        lambdas_1 = np.linspace(-1.0, 1.0, 9)
    if lambdas_2 is None:
        lambdas_2 = np.linspace(-1.0, 1.0, 9)
    points = []
    for l1 in lambdas_1:
        for l2 in lambdas_2:
            tree = {
                name: Tensor(theta_0[name].data
                             + l1 * tau_1.tree[name].data
                             + l2 * tau_2.tree[name].data,
                             dtype=theta_0[name].data.dtype)
                for name in theta_0
            }
            loss1 = _task_loss(tree, eval_1[0], eval_1[1], eval_1[2], config)
            loss2 = _task_loss(tree, eval_2[0], eval_2[1], eval_2[2], config)
            points.append(LandscapePoint(float(l1), float(l2), loss1, loss2))
    return points


def landscape_csv_rows(points: list[LandscapePoint]) -> list[tuple]:
    return [("l1", "l2", "loss1", "loss2", "losssum")] + [
        (p.l1, p.l2, p.loss1, p.loss2, p.loss_sum) for p in points
    ]


def no_dominating_point(points: list[LandscapePoint]) -> bool:
    """No grid point beats the joint-loss argmin on both tasks at once."""
    star = min(points, key=lambda p: p.loss_sum)
    return not any(p.loss1 < star.loss1 and p.loss2 < star.loss2 for p in points)
