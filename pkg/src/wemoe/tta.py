"""Test-time adaptation of router parameters by entropy minimization.

Only the routers train; every other tensor (static trunk, MoE bases,
dictionaries, heads) stays frozen. Each step draws one unlabeled batch
per task, sums the per-task prediction entropies and applies one Adam
update. Deterministic under the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .merging import MergedModel, merged_features
from .tensor import Tape, Tensor
from .vit import classify

LOG_FLOOR = 1e-12  # clamp for p log p on saturated softmax rows


@dataclass
class TTAConfig:
    steps: int = 200
    lr: float = 1e-3
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        if self.lr <= 0:
            raise ContractError("lr must be > 0")


def entropy_loss(probs: Tensor) -> Tensor:
    """Batch-mean Shannon entropy of predicted class posteriors."""
    row_sums = probs.data.sum(axis=-1)
    if np.any(np.abs(row_sums - 1.0) > 1e-5):
        raise ContractError("entropy_loss expects probability rows summing to 1")
    plogp = probs * T.log(T.clamp_min(probs, LOG_FLOOR))
    return -T.tmean(T.tsum(plogp, axis=-1))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected adaptive moment update; functional, returns copies."""
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} vs param {p.shape} for {name!r}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        new_params[name] = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


@dataclass
class TTATrace:
    """Per-step entropy record: one column per task plus the sum."""

    task_ids: list[int]
    per_task: list[list[float]]
    total: list[float]

    def rows(self) -> list[tuple]:
        header = ("step", *[f"task{t}" for t in self.task_ids], "total")
        out = [header]
        for i, (per, tot) in enumerate(zip(self.per_task, self.total)):
            out.append((i, *per, tot))
        return out


def tta_train(
    model: MergedModel,
    test_images: dict[int, np.ndarray],
    config: TTAConfig,
) -> tuple[MergedModel, TTATrace]:
    """Adapt the routers on unlabeled test batches; model updated in place.

    ``test_images`` maps task index -> unlabeled image array. Heads must be
    frozen; routers are the only tensors receiving updates. Gradients are
    reduced in ascending task order for determinism.
    """
    task_ids = sorted(test_images)
    if len(model.heads) < len(task_ids):
        raise ContractError("model is missing heads for the requested tasks")
    for t in task_ids:
        if len(test_images[t]) == 0:
            raise ContractError(f"empty test set for task {t}")
        if len(test_images[t]) < config.batch_size:
            raise ContractError(
                f"task {t} test set smaller than batch size {config.batch_size}"
            )
    for head in model.heads:
        if head.w.requires_grad or head.b.requires_grad:
            raise ContractError("heads must be frozen during test-time adaptation")

    router_tensors = model.router_tensors()
    for tensor in router_tensors.values():
        tensor.requires_grad = True

    state = AdamState()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(31,)))
    trace = TTATrace(task_ids=task_ids, per_task=[], total=[])

    for _step in range(config.steps):
        batches = {
            t: test_images[t][rng.choice(len(test_images[t]), size=config.batch_size, replace=False)]
            for t in task_ids
        }
        with Tape() as tape:
            total = None
            per_task: list[float] = []
            for t in task_ids:
                feats = merged_features(model, batches[t])
                probs = T.softmax_lastdim(classify(feats, model.heads[t]))
                loss_t = entropy_loss(probs)
                per_task.append(loss_t.item())
                total = loss_t if total is None else total + loss_t
            grads = tape.backward(total)
        grad_arrays = {
            name: grads[tensor].data if tensor in grads else np.zeros_like(tensor.data)
            for name, tensor in router_tensors.items()
        }
        values = {name: tensor.data for name, tensor in router_tensors.items()}
        new_values, state = adam_step(values, grad_arrays, state,
                                      lr=config.lr, beta1=config.beta1,
                                      beta2=config.beta2, eps=config.eps)
        for name, tensor in router_tensors.items():
            tensor.data = new_values[name].astype(tensor.data.dtype, copy=False)
        trace.per_task.append(per_task)
        trace.total.append(float(sum(per_task)))

    return model, trace
