"""Miniature pre-LayerNorm Vision Transformer.

The encoder is a plain ParamTree plus functional forward passes, so merged
variants can swap weights (including per-sample weight stacks) without any
module objects getting in the way. Classification heads are separate,
per-task and frozen once fine-tuned; merging only ever touches the shared
encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor
from .tree import ParamTree


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 6
    mlp_hidden: int = 256
    channels: int = 1
    ln_eps: float = 1e-5
    n_tasks: int = 4
    classes_per_task: tuple[int, ...] = (4, 4, 4, 4)

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ContractError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if len(self.classes_per_task) != self.n_tasks:
            raise ContractError("classes_per_task length must equal n_tasks")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1  # class token

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


# Desk config: minutes-scale CPU experiments.
DESK = ViTConfig()

# Reference ViT-B/32 dimensions; used by the parameter-count oracle only.
VITB32_DIMS = ViTConfig(
    image_size=224,
    patch_size=32,
    d_model=768,
    n_heads=12,
    n_blocks=12,
    mlp_hidden=3072,
    channels=3,
    n_tasks=8,
    classes_per_task=(10,) * 8,
)

PRESETS = {"desk": DESK, "vitb32-dims": VITB32_DIMS}


def get_preset(name: str) -> ViTConfig:
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return PRESETS[name]


def config_with_tasks(config: ViTConfig, classes_per_task: tuple[int, ...]) -> ViTConfig:
    return replace(config, n_tasks=len(classes_per_task), classes_per_task=tuple(classes_per_task))


@dataclass
class TaskHead:
    """Frozen per-task linear classifier on the class-token feature."""

    task_id: int
    w: Tensor  # (d_model, C)
    b: Tensor  # (C,)
    frozen: bool = True

    @property
    def n_classes(self) -> int:
        return self.w.shape[1]


def init_head(config: ViTConfig, task_id: int, n_classes: int, seed: int) -> TaskHead:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9000 + task_id,)))
    w = rng.standard_normal((config.d_model, n_classes)) / np.sqrt(config.d_model)
    return TaskHead(task_id, Tensor(w), Tensor(np.zeros(n_classes)))


def init_encoder(config: ViTConfig, seed: int) -> ParamTree:
    """Fresh encoder ParamTree; deterministic under seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    d, m = config.d_model, config.mlp_hidden

    def w(shape, fan_in):
        return Tensor(rng.standard_normal(shape) / np.sqrt(fan_in))

    def zeros(shape):
        return Tensor(np.zeros(shape))

    def ones(shape):
        return Tensor(np.ones(shape))

    tree: ParamTree = {
        "embed.patch_w": w((config.patch_dim, d), config.patch_dim),
        "embed.patch_b": zeros(d),
        "embed.cls": Tensor(rng.standard_normal(d) * 0.02),
        "embed.pos": Tensor(rng.standard_normal((config.n_tokens, d)) * 0.02),
    }
    for l in range(config.n_blocks):
        p = f"blocks.{l}"
        tree[f"{p}.ln1.gamma"] = ones(d)
        tree[f"{p}.ln1.beta"] = zeros(d)
        for nm in ("wq", "wk", "wv", "wo"):
            tree[f"{p}.att.{nm}"] = w((d, d), d)
        for nm in ("bq", "bk", "bv", "bo"):
            tree[f"{p}.att.{nm}"] = zeros(d)
        tree[f"{p}.ln2.gamma"] = ones(d)
        tree[f"{p}.ln2.beta"] = zeros(d)
        tree[f"{p}.mlp.w0"] = w((d, m), d)
        tree[f"{p}.mlp.b0"] = zeros(m)
        tree[f"{p}.mlp.w1"] = w((m, d), m)
        tree[f"{p}.mlp.b1"] = zeros(d)
    tree["final_ln.gamma"] = ones(d)
    tree["final_ln.beta"] = zeros(d)
    return tree


def block_param_count(config: ViTConfig, tag: str | None = None) -> int:
    """Parameters of one transformer block, optionally one tag only."""
    d, m = config.d_model, config.mlp_hidden
    counts = {"Attention": 4 * d * d + 4 * d, "LayerNorm": 4 * d, "MLP": 2 * d * m + m + d}
    if tag is None:
        return sum(counts.values())
    return counts[tag]


def encoder_param_count(config: ViTConfig) -> int:
    """Closed-form size of an init_encoder tree."""
    d = config.d_model
    embed = config.patch_dim * d + d + d + config.n_tokens * d
    return embed + config.n_blocks * block_param_count(config) + 2 * d


def extract_patches(images: np.ndarray, config: ViTConfig) -> np.ndarray:
    """(B, n_patches, patch_dim) float view of input images.

    Accepts (H,W), (H,W,C), (B,H,W) or (B,H,W,C).
    """
    arr = np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None, :, :, None]
    elif arr.ndim == 3:
        if arr.shape[-1] == config.channels and arr.shape[0] == config.image_size:
            arr = arr[None]
        else:
            arr = arr[..., None]
    if arr.shape[1] != config.image_size or arr.shape[2] != config.image_size:
        raise ShapeError(
            f"expected {config.image_size}x{config.image_size} images, got {arr.shape[1:3]}"
        )
    if arr.shape[3] != config.channels:
        raise ShapeError(f"expected {config.channels} channel(s), got {arr.shape[3]}")
    b = arr.shape[0]
    p = config.patch_size
    g = config.image_size // p
    patches = (
        arr.reshape(b, g, p, g, p, config.channels)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, g * g, config.patch_dim)
    )
    return patches


def patch_embed(images, tree: ParamTree, config: ViTConfig) -> Tensor:
    """Tokenize images: linear patch projection, class token, positions.

    Returns (B, n_tokens, d_model).
    """
    patches = T.constant(extract_patches(images, config))
    tok = T.matmul(patches, tree["embed.patch_w"]) + tree["embed.patch_b"]
    b = patches.shape[0]
    d = config.d_model
    cls = T.broadcast_to(T.reshape(tree["embed.cls"], (1, 1, d)), (b, 1, d))
    tokens = T.concat([cls, tok], axis=1)
    return tokens + tree["embed.pos"]


def _maybe_batched_bias(bias: Tensor) -> Tensor:
    # (B, k) per-sample biases broadcast over the token axis as (B, 1, k)
    if bias.ndim == 2:
        return T.reshape(bias, (bias.shape[0], 1, bias.shape[1]))
    return bias


def attention_sublayer(h: Tensor, weights: dict[str, Tensor], config: ViTConfig) -> Tensor:
    """Pre-LN residual multi-head attention: h + Att(LN1(h)).

    Weight matrices may be (d,d) or per-sample (B,d,d) stacks.
    """
    b, n, d = h.shape
    nh, hd = config.n_heads, config.head_dim
    a = T.layer_norm(h, weights["ln1.gamma"], weights["ln1.beta"], config.ln_eps)
    q = T.matmul(a, weights["att.wq"]) + _maybe_batched_bias(weights["att.bq"])
    k = T.matmul(a, weights["att.wk"]) + _maybe_batched_bias(weights["att.bk"])
    v = T.matmul(a, weights["att.wv"]) + _maybe_batched_bias(weights["att.bv"])

    def split_heads(t):
        return T.transpose(T.reshape(t, (b, n, nh, hd)), (0, 2, 1, 3))

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = T.matmul(q, T.swap_last2(k)) * (1.0 / np.sqrt(hd))
    att = T.softmax_lastdim(scores)
    ctx = T.matmul(att, v)  # (B, nh, N, hd)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    out = T.matmul(ctx, weights["att.wo"]) + _maybe_batched_bias(weights["att.bo"])
    return h + out


def mlp_sublayer(h: Tensor, weights: dict[str, Tensor], config: ViTConfig) -> Tensor:
    """Pre-LN residual MLP: h + W1 gelu(W0 LN2(h) + b0) + b1.

    MLP weights may be per-sample (B,...) stacks; LN2 stays shared.
    """
    a = T.layer_norm(h, weights["ln2.gamma"], weights["ln2.beta"], config.ln_eps)
    mid = T.gelu(T.matmul(a, weights["mlp.w0"]) + _maybe_batched_bias(weights["mlp.b0"]))
    out = T.matmul(mid, weights["mlp.w1"]) + _maybe_batched_bias(weights["mlp.b1"])
    return h + out


def _block_weights(tree: ParamTree, layer: int) -> dict[str, Tensor]:
    p = f"blocks.{layer}."
    return {name[len(p):]: t for name, t in tree.items() if name.startswith(p)}


def attention_block_forward(h: Tensor, tree: ParamTree, layer: int, config: ViTConfig) -> Tensor:
    return attention_sublayer(h, _block_weights(tree, layer), config)


def mlp_forward(h: Tensor, tree: ParamTree, layer: int, config: ViTConfig) -> Tensor:
    return mlp_sublayer(h, _block_weights(tree, layer), config)


def vit_encode(images, tree: ParamTree, config: ViTConfig) -> Tensor:
    """Class-token representation after the final LayerNorm; (B, d_model)."""
    h = patch_embed(images, tree, config)
    for layer in range(config.n_blocks):
        w = _block_weights(tree, layer)
        h = attention_sublayer(h, w, config)
        h = mlp_sublayer(h, w, config)
    h = T.layer_norm(h, tree["final_ln.gamma"], tree["final_ln.beta"], config.ln_eps)
    cls = T.slice_axis(h, 1, 0, 1)
    return T.reshape(cls, (h.shape[0], h.shape[2]))


def classify(features: Tensor, head: TaskHead) -> Tensor:
    """Logits (B, C); probabilities come from softmax downstream."""
    if features.shape[-1] != head.w.shape[0]:
        raise ShapeError(
            f"feature dim {features.shape[-1]} does not match head dim {head.w.shape[0]}"
        )
    return T.matmul(features, head.w) + head.b


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels."""
    lsm = T.log_softmax_lastdim(logits)
    onehot = np.zeros(logits.shape, dtype=lsm.data.dtype)
    onehot[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
    return -T.tmean(T.tsum(lsm * T.constant(onehot), axis=-1))
