"""Named parameter trees and module tagging.

A ParamTree is a plain dict mapping dotted tensor names to Tensors, e.g.
``blocks.3.mlp.w0``. Every name resolves to exactly one module tag out of
{Attention, LayerNorm, MLP, Embedding, Head}; the tag partition drives
which tensors are merged statically vs. up-scaled into MoE modules.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from .errors import StructureError
from .tensor import Tensor

ParamTree = dict[str, Tensor]

TAGS = ("Attention", "LayerNorm", "MLP", "Embedding", "Head")

_BLOCK_RE = re.compile(r"^blocks\.(\d+)\.")


def module_tag(name: str) -> str:
    """Module tag for a tree name; raises on names outside the scheme."""
    if name.startswith("embed."):
        return "Embedding"
    if name.startswith("head"):
        return "Head"
    if name.startswith("final_ln."):
        return "LayerNorm"
    if ".att." in name:
        return "Attention"
    if ".ln1." in name or ".ln2." in name:
        return "LayerNorm"
    if ".mlp." in name:
        return "MLP"
    raise StructureError(f"no module tag for tensor name {name!r}")


def block_index(name: str) -> int | None:
    """Transformer block index encoded in the name, if any."""
    m = _BLOCK_RE.match(name)
    return int(m.group(1)) if m else None


def check_same_structure(a: ParamTree, b: ParamTree) -> None:
    """Raise StructureError naming the first divergent tensor."""
    for name in sorted(set(a) | set(b)):
        if name not in a or name not in b:
            raise StructureError(f"tensor {name!r} present in only one tree")
        if a[name].shape != b[name].shape:
            raise StructureError(
                f"tensor {name!r} shape mismatch: {a[name].shape} vs {b[name].shape}"
            )


def tree_copy(tree: ParamTree, requires_grad: bool | None = None) -> ParamTree:
    return {k: v.copy(requires_grad=requires_grad) for k, v in tree.items()}


def tree_map(fn, tree: ParamTree, *rest: ParamTree) -> ParamTree:
    for other in rest:
        check_same_structure(tree, other)
    return {
        k: Tensor(fn(tree[k].data, *(o[k].data for o in rest)), dtype=tree[k].data.dtype)
        for k in tree
    }


def tree_zeros_like(tree: ParamTree) -> ParamTree:
    return tree_map(np.zeros_like, tree)


def tree_param_count(tree: ParamTree) -> int:
    return sum(t.size for t in tree.values())


def tree_digest(tree: ParamTree) -> str:
    """Order-independent content hash of names, shapes and bytes."""
    h = hashlib.sha256()
    for name in sorted(tree):
        t = tree[name]
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def block_names(tree: ParamTree, layer: int, tag: str | None = None) -> list[str]:
    """Sorted tensor names of one block, optionally filtered by tag."""
    names = [n for n in sorted(tree) if block_index(n) == layer]
    if tag is not None:
        names = [n for n in names if module_tag(n) == tag]
    return names
