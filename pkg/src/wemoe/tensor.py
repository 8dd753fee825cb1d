"""Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap numpy arrays. Arithmetic runs eagerly; when a Tape is active
(``with Tape() as tape:``) every operation whose result needs gradients is
appended to the tape together with a backward rule. ``tape.backward(loss)``
walks the tape once in reverse and returns a gradient for every
requires-grad leaf that participated in the forward pass.

Precision is a process-global switch: float32 by default, float64 for
gradient checking (`set_default_dtype` / `use_dtype`). In strict mode any
operation producing non-finite values from finite inputs raises
NumericalError instead of letting Inf/NaN propagate.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

GELU_TANH_COEFF = 0.7978845608  # sqrt(2/pi), tanh-approximation constant

_DEFAULT_DTYPE = np.dtype(np.float32)
_STRICT_FINITE = False
_ACTIVE_TAPE: "Tape | None" = None

_DTYPE_ALIASES = {
    "f32": np.float32,
    "float32": np.float32,
    "f64": np.float64,
    "float64": np.float64,
}


def set_default_dtype(dtype) -> None:
    """Set the process-global element type ("f32"/"f64" or a numpy dtype)."""
    global _DEFAULT_DTYPE
    if isinstance(dtype, str):
        if dtype not in _DTYPE_ALIASES:
            raise ContractError(f"unknown dtype alias {dtype!r}")
        dtype = _DTYPE_ALIASES[dtype]
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_strict_finite(enabled: bool) -> None:
    """Make non-finite op outputs an error (slower; meant for test mode)."""
    global _STRICT_FINITE
    _STRICT_FINITE = bool(enabled)


class use_dtype:
    """Context manager pinning the default dtype, optionally strict mode."""

    def __init__(self, dtype, strict: bool | None = None):
        self._dtype = dtype
        self._strict = strict
        self._saved_dtype = None
        self._saved_strict = None

    def __enter__(self):
        self._saved_dtype = _DEFAULT_DTYPE
        self._saved_strict = _STRICT_FINITE
        set_default_dtype(self._dtype)
        if self._strict is not None:
            set_strict_finite(self._strict)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved_dtype)
        set_strict_finite(self._saved_strict)
        return False


def _check_finite(data: np.ndarray, op: str) -> None:
    if _STRICT_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")


class Tensor:
    """Immutable-by-convention value node; data is a numpy array."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x) -> Tensor:
    """Wrap data as a non-differentiable tensor in the current dtype."""
    return Tensor(x, requires_grad=False)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of one forward pass.

    Nodes are stored in execution order, so every node's operands precede
    it; a single reverse sweep therefore visits the graph topologically.
    A tape is single-threaded and meant to be discarded after backward.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._nodes.append(_Node(out, inputs, backward_fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, Tensor]:
        """Gradients of a scalar loss for every requires-grad leaf.

        Leaves that never influence the loss get a zero gradient.
        """
        if loss.size != 1:
            raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
        if not self._nodes:
            raise ContractError("backward on an empty tape")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = gi if gi.shape == t.data.shape else np.broadcast_to(gi, t.data.shape).copy()
                else:
                    grads[id(t)] = acc + gi
        out: dict[Tensor, Tensor] = {}
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            out[leaf] = Tensor(g, dtype=g.dtype)
        return out


def record_op(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, name: str) -> Tensor:
    """Build the result tensor for a primitive and record it if needed.

    ``backward_fn(g)`` must return one cotangent (ndarray or None) per input.
    Exposed so higher-level modules can define custom differentiable ops.
    """
    _check_finite(out_data, name)
    rg = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = rg
    if rg and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record_op(out, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked (batched) operands follow numpy @ rules."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    if a.ndim > 2 and b.ndim == 2:
        # fold the stacked left operand into one large GEMM
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(lead + (b.shape[-1],))

        def backward_folded(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a2.T @ g2
            return ga, gb

        return record_op(out, (a, b), backward_folded, "matmul")

    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record_op(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return record_op(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        return (g.transpose(inv),)

    return record_op(out, (a,), backward, "transpose")


def swap_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = np.broadcast_to(a.data, shape)
    src = a.shape

    def backward(g):
        return (_unbroadcast(g, src),)

    # materialize so downstream in-place-free math never aliases the view
    return record_op(np.ascontiguousarray(out), (a,), backward, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return record_op(out, tuple(tensors), backward, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx].copy()
    src = a.shape

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return record_op(out, (a,), backward, "slice_axis")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.shape

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, src).copy(),)

    return record_op(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        denom = a.size
    elif isinstance(axis, tuple):
        denom = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        denom = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), constant(np.asarray(1.0 / denom, dtype=a.data.dtype)))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g):
        return (g * (a.data > 0),)

    return record_op(out, (a,), backward, "relu")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU used in the transformer MLP blocks."""
    x = a.data
    x2 = x * x
    inner = GELU_TANH_COEFF * (x + 0.044715 * (x2 * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = GELU_TANH_COEFF * (1.0 + 3 * 0.044715 * x2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return record_op(out.astype(x.dtype, copy=False), (a,), backward, "gelu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return record_op(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return record_op(out, (a,), backward, "log")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient is zero on the clamped region."""
    out = np.maximum(a.data, floor)
    mask = a.data > floor

    def backward(g):
        return (g * mask,)

    return record_op(out, (a,), backward, "clamp_min")


def softmax_lastdim(a: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted."""
    if a.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last dimension")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return record_op(out.astype(a.data.dtype, copy=False), (a,), backward, "softmax")


def log_softmax_lastdim(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return record_op(out.astype(a.data.dtype, copy=False), (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    gamma/beta may be (d,) or carry per-sample leading axes that broadcast
    against x (used when whole blocks are merged per sample).
    """
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a last dimension of size >= 2")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = gamma.data * y + beta.data

    def backward(g):
        gy = g * gamma.data
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * y, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return record_op(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


def matmul_const_sparse(a: Tensor, sparse_matrix) -> Tensor:
    """a @ S for a constant scipy.sparse matrix S of shape (k, n).

    Used by the decomposed forward path of sparse MoE dictionaries; only
    ``a`` receives a gradient.
    """
    lead = a.shape[:-1]
    flat = a.data.reshape(-1, a.shape[-1])
    out = np.asarray(flat @ sparse_matrix).reshape(*lead, sparse_matrix.shape[1])
    st = sparse_matrix.T.tocsr()

    def backward(g):
        gflat = g.reshape(-1, g.shape[-1])
        return (np.asarray(gflat @ st).reshape(a.shape),)

    return record_op(out.astype(a.data.dtype, copy=False), (a,), backward, "matmul_const_sparse")


# ---------------------------------------------------------------------------
# testing oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued f at x.

    Runs f outside any tape; f must be deterministic.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad needs h > 0")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy(), dtype=base.dtype)).item()
        flat[i] = orig - h
        fm = f(Tensor(base.copy(), dtype=base.dtype)).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad, dtype=np.float64)
