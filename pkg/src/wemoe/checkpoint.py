"""Binary checkpoint format for trees, task vectors and merged models.

Byte layout (all integers little-endian):

    magic   4 bytes  b"WEMC"
    version u32      currently 1
    count   u32      number of tensor records
    per tensor, in sorted-name order:
        name_len u16, name UTF-8
        dtype    u8   0 = f32, 1 = f64, 2 = sparse-f32
        rank     u8
        dims     u32 * rank        (dense shape, also for sparse records)
        payload  dense: raw values; sparse: nnz u64, indices u32 * nnz,
                 values f32 * nnz
    manifest_len u32, manifest UTF-8 key=value lines

The manifest is plain text after the tensor block; tools can reach it by
walking the fixed-size headers and seeking over payloads, without decoding
any tensor. Unknown versions are rejected explicitly. Writes are atomic
(temp file + rename) and byte-deterministic for identical inputs.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import (CheckpointFormatError, CheckpointMagicError,
                     CheckpointTruncatedError, CheckpointVersionError)
from .merging import KIND_TENSORS, MergeConfig, MergedModel, MoEModule, RouterParams
from .taskvec import SparseRecord, TaskVector
from .tensor import Tensor
from .tree import ParamTree
from .vit import TaskHead, ViTConfig

MAGIC = b"WEMC"
VERSION = 1

DTYPE_F32 = 0
DTYPE_F64 = 1
DTYPE_SPARSE_F32 = 2

_MAX_NAME = 4096
_MAX_RANK = 8


@dataclass
class _Record:
    name: str
    payload: np.ndarray | SparseRecord


def _encode_dense(buf: bytearray, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr)
    if data.dtype == np.float64:
        code, wire = DTYPE_F64, data.astype("<f8", copy=False)
    else:
        code, wire = DTYPE_F32, data.astype("<f4", copy=False)
    nb = name.encode("utf-8")
    buf += struct.pack("<H", len(nb)) + nb
    buf += struct.pack("<BB", code, data.ndim)
    buf += struct.pack(f"<{data.ndim}I", *data.shape)
    buf += wire.tobytes()


def _encode_sparse(buf: bytearray, name: str, rec: SparseRecord) -> None:
    nb = name.encode("utf-8")
    buf += struct.pack("<H", len(nb)) + nb
    buf += struct.pack("<BB", DTYPE_SPARSE_F32, len(rec.shape))
    buf += struct.pack(f"<{len(rec.shape)}I", *rec.shape)
    buf += struct.pack("<Q", rec.nnz)
    buf += rec.indices.astype("<u4", copy=False).tobytes()
    buf += rec.values.astype("<f4", copy=False).tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.context = "header"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"file ended while reading {self.context} "
                f"(needed {n} bytes at offset {self.pos}, have {len(self.data)})"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _decode_records(r: _Reader) -> dict[str, np.ndarray | SparseRecord]:
    count = r.u32()
    out: dict[str, np.ndarray | SparseRecord] = {}
    for i in range(count):
        r.context = f"tensor #{i} header"
        name_len = r.u16()
        if name_len == 0 or name_len > _MAX_NAME:
            raise CheckpointFormatError(f"tensor #{i}: implausible name length {name_len}")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"tensor #{i}: name is not valid UTF-8") from exc
        r.context = f"tensor {name!r}"
        code = r.u8()
        rank = r.u8()
        if rank > _MAX_RANK:
            raise CheckpointFormatError(f"tensor {name!r}: implausible rank {rank}")
        dims = tuple(r.u32() for _ in range(rank))
        size = 1
        for d in dims:
            size *= d
        if code in (DTYPE_F32, DTYPE_F64):
            itemsize = 4 if code == DTYPE_F32 else 8
            if size * itemsize > len(r.data) - r.pos:
                raise CheckpointTruncatedError(
                    f"tensor {name!r}: declared payload {size * itemsize} bytes "
                    f"exceeds remaining file"
                )
            raw = r.take(size * itemsize)
            dt = "<f4" if code == DTYPE_F32 else "<f8"
            out[name] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
        elif code == DTYPE_SPARSE_F32:
            nnz = r.u64()
            if nnz > size or nnz * 8 > len(r.data) - r.pos:
                raise CheckpointFormatError(f"tensor {name!r}: implausible nnz {nnz}")
            idx = np.frombuffer(r.take(4 * nnz), dtype="<u4").copy()
            vals = np.frombuffer(r.take(4 * nnz), dtype="<f4").copy()
            try:
                out[name] = SparseRecord(idx, vals, dims)
            except Exception as exc:
                raise CheckpointFormatError(f"tensor {name!r}: {exc}") from exc
        else:
            raise CheckpointFormatError(f"tensor {name!r}: unknown dtype code {code}")
    return out


def _encode_manifest(manifest: dict[str, str]) -> bytes:
    lines = []
    for key in sorted(manifest):
        value = str(manifest[key])
        if "=" in key or "\n" in key or "\n" in value:
            raise CheckpointFormatError(f"manifest entry {key!r} contains forbidden characters")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def _decode_manifest(raw: bytes) -> dict[str, str]:
    manifest: dict[str, str] = {}
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError("manifest is not valid UTF-8") from exc
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointFormatError(f"manifest line without '=': {line!r}")
        key, value = line.split("=", 1)
        manifest[key] = value
    return manifest


def write_records(path: str, records: dict[str, np.ndarray | SparseRecord],
                  manifest: dict[str, str]) -> int:
    """Serialize named payloads + manifest; returns bytes written."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<I", len(records))
    for name in sorted(records):
        payload = records[name]
        if isinstance(payload, SparseRecord):
            _encode_sparse(buf, name, payload)
        else:
            _encode_dense(buf, name, payload)
    mbytes = _encode_manifest(manifest)
    buf += struct.pack("<I", len(mbytes))
    buf += mbytes
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".wemc-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buf)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(buf)


def read_records(path: str) -> tuple[dict[str, np.ndarray | SparseRecord], dict[str, str]]:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic (expected {MAGIC!r})")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version}")
    records = _decode_records(r)
    r.context = "manifest"
    mlen = r.u32()
    manifest = _decode_manifest(r.take(mlen))
    return records, manifest


def read_manifest(path: str) -> dict[str, str]:
    """Manifest only: walks tensor headers, seeks over payloads."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic (expected {MAGIC!r})")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version}")
    count = r.u32()
    for i in range(count):
        r.context = f"tensor #{i} header"
        name_len = r.u16()
        if name_len == 0 or name_len > _MAX_NAME:
            raise CheckpointFormatError(f"tensor #{i}: implausible name length {name_len}")
        r.take(name_len)
        code = r.u8()
        rank = r.u8()
        if rank > _MAX_RANK:
            raise CheckpointFormatError(f"tensor #{i}: implausible rank {rank}")
        dims = tuple(r.u32() for _ in range(rank))
        size = 1
        for d in dims:
            size *= d
        if code in (DTYPE_F32, DTYPE_F64):
            r.take(size * (4 if code == DTYPE_F32 else 8))
        elif code == DTYPE_SPARSE_F32:
            nnz = r.u64()
            if nnz > size:
                raise CheckpointFormatError(f"tensor #{i}: implausible nnz {nnz}")
            r.take(8 * nnz)
        else:
            raise CheckpointFormatError(f"tensor #{i}: unknown dtype code {code}")
    r.context = "manifest"
    mlen = r.u32()
    return _decode_manifest(r.take(mlen))


# ---------------------------------------------------------------------------
# object-level API


def _config_manifest(config: ViTConfig) -> dict[str, str]:
    return {
        "config.image_size": str(config.image_size),
        "config.patch_size": str(config.patch_size),
        "config.d_model": str(config.d_model),
        "config.n_heads": str(config.n_heads),
        "config.n_blocks": str(config.n_blocks),
        "config.mlp_hidden": str(config.mlp_hidden),
        "config.channels": str(config.channels),
        "config.classes_per_task": ",".join(str(c) for c in config.classes_per_task),
    }


def _config_from_manifest(m: dict[str, str]) -> ViTConfig:
    classes = tuple(int(c) for c in m["config.classes_per_task"].split(",") if c)
    return ViTConfig(
        image_size=int(m["config.image_size"]),
        patch_size=int(m["config.patch_size"]),
        d_model=int(m["config.d_model"]),
        n_heads=int(m["config.n_heads"]),
        n_blocks=int(m["config.n_blocks"]),
        mlp_hidden=int(m["config.mlp_hidden"]),
        channels=int(m["config.channels"]),
        n_tasks=len(classes),
        classes_per_task=classes,
    )


def write_checkpoint(obj, path: str, config: ViTConfig | None = None,
                     extra_manifest: dict[str, str] | None = None) -> int:
    """Serialize a ParamTree, TaskVector or MergedModel; returns byte count."""
    records: dict[str, np.ndarray | SparseRecord] = {}
    manifest: dict[str, str] = dict(extra_manifest or {})
    if isinstance(obj, MergedModel):
        manifest["kind"] = "merged"
        manifest.update(_config_manifest(obj.config))
        manifest.update({
            "strategy": obj.strategy,
            "rho": repr(obj.rho),
            "l_fc": str(obj.l_fc),
            "shared_router": str(obj.shared_router).lower(),
            "lambda_init": repr(obj.lambda_init),
            "seed": str(obj.seed),
            "n_moe": str(len(obj.modules)),
            "n_tasks": str(obj.n_tasks),
            "n_heads": str(len(obj.heads)),
        })
        for name, t in obj.static_tree.items():
            records[f"static.{name}"] = t.data
        for i, mod in enumerate(obj.modules):
            manifest[f"moe.{i}.kind"] = mod.kind
            manifest[f"moe.{i}.layer"] = str(mod.layer)
            for name, arr in mod.base.items():
                records[f"moe.{i}.base.{name}"] = arr
            for t, entry in enumerate(mod.entries):
                for name, rec in entry.items():
                    key = f"moe.{i}.dict.{t}.{name}"
                    records[key] = rec if mod.sparse else rec.to_dense()
        for rname, tensor in obj.router_tensors().items():
            records[rname] = tensor.data
        for head in obj.heads:
            records[f"head.{head.task_id}.w"] = head.w.data
            records[f"head.{head.task_id}.b"] = head.b.data
    elif isinstance(obj, TaskVector):
        manifest["kind"] = "taskvector"
        manifest["task_id"] = str(obj.task_id)
        if config is not None:
            manifest.update(_config_manifest(config))
        for name, t in obj.tree.items():
            records[name] = t.data
    elif isinstance(obj, dict):
        manifest.setdefault("kind", "tree")
        if config is not None:
            manifest.update(_config_manifest(config))
        for name, t in obj.items():
            records[name] = t.data if isinstance(t, Tensor) else np.asarray(t)
    else:
        raise CheckpointFormatError(f"cannot serialize object of type {type(obj).__name__}")
    return write_records(path, records, manifest)


def _as_record(payload, dense_dtype=None) -> SparseRecord:
    if isinstance(payload, SparseRecord):
        return payload
    flat = payload.ravel()
    return SparseRecord(np.arange(flat.size, dtype=np.uint32), flat.copy(), payload.shape)


def read_checkpoint(path: str):
    """Inverse of write_checkpoint; returns (object, manifest)."""
    records, manifest = read_records(path)
    kind = manifest.get("kind", "tree")
    if kind == "tree":
        tree: ParamTree = {}
        for name, payload in records.items():
            if isinstance(payload, SparseRecord):
                payload = payload.to_dense()
            tree[name] = Tensor(payload, dtype=payload.dtype)
        return tree, manifest
    if kind == "taskvector":
        tree = {}
        for name, payload in records.items():
            if isinstance(payload, SparseRecord):
                payload = payload.to_dense()
            tree[name] = Tensor(payload, dtype=payload.dtype)
        return TaskVector(int(manifest.get("task_id", 0)), tree), manifest
    if kind == "merged":
        return _read_merged(records, manifest), manifest
    raise CheckpointFormatError(f"unknown checkpoint kind {manifest.get('kind')!r}")


def _read_merged(records, manifest) -> MergedModel:
    try:
        config = _config_from_manifest(manifest)
        n_moe = int(manifest["n_moe"])
        n_tasks = int(manifest["n_tasks"])
        rho = float(manifest["rho"])
        l_fc = int(manifest["l_fc"])
        shared = manifest["shared_router"] == "true"
        lambda_init = float(manifest["lambda_init"])
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"merged checkpoint manifest incomplete: {exc}") from exc

    static_tree: ParamTree = {}
    for name, payload in records.items():
        if name.startswith("static."):
            static_tree[name[len("static."):]] = Tensor(payload, dtype=payload.dtype)

    shared_router: RouterParams | None = None
    if shared:
        tensors = {
            name.split(".")[-1]: Tensor(records[name], dtype=records[name].dtype,
                                        requires_grad=False)
            for name in records if name.startswith("router.shared.")
        }
        hidden = tensors["b0"].shape[0] if ("b0" in tensors and l_fc == 2) else config.d_model
        shared_router = RouterParams(l_fc, n_tasks, config.d_model, hidden, tensors)

    modules: list[MoEModule] = []
    for i in range(n_moe):
        kind = manifest[f"moe.{i}.kind"]
        layer = int(manifest[f"moe.{i}.layer"])
        names = tuple(f"blocks.{layer}.{s}" for s in KIND_TENSORS[kind])
        base = {}
        for name in names:
            key = f"moe.{i}.base.{name}"
            if key not in records:
                raise CheckpointFormatError(f"merged checkpoint missing tensor {key!r}")
            base[name] = np.asarray(records[key])
        entries = []
        for t in range(n_tasks):
            entry = {}
            for name in names:
                key = f"moe.{i}.dict.{t}.{name}"
                if key not in records:
                    raise CheckpointFormatError(f"merged checkpoint missing tensor {key!r}")
                entry[name] = _as_record(records[key])
            entries.append(entry)
        if shared_router is not None:
            router = shared_router
        else:
            tensors = {
                name.split(".")[-1]: Tensor(records[name], dtype=records[name].dtype)
                for name in records if name.startswith(f"moe.{i}.router.")
            }
            hidden = tensors["b0"].shape[0] if ("b0" in tensors and l_fc == 2) else config.d_model
            router = RouterParams(l_fc, n_tasks, config.d_model, hidden, tensors)
        statics: dict[str, Tensor] = {}
        if kind == "mlp":
            statics = {f"ln2.{p}": static_tree[f"blocks.{layer}.ln2.{p}"] for p in ("gamma", "beta")}
        elif kind == "att":
            statics = {f"ln1.{p}": static_tree[f"blocks.{layer}.ln1.{p}"] for p in ("gamma", "beta")}
        modules.append(MoEModule(kind=kind, layer=layer, names=names, base=base,
                                 entries=entries, router=router, statics=statics,
                                 sparse=rho > 0.0))

    heads = []
    for t in range(int(manifest.get("n_heads", "0"))):
        w = records.get(f"head.{t}.w")
        b = records.get(f"head.{t}.b")
        if w is None or b is None:
            raise CheckpointFormatError(f"merged checkpoint missing head {t}")
        heads.append(TaskHead(t, Tensor(w, dtype=w.dtype), Tensor(b, dtype=b.dtype)))

    return MergedModel(
        config=config, strategy=manifest["strategy"], lambda_init=lambda_init,
        rho=rho, l_fc=l_fc, shared_router=shared, static_tree=static_tree,
        modules=modules, heads=heads, seed=int(manifest.get("seed", "0")),
    )
