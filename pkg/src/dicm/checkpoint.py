"""Checkpoint file format and warm-up restore logic.

Layout (all little-endian):

    magic "DCK1" | u32 version | u32 group count | 32-byte sha256 of the
    rest of the file | u32 meta count | meta entries (u16 len + utf-8 key,
    u16 len + utf-8 value) | groups

Each group: u16 name length + name, u32 tensor count, then per tensor:
u16 name length + name, u8 dtype tag (0 = f64, 1 = i64), u8 ndim,
u32 dims, raw payload. Optimizer state rides along as extra tensors inside
the same group (``<name>#m``, ``#v``, ``#t``), so a restore resumes exactly.

Groups are the warm-up units: id-embeddings, image-embedding-model, mlp,
aggregator-attention. A warm-up mask restores or reinitializes each group as
a whole; reinitialized groups get fresh values from the given seed and a
reset optimizer state.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import optim
from .model import GROUPS, group_of

MAGIC = b"DCK1"
VERSION = 1

RESTORE = "restore"
REINITIALIZE = "reinitialize"


class CheckpointError(ValueError):
    pass


@dataclass
class WarmupMask:
    """Per-group choice between restoring and reinitializing."""

    flags: dict

    def __post_init__(self):
        for g, v in self.flags.items():
            if g not in GROUPS:
                raise CheckpointError(f"unknown parameter group {g!r}")
            if v not in (RESTORE, REINITIALIZE):
                raise CheckpointError(f"bad warm-up flag {v!r} for group {g!r}")

    @classmethod
    def full(cls):
        return cls({g: RESTORE for g in GROUPS})

    @classmethod
    def non(cls):
        return cls({g: REINITIALIZE for g in GROUPS})

    @classmethod
    def partial(cls):
        """Restore everything except the ID embeddings."""
        flags = {g: RESTORE for g in GROUPS}
        flags["id-embeddings"] = REINITIALIZE
        return cls(flags)

    @classmethod
    def named(cls, name):
        try:
            return {"full": cls.full, "non": cls.non, "partial": cls.partial}[name]()
        except KeyError:
            raise CheckpointError(f"unknown warm-up strategy {name!r}") from None

    def restored_groups(self):
        return [g for g in GROUPS if self.flags.get(g, RESTORE) == RESTORE]


def _pack_str(s):
    b = s.encode()
    return struct.pack("<H", len(b)) + b


def _pack_tensor(name, arr):
    if arr.dtype == np.float64:
        tag, payload = 0, np.ascontiguousarray(arr, dtype="<f8").tobytes()
    elif arr.dtype == np.int64:
        tag, payload = 1, np.ascontiguousarray(arr, dtype="<i8").tobytes()
    else:
        raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return _pack_str(name) + struct.pack("<BB", tag, arr.ndim) + dims + payload


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.off = 0

    def unpack(self, fmt):
        out = struct.unpack_from(fmt, self.blob, self.off)
        self.off += struct.calcsize(fmt)
        return out

    def string(self):
        (n,) = self.unpack("<H")
        s = self.blob[self.off : self.off + n].decode()
        self.off += n
        return s

    def tensor(self):
        name = self.string()
        tag, ndim = self.unpack("<BB")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        dtype = "<f8" if tag == 0 else "<i8"
        arr = np.frombuffer(self.blob, dtype=dtype, count=count, offset=self.off)
        self.off += arr.nbytes
        return name, arr.reshape(shape).astype(arr.dtype.newbyteorder("=")).copy()


def optimizer_tensors(optimizer):
    """Flatten optimizer state into checkpoint tensors; accepts a trainer-like
    object (``dense_state`` / ``table_state``) or a prebuilt dict."""
    if isinstance(optimizer, dict):
        return optimizer
    out = {}
    for n, st in optimizer.dense_state.items():
        out[f"{n}#m"] = st.m
        out[f"{n}#v"] = st.v
        out[f"{n}#t"] = np.array(st.t, dtype=np.int64)
    for f, st in optimizer.table_state.items():
        base = f"id_emb/{f}"
        out[f"{base}#m"] = st.m
        out[f"{base}#v"] = st.v
        out[f"{base}#t"] = st.t.astype(np.int64)
    return out


def save(path, model, optimizer=None, meta=None):
    """Write parameters (and optimizer state, when given)."""
    tensors = {n: p.data for n, p in model.params.items()}
    if optimizer is not None:
        tensors.update(optimizer_tensors(optimizer))
    by_group = {}
    for name in sorted(tensors):
        by_group.setdefault(group_of(name.split("#")[0]), []).append(name)
    meta = dict(meta or {})
    body = [struct.pack("<I", len(meta))]
    for k in sorted(meta):
        body.append(_pack_str(k) + _pack_str(str(meta[k])))
    for group in sorted(by_group):
        names = by_group[group]
        body.append(_pack_str(group) + struct.pack("<I", len(names)))
        for n in names:
            body.append(_pack_tensor(n, np.asarray(tensors[n])))
    blob = b"".join(body)
    digest = hashlib.sha256(blob).digest()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", VERSION, len(by_group)))
            fh.write(digest)
            fh.write(blob)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e


@dataclass
class Checkpoint:
    meta: dict
    groups: dict  # group -> {tensor name -> array}

    def tensors(self):
        out = {}
        for tensors in self.groups.values():
            out.update(tensors)
        return out


def load(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    version, n_groups = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = raw[12:44]
    blob = raw[44:]
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file corrupted")
    r = _Reader(blob)
    (n_meta,) = r.unpack("<I")
    meta = {}
    for _ in range(n_meta):
        k = r.string()
        meta[k] = r.string()
    groups = {}
    for _ in range(n_groups):
        group = r.string()
        (count,) = r.unpack("<I")
        tensors = {}
        for _ in range(count):
            name, arr = r.tensor()
            tensors[name] = arr
        groups[group] = tensors
    return Checkpoint(meta, groups)


def _apply_group(model, trainer, tensors, group):
    for name, arr in tensors.items():
        base, _, suffix = name.partition("#")
        if not suffix:
            if name not in model.params:
                raise CheckpointError(
                    f"group {group!r}: model has no parameter {name!r}"
                )
            if model.params[name].data.shape != arr.shape:
                raise CheckpointError(
                    f"group {group!r}: shape mismatch for {name!r}: "
                    f"checkpoint {arr.shape} vs model {model.params[name].data.shape}"
                )
            model.params[name].data[...] = arr
        elif trainer is not None:
            if base.startswith("id_emb/"):
                st = trainer.table_state[base.split("/", 1)[1]]
            else:
                st = trainer.dense_state[base]
            if suffix == "m":
                st.m[...] = arr
            elif suffix == "v":
                st.v[...] = arr
            elif suffix == "t":
                if isinstance(st.t, np.ndarray):
                    st.t[...] = arr
                else:
                    st.t = int(arr)


def load_warmup(path_or_checkpoint, model, mask, fresh_seed, trainer=None):
    """Restore masked groups from the checkpoint into ``model`` and freshly
    reinitialize the rest from ``fresh_seed``.

    Reinitialized groups also reset their optimizer state (when a trainer is
    given). Restoring a group missing from the checkpoint is an error.
    """
    import copy

    ckpt = path_or_checkpoint
    if not isinstance(ckpt, Checkpoint):
        ckpt = load(ckpt)
    reference = copy.copy(model)
    reference.params = {}
    reference.seed = fresh_seed
    reference._build_params()
    present = {g for g in model_groups(model)}
    for group in sorted(present):
        if mask.flags.get(group, RESTORE) == RESTORE:
            if group not in ckpt.groups:
                raise CheckpointError(f"checkpoint has no group {group!r} to restore")
            _apply_group(model, trainer, ckpt.groups[group], group)
        else:
            for name in model.params:
                if group_of(name) == group:
                    model.params[name].data[...] = reference.params[name].data
                    if trainer is None:
                        continue
                    if name.startswith("id_emb/"):
                        f = name.split("/", 1)[1]
                        trainer.table_state[f] = optim.RowAdamState.like(
                            model.params[name].data
                        )
                    elif name in trainer.dense_state:
                        trainer.dense_state[name] = optim.AdamState.like(
                            model.params[name].data
                        )
    return model


def model_groups(model):
    return sorted({group_of(n) for n in model.params})
