"""Typed messages of the training cluster and their binary wire format.

Frame layout: little-endian u32 payload length, u8 variant tag, then the
payload, which always starts with u32 iteration and u32 sender id. Ids and
keys are u32; numeric payloads travel as float64 so that a distributed run
is numerically indistinguishable from a single-process one.

Metered sizes follow the production accounting convention of 4 bytes per
feature element (the 32-bit feature wire encoding); they are exact, documented
functions of the message content, identical on the sending and receiving
side:

    EmbedRequest              13 + 4 + 4n
    EmbedResponse / GradPush  13 + 8 + 4n + 4nd
    IdParamPull               13 + 4 + 8n
    IdParamResponse / Push    13 + 8 + 8n + 4nd
    ServerSync / WorkerSync   13 + 4 + sum(6 + len(name) + 4 * numel)
    Barrier                   13

where 13 is the frame header (length + tag + iteration + sender).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CAT_IMAGE_FEATURE = "image-feature"
CAT_IMAGE_EMBEDDING = "image-embedding"
CAT_ID_PARAM = "id-param"
CAT_MODEL_SYNC = "model-sync"
CAT_SAMPLE_DATA = "sample-data"
CATEGORIES = (CAT_IMAGE_FEATURE, CAT_IMAGE_EMBEDDING, CAT_ID_PARAM,
              CAT_MODEL_SYNC, CAT_SAMPLE_DATA)

HEADER_BYTES = 13


class ProtocolError(RuntimeError):
    pass


@dataclass
class EmbedRequest:
    iteration: int
    sender: int
    ids: np.ndarray  # u32 image ids

    tag = 1
    category = CAT_IMAGE_EMBEDDING

    def metered_size(self):
        return HEADER_BYTES + 4 + 4 * len(self.ids)


@dataclass
class EmbedResponse:
    iteration: int
    sender: int
    ids: np.ndarray
    vectors: np.ndarray  # [n, d] float64

    tag = 2
    category = CAT_IMAGE_EMBEDDING

    def metered_size(self):
        return HEADER_BYTES + 8 + 4 * len(self.ids) + 4 * self.vectors.size


@dataclass
class EmbedGradPush(EmbedResponse):
    tag = 3
    category = CAT_IMAGE_EMBEDDING


@dataclass
class IdParamPull:
    iteration: int
    sender: int
    keys: np.ndarray  # [n, 2] (field index, id)

    tag = 4
    category = CAT_ID_PARAM

    def metered_size(self):
        return HEADER_BYTES + 4 + 8 * len(self.keys)


@dataclass
class IdParamResponse:
    iteration: int
    sender: int
    keys: np.ndarray
    vectors: np.ndarray

    tag = 5
    category = CAT_ID_PARAM

    def metered_size(self):
        return HEADER_BYTES + 8 + 8 * len(self.keys) + 4 * self.vectors.size


@dataclass
class IdParamPush(IdParamResponse):
    tag = 6
    category = CAT_ID_PARAM


@dataclass
class ServerSync:
    iteration: int
    sender: int
    grads: dict  # name -> float64 array

    tag = 7
    category = CAT_MODEL_SYNC

    def metered_size(self):
        return HEADER_BYTES + 4 + sum(
            6 + len(n.encode()) + 4 * g.size for n, g in self.grads.items()
        )


@dataclass
class WorkerSync(ServerSync):
    tag = 8
    category = CAT_MODEL_SYNC


@dataclass
class Barrier:
    iteration: int
    sender: int

    tag = 9
    category = CAT_MODEL_SYNC

    def metered_size(self):
        return HEADER_BYTES


_BY_TAG = {cls.tag: cls for cls in
           (EmbedRequest, EmbedResponse, EmbedGradPush, IdParamPull,
            IdParamResponse, IdParamPush, ServerSync, WorkerSync, Barrier)}


def _pack_ids(ids):
    a = np.ascontiguousarray(ids, dtype="<u4")
    return struct.pack("<I", a.size) + a.tobytes()


def _pack_matrix(m):
    a = np.ascontiguousarray(m, dtype="<f8")
    return a.tobytes()


def encode(msg):
    head = struct.pack("<II", msg.iteration, msg.sender)
    if isinstance(msg, EmbedRequest):
        body = _pack_ids(msg.ids)
    elif isinstance(msg, (EmbedResponse, EmbedGradPush)):
        d = msg.vectors.shape[1] if msg.vectors.ndim == 2 else 0
        body = _pack_ids(msg.ids) + struct.pack("<I", d) + _pack_matrix(msg.vectors)
    elif isinstance(msg, IdParamPull):
        body = _pack_ids(np.asarray(msg.keys).reshape(-1))
    elif isinstance(msg, (IdParamResponse, IdParamPush)):
        d = msg.vectors.shape[1] if msg.vectors.ndim == 2 else 0
        body = (_pack_ids(np.asarray(msg.keys).reshape(-1))
                + struct.pack("<I", d) + _pack_matrix(msg.vectors))
    elif isinstance(msg, (ServerSync, WorkerSync)):
        parts = [struct.pack("<I", len(msg.grads))]
        for name in sorted(msg.grads):
            nb = name.encode()
            g = np.ascontiguousarray(msg.grads[name], dtype="<f8")
            parts.append(struct.pack("<HI", len(nb), g.size) + nb + g.tobytes())
        body = b"".join(parts)
    elif isinstance(msg, Barrier):
        body = b""
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    payload = head + body
    return struct.pack("<IB", len(payload) + 1, msg.tag) + payload


def decode(frame):
    if len(frame) < 5:
        raise ProtocolError("truncated frame")
    length, tag = struct.unpack_from("<IB", frame)
    if length + 4 != len(frame):
        raise ProtocolError(f"frame length {length} does not match {len(frame) - 4}")
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise ProtocolError(f"unknown message tag {tag}")
    off = 5
    iteration, sender = struct.unpack_from("<II", frame, off)
    off += 8

    def take_ids():
        nonlocal off
        (n,) = struct.unpack_from("<I", frame, off)
        off += 4
        ids = np.frombuffer(frame, dtype="<u4", count=n, offset=off).astype(np.int64)
        off += 4 * n
        return ids

    def take_matrix(n):
        nonlocal off
        (d,) = struct.unpack_from("<I", frame, off)
        off += 4
        m = np.frombuffer(frame, dtype="<f8", count=n * d, offset=off).reshape(n, d).copy()
        off += 8 * n * d
        return m

    if cls is EmbedRequest:
        return EmbedRequest(iteration, sender, take_ids())
    if cls in (EmbedResponse, EmbedGradPush):
        ids = take_ids()
        return cls(iteration, sender, ids, take_matrix(len(ids)))
    if cls is IdParamPull:
        flat = take_ids()
        return IdParamPull(iteration, sender, flat.reshape(-1, 2))
    if cls in (IdParamResponse, IdParamPush):
        flat = take_ids()
        keys = flat.reshape(-1, 2)
        return cls(iteration, sender, keys, take_matrix(len(keys)))
    if cls in (ServerSync, WorkerSync):
        (count,) = struct.unpack_from("<I", frame, off)
        off += 4
        grads = {}
        for _ in range(count):
            nlen, size = struct.unpack_from("<HI", frame, off)
            off += 6
            name = frame[off : off + nlen].decode()
            off += nlen
            grads[name] = np.frombuffer(frame, dtype="<f8", count=size, offset=off).copy()
            off += 8 * size
        return cls(iteration, sender, grads)
    return Barrier(iteration, sender)


class TrafficMeter:
    """Cumulative byte counters by (category, link) plus storage by group.

    Byte counts use the documented 4-bytes-per-feature convention; a link is
    the sender/receiver kind pair, e.g. ``worker->server``.
    """

    def __init__(self):
        self.sent = {}
        self.received = {}
        self.storage = {}

    def _bump(self, table, category, link, size):
        key = (category, link)
        table[key] = table.get(key, 0) + size

    def record_send(self, msg, link):
        self._bump(self.sent, msg.category, link, msg.metered_size())

    def record_receive(self, msg, link):
        self._bump(self.received, msg.category, link, msg.metered_size())

    def add_storage(self, group, nbytes):
        self.storage[group] = self.storage.get(group, 0) + int(nbytes)

    def sent_total(self, category=None):
        return sum(v for (c, _), v in self.sent.items() if category in (None, c))

    def received_total(self, category=None):
        return sum(v for (c, _), v in self.received.items() if category in (None, c))
