"""Closed-form storage and communication accounting for the three placement
strategies, computed from batch statistics without running training.

Conventions (all counts in bytes, 4 per integer id and 4 per 32-bit feature
element; request/key overhead and model synchronization are excluded so every
cell is a short closed form over the batch):

    image refs      R   = sum over samples of (1 + #behavior images)
    unique images   U   = distinct image ids in the batch
    unique id keys  K   = distinct (field, id) pairs in the batch
    sample bytes    S   = 4 * sum over samples of (7 + #behavior items
                          + #behavior images)

    worker storage:  S, plus R * d_raw * 4 when features ride inside samples
    server storage:  0 for store-in-worker, else
                     store_images * d_raw * 4 + sum(vocab_f) * d_id * 4
    image comm:      store-in-worker 0; store-in-server R * d_raw * 4
                     (key-value fetch per reference); ams U * d_img * 4
                     (each distinct image embedded once, compact embedding)
    all comm:        image comm + K * d_id * 4 * 2 (params down, grads up)

The per-image compression of ams over store-in-server is d_raw / d_img.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import sample_int_count

MODES = ("store-in-worker", "store-in-server", "ams")


@dataclass
class BatchStats:
    samples: int
    sample_bytes: int
    image_refs: int
    unique_images: int
    id_refs: int
    unique_id_keys: int


def batch_stats(samples, schema):
    """Reference and uniqueness counts of one batch under a schema."""
    image_ids = set()
    id_keys = set()
    refs = 0
    id_refs = 0
    for s in samples:
        refs += 1 + len(s.behavior_images)
        image_ids.add(s.ad_image)
        image_ids.update(s.behavior_images)
        for f in schema.fields:
            v = getattr(s, f.name)
            ids = v if f.multi else [v]
            id_refs += len(ids)
            id_keys.update((f.name, i) for i in ids)
    return BatchStats(
        samples=len(samples),
        sample_bytes=4 * sum(sample_int_count(s) for s in samples),
        image_refs=refs,
        unique_images=len(image_ids),
        id_refs=id_refs,
        unique_id_keys=len(id_keys),
    )


def id_param_bytes(schema):
    return sum(f.vocab for f in schema.fields) * schema.d_id * 4


@dataclass
class StorageReport:
    mode: str
    worker_storage: int
    server_storage: int
    comm_all: int
    comm_image: int


def accounting(samples, schema, store_images, mode):
    """One table row: storage and per-batch communication for a strategy."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; use one of {MODES}")
    st = batch_stats(samples, schema)
    feature_bytes = schema.d_raw * 4
    if mode == "store-in-worker":
        worker = st.sample_bytes + st.image_refs * feature_bytes
        server = 0
        comm_image = 0
    elif mode == "store-in-server":
        worker = st.sample_bytes
        server = store_images * feature_bytes + id_param_bytes(schema)
        comm_image = st.image_refs * feature_bytes
    else:
        worker = st.sample_bytes
        server = store_images * feature_bytes + id_param_bytes(schema)
        comm_image = st.unique_images * schema.d_img * 4
    comm_id = st.unique_id_keys * schema.d_id * 4 * 2
    return StorageReport(mode, worker, server, comm_id + comm_image, comm_image)


def accounting_table(samples, schema, store_images):
    """All three strategies on the same batch, in the canonical row order."""
    return [accounting(samples, schema, store_images, m) for m in MODES]


def compression_ratio(schema):
    """Per-image bytes of store-in-server over ams: d_raw / d_img."""
    return schema.d_raw / schema.d_img
