"""Inference export: precomputed image embeddings behind a key-value lookup.

After training, every image in the store is pushed through the frozen
embedding net once; prediction then treats image vectors exactly like ID
embeddings. Ids missing from the table (images that appeared after export)
fall back to embedding on the fly with the exported net, so fresh images
still score sensibly where fresh IDs cannot.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .images import read_matrix_f32, write_matrix_f32
from .model import encode_batch


class InferenceTable:
    """Dense id -> embedding map: row index is the image id."""

    def __init__(self, embeddings):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)

    def __len__(self):
        return self.embeddings.shape[0]

    def lookup(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            raise KeyError("image id outside the exported table")
        return self.embeddings[ids]

    def save(self, path):
        write_matrix_f32(path, self.embeddings)

    @classmethod
    def load(cls, path):
        return cls(read_matrix_f32(path).astype(np.float64))


def export_inference(model, store):
    """Embed every image id in the store with the trained net."""
    ids = np.arange(len(store), dtype=np.int64)
    raw = store.raw_features(ids, model.extractor)
    return InferenceTable(model.embed_images(raw))


class KvPredictor:
    """Scores samples from frozen parameters plus the exported table.

    The live embedding net is kept only for the cold path: ids beyond the
    table are extracted and embedded on the fly from the store's latents.
    """

    def __init__(self, model, table, store):
        self.model = model
        self.table = table
        self.store = store

    def _embedding_matrix(self, ids):
        known = ids < len(self.table)
        out = np.empty((len(ids), self.model.schema.d_img))
        if known.any():
            out[known] = self.table.lookup(ids[known])
        cold = ids[~known]
        if cold.size:
            raw = self.store.raw_features(cold, self.model.extractor)
            out[~known] = self.model.embed_images(raw)
        return out

    def predict(self, samples, chunk=1024):
        """(probabilities, logits) for the samples via table lookups."""
        logits = np.empty(len(samples))
        for start in range(0, len(samples), chunk):
            part = samples[start : start + chunk]
            batch = encode_batch(part, self.model)
            matrix = ag.constant(self._embedding_matrix(batch.unique_images))
            node = self.model.logits_graph(batch, matrix, self.model.local_id_rows)
            logits[start : start + len(part)] = node.data
        return 1.0 / (1.0 + np.exp(-logits)), logits
