"""Single-process training and evaluation.

This trainer is the numerical reference for the distributed runtime: one
graph over the whole union batch, the same loss normalization, the same
optimizer semantics (dense parameters step together, embedding-table rows
step independently), the same learning-rate schedule indexed by the global
iteration counter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import metrics, optim
from .data import minibatches
from .model import encode_batch


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 256  # union batch; the cluster splits it across workers
    seed: int = 0
    lr0: float = optim.LR0
    lr_decay: float = optim.DECAY
    lr_interval: int = optim.DECAY_INTERVAL
    max_iterations: int = 0  # 0 = no cap


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)


def batch_loss_graph(model, batch, image_matrix, id_rows_fn, denominator):
    logits = model.logits_graph(batch, image_matrix, id_rows_fn)
    per_sample = ag.sigmoid_cross_entropy(logits, batch.labels)
    return ag.scale(ag.vsum(per_sample), 1.0 / denominator), logits


class LocalTrainer:
    """Trains any model exposing params / logits_graph / table_fields."""

    def __init__(self, model, store, cfg):
        self.model = model
        self.store = store
        self.cfg = cfg
        self.iteration = 0
        self.dense_names = model.worker_param_names() + model.image_param_names()
        self.dense_state = {
            n: optim.AdamState.like(model.params[n].data) for n in self.dense_names
        }
        self.table_state = {
            f: optim.RowAdamState.like(model.params[f"id_emb/{f}"].data)
            for f in model.table_fields()
        }

    def lr(self):
        return optim.lr_schedule(self.iteration, self.cfg.lr0, self.cfg.lr_decay,
                                 self.cfg.lr_interval)

    def train_batch(self, samples):
        model = self.model
        batch = encode_batch(samples, model)
        for p in model.params.values():
            p.grad = None
        loss, _ = batch_loss_graph(
            model, batch, model.local_image_matrix(batch, self.store),
            model.local_id_rows, denominator=batch.size,
        )
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite loss at iteration {self.iteration}")
        ag.backward(loss)
        lr = self.lr()
        for n in self.dense_names:
            p = model.params[n]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            optim.adam_step(p.data, g, self.dense_state[n], lr)
        for f in model.table_fields():
            table = model.params[f"id_emb/{f}"]
            if table.grad is None:
                continue
            ids = batch.unique_field_ids(f)
            optim.adam_step_rows(table.data, ids, table.grad[ids],
                                 self.table_state[f], lr)
        self.iteration += 1
        return float(loss.data)

    def run(self, train_samples, log=None):
        log = log or TrainLog()
        stop = self.cfg.max_iterations or None
        for epoch in range(self.cfg.epochs):
            for batch in minibatches(train_samples, self.cfg.batch_size,
                                     self.cfg.seed, epoch):
                log.lrs.append(self.lr())
                log.losses.append(self.train_batch(batch))
                if stop and self.iteration >= stop:
                    return log
        return log

    def snapshot(self):
        return {n: p.data.copy() for n, p in self.model.params.items()}


def predict_logits(model, samples, store, chunk=1024):
    """Forward-only scores in chunks; no gradients recorded on parameters."""
    out = np.empty(len(samples))
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        batch = encode_batch(part, model)
        node = model.logits_graph(batch, model.local_image_matrix(batch, store),
                                  model.local_id_rows)
        out[start : start + len(part)] = node.data
    return out


def evaluate_ctr(model, samples, store, chunk=1024):
    """AUC / GAUC / log loss of the model on a sample set."""
    z = predict_logits(model, samples, store, chunk)
    probs = 1.0 / (1.0 + np.exp(-z))
    labels = np.array([s.label for s in samples])
    users = np.array([s.user for s in samples])
    return {
        "auc": metrics.auc(probs, labels),
        "gauc": metrics.gauc(users, probs, labels),
        "log_loss": metrics.log_loss(probs, labels),
    }
