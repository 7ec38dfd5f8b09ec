"""Adam with bias correction and the step-decay learning-rate schedule.

Updates are skipped entirely when a gradient is identically zero, so
parameters that did not take part in an iteration (untouched embedding rows,
unused attention nets) keep both their value and their moment state. Rows of
embedding tables carry independent moment/step state so sharded and
single-process training apply bit-identical updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LR0 = 0.001
BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
DECAY = 0.9
DECAY_INTERVAL = 24000


def lr_schedule(iteration, lr0=LR0, decay=DECAY, interval=DECAY_INTERVAL):
    """lr0 * decay^floor(iteration / interval); piecewise constant."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return lr0 * decay ** (iteration // interval)


@dataclass
class AdamState:
    """First/second moment and step count for one dense parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, value):
        return cls(np.zeros_like(value), np.zeros_like(value))


def adam_step(value, grad, state, lr, beta1=BETA1, beta2=BETA2, eps=EPS):
    """Bias-corrected Adam update of ``value`` in place.

    Raises on non-finite gradients without touching the parameter; an
    all-zero gradient is a no-op (value and state untouched).
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != value.shape:
        raise ValueError(f"adam: grad shape {grad.shape} != param shape {value.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("adam: non-finite gradient, parameter untouched")
    if not grad.any():
        return value
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return value


@dataclass
class RowAdamState:
    """Per-row Adam state for an embedding table [V, d]."""

    m: np.ndarray
    v: np.ndarray
    t: np.ndarray = field(default=None)

    @classmethod
    def like(cls, table):
        return cls(
            np.zeros_like(table),
            np.zeros_like(table),
            np.zeros(table.shape[0], dtype=np.int64),
        )


def adam_step_rows(table, row_ids, row_grads, state, lr, beta1=BETA1, beta2=BETA2, eps=EPS):
    """Adam update of selected table rows, each with its own step counter.

    Rows whose gradient is identically zero are skipped. ``row_ids`` must not
    contain duplicates (sum duplicate contributions before calling).
    """
    row_grads = np.asarray(row_grads, dtype=np.float64)
    if not np.all(np.isfinite(row_grads)):
        raise FloatingPointError("adam: non-finite row gradient, table untouched")
    for rid, g in zip(row_ids, row_grads):
        if not g.any():
            continue
        state.t[rid] += 1
        # plain int exponent: numpy's integer-power path rounds differently
        # from libm pow, and sharded updates must match this bit for bit
        t = int(state.t[rid])
        state.m[rid] = beta1 * state.m[rid] + (1.0 - beta1) * g
        state.v[rid] = beta2 * state.v[rid] + (1.0 - beta2) * g * g
        m_hat = state.m[rid] / (1.0 - beta1 ** t)
        v_hat = state.v[rid] / (1.0 - beta2 ** t)
        table[rid] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return table
