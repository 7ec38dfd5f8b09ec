"""Image latents, the frozen feature extractor, and the binary matrix format.

Every image id owns a latent vector drawn once at dataset creation. The
frozen extractor turns a latent into the high-dimensional raw feature that
the trainable embedding net compresses; it is a seeded random linear map
followed by tanh, so features are deterministic functions of (seed, latent).

Latents are stored as little-endian float32 both in memory and on disk, which
makes the file round-trip bit-exact; raw features are computed in float64.
"""

from __future__ import annotations

import struct

import numpy as np

MATRIX_MAGIC = b"FMX1"
MATRIX_VERSION = 1


def write_matrix_f32(path, array):
    """Write a 2-D float32 matrix: 16-byte header (magic, version, rows,
    cols) followed by little-endian float32 values row-major."""
    a = np.ascontiguousarray(array, dtype="<f4")
    if a.ndim != 2:
        raise ValueError(f"matrix file requires a 2-D array, got shape {a.shape}")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<III", MATRIX_VERSION, a.shape[0], a.shape[1]))
        fh.write(a.tobytes())


def read_matrix_f32(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MATRIX_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MATRIX_MAGIC!r}")
        version, rows, cols = struct.unpack("<III", fh.read(12))
        if version != MATRIX_VERSION:
            raise ValueError(f"{path}: unsupported matrix version {version}")
        payload = fh.read(rows * cols * 4)
        if len(payload) != rows * cols * 4:
            raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()


class FixedExtractor:
    """Frozen map latent -> raw feature: tanh(latent @ R.T) with a seeded R.

    Stands in for a pretrained convolutional feature stack: high-dimensional,
    deterministic, never updated by training.
    """

    def __init__(self, seed, latent_dim, out_dim):
        self.seed = int(seed)
        self.latent_dim = int(latent_dim)
        self.out_dim = int(out_dim)
        rng = np.random.default_rng(self.seed)
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), (out_dim, latent_dim))

    def extract(self, latents):
        """latents [k, latent_dim] (any float dtype) -> features [k, out_dim] f64."""
        z = np.asarray(latents, dtype=np.float64)
        if z.ndim == 1:
            z = z[None, :]
        if z.shape[1] != self.latent_dim:
            raise ValueError(
                f"extractor expects latent dim {self.latent_dim}, got {z.shape[1]}"
            )
        return np.tanh(z @ self.weight.T)


class ImageFeatureStore:
    """Latent vectors for a dense id range [0, n); raw features on demand."""

    def __init__(self, latents):
        self.latents = np.ascontiguousarray(latents, dtype=np.float32)
        if self.latents.ndim != 2:
            raise ValueError("image store expects a 2-D latent matrix")

    def __len__(self):
        return self.latents.shape[0]

    @property
    def latent_dim(self):
        return self.latents.shape[1]

    def _check_ids(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            bad = ids[(ids < 0) | (ids >= len(self))][0]
            raise KeyError(f"unknown image id {bad} (store holds 0..{len(self) - 1})")
        return ids

    def latents_for(self, ids):
        return self.latents[self._check_ids(ids)]

    def raw_features(self, ids, extractor):
        """fixed_extract for a batch of ids: bit-stable across calls."""
        return extractor.extract(self.latents_for(ids))

    def save(self, path):
        write_matrix_f32(path, self.latents)

    @classmethod
    def load(cls, path):
        return cls(read_matrix_f32(path))
