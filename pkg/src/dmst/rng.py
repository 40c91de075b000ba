"""Deterministic random streams.

Every stochastic component draws from a named Philox stream derived from a
single integer seed. Philox is counter based, so streams with different
labels never overlap and the draw sequence is reproducible bit-for-bit for
a given (seed, label) pair regardless of how many other streams were used.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, label: str) -> np.random.Generator:
    """Return the generator for the stream named ``label`` under ``seed``.

    The label is folded into the Philox key through a CRC32 spawn key, which
    is stable across processes and platforms (unlike ``hash``).
    """
    key = zlib.crc32(label.encode("utf-8"))
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(seq))


def orthonormal_basis(rng: np.random.Generator, dim: int, rank: int) -> np.ndarray:
    """Draw a uniformly random ``dim x rank`` matrix with orthonormal columns."""
    if rank > dim:
        raise ValueError(f"rank {rank} exceeds ambient dimension {dim}")
    gauss = rng.normal(size=(dim, rank))
    q, r = np.linalg.qr(gauss)
    # Fix the sign ambiguity of QR so the basis is a canonical function of the draw.
    return q * np.sign(np.diag(r))[None, :]
