"""Synthetic union-of-subspaces token datasets and the nearest-subspace oracle.

Each class owns a random orthonormal basis; every sample is a bag of tokens
``U_c a + sigma w`` drawn from that class's subspace plus isotropic noise.
The oracle classifier projects a sample's tokens onto every class basis and
picks the class with the largest total projection energy; its accuracy
certifies that the dataset is separable before any model trains on it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInput
from .rng import orthonormal_basis, stream


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Geometry of the sampled dataset."""

    num_classes: int = 4
    ambient_dim: int = 32
    subspace_dim: int = 4
    noise_sigma: float = 0.05
    tokens_per_sample: int = 16
    samples_per_class: int = 128

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise InvalidInput(f"num_classes must be positive, got {self.num_classes}")
        if not 1 <= self.subspace_dim <= self.ambient_dim:
            raise InvalidInput(
                f"subspace_dim {self.subspace_dim} must lie in [1, {self.ambient_dim}]"
            )
        if self.noise_sigma < 0:
            raise InvalidInput(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if self.tokens_per_sample < 1 or self.samples_per_class < 1:
            raise InvalidInput("tokens_per_sample and samples_per_class must be positive")


@dataclass(frozen=True)
class TokenDataset:
    """Sampled tokens ``(N, n, d)``, integer labels ``(N,)``, and the true bases."""

    tokens: np.ndarray
    labels: np.ndarray
    bases: np.ndarray  # (num_classes, ambient_dim, subspace_dim)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def generate_synthetic(spec: SyntheticDatasetSpec, seed: int, split: str = "train") -> TokenDataset:
    """Draw a dataset deterministically from ``(seed, split)``.

    The class bases depend on the seed only, so different splits of the same
    seed share geometry while their token draws never overlap.
    """
    basis_rng = stream(seed, "data-bases")
    bases = np.stack(
        [orthonormal_basis(basis_rng, spec.ambient_dim, spec.subspace_dim)
         for _ in range(spec.num_classes)]
    )
    draw_rng = stream(seed, f"data-tokens-{split}")
    N = spec.num_classes * spec.samples_per_class
    tokens = np.empty((N, spec.tokens_per_sample, spec.ambient_dim))
    labels = np.empty(N, dtype=np.int64)
    idx = 0
    for c in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            coeffs = draw_rng.normal(size=(spec.subspace_dim, spec.tokens_per_sample))
            noise = draw_rng.normal(size=(spec.ambient_dim, spec.tokens_per_sample))
            sample = bases[c] @ coeffs + spec.noise_sigma * noise
            tokens[idx] = sample.T
            labels[idx] = c
            idx += 1
    return TokenDataset(tokens=tokens, labels=labels, bases=bases)


def nearest_subspace_predict(tokens: np.ndarray, bases: np.ndarray) -> np.ndarray:
    """Oracle labels: per sample, the basis capturing the most projection energy."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3:
        raise InvalidInput(f"tokens must be (N, n, d), got ndim={tokens.ndim}")
    # energy[c, s] = sum over tokens and directions of squared projections
    energy = np.stack([np.sum((tokens @ U) ** 2, axis=(1, 2)) for U in bases])
    return np.argmax(energy, axis=0)


def nearest_subspace_accuracy(ds: TokenDataset) -> float:
    """Accuracy of the nearest-subspace oracle on its own dataset."""
    pred = nearest_subspace_predict(ds.tokens, ds.bases)
    return float(np.mean(pred == ds.labels))


def load_token_dataset(directory: str, split: str) -> TokenDataset:
    """Load ``<split>.npz`` with arrays ``tokens`` (N, n, d) and ``labels`` (N,).

    An optional ``bases`` array enables the oracle; otherwise it is stored
    as an empty array and oracle queries are invalid.
    """
    path = os.path.join(directory, f"{split}.npz")
    if not os.path.exists(path):
        raise FormatError(f"dataset file not found: {path}")
    with np.load(path) as archive:
        if "tokens" not in archive or "labels" not in archive:
            raise FormatError(f"{path} must contain 'tokens' and 'labels' arrays")
        tokens = np.asarray(archive["tokens"], dtype=np.float64)
        labels = np.asarray(archive["labels"], dtype=np.int64)
        bases = np.asarray(archive["bases"], dtype=np.float64) if "bases" in archive else np.empty((0, 0, 0))
    if tokens.ndim != 3 or labels.shape != (tokens.shape[0],):
        raise FormatError(f"{path} arrays have inconsistent shapes")
    return TokenDataset(tokens=tokens, labels=labels, bases=bases)


def save_token_dataset(directory: str, split: str, ds: TokenDataset) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"{split}.npz")
    np.savez(path, tokens=ds.tokens, labels=ds.labels, bases=ds.bases)
    return path
