"""Synthetic embedding pairs with known structure, for helpers and tests."""

from typing import Tuple

import numpy as np

from spec_compare.io_model import EmbeddingSet, PairedDataset, pair


def _ids(n: int):
    return tuple(f"s{i}" for i in range(n))


def planted_pair(n: int = 500, d: int = 32, block_fraction: float = 0.1, seed: int = 0,
                 rest_scale: float = 0.3) -> Tuple[PairedDataset, np.ndarray]:
    """
    Embedding A separates a planted block along its first coordinate
    (block rows ~ 10 e_0 + small noise, other rows live in the remaining
    coordinates); embedding B is isotropic noise for every sample.
    Returns the pair and the sorted block indices.
    """
    rng = np.random.default_rng(seed)
    block = np.sort(rng.choice(n, size=max(1, int(round(block_fraction * n))), replace=False))
    in_block = np.zeros(n, dtype=bool)
    in_block[block] = True

    A = np.zeros((n, d))
    A[in_block, 0] = 10.0
    A[in_block, 1:] = 0.1 * rng.standard_normal((in_block.sum(), d - 1))
    A[~in_block, 1:] = rest_scale * rng.standard_normal(((~in_block).sum(), d - 1))
    B = rng.standard_normal((n, d))

    ids = _ids(n)
    return pair(EmbeddingSet(ids=ids, data=A), EmbeddingSet(ids=ids, data=B)), block


def random_pair(n: int, d1: int, d2: int, seed: int = 0) -> PairedDataset:
    rng = np.random.default_rng(seed)
    ids = _ids(n)
    return pair(
        EmbeddingSet(ids=ids, data=rng.standard_normal((n, d1))),
        EmbeddingSet(ids=ids, data=rng.standard_normal((n, d2))),
    )


def blob_pair(n: int = 500, d: int = 8, centers: int = 4, spread: float = 0.5, seed: int = 0) -> PairedDataset:
    """Two Gaussian-blob embeddings of the same samples that group them differently."""
    rng = np.random.default_rng(seed)
    groups_a = rng.integers(0, centers, size=n)
    groups_b = (groups_a + rng.integers(0, 2, size=n)) % centers
    centers_a = 2.0 * rng.standard_normal((centers, d))
    centers_b = 2.0 * rng.standard_normal((centers, d))
    ids = _ids(n)
    return pair(
        EmbeddingSet(ids=ids, data=centers_a[groups_a] + spread * rng.standard_normal((n, d))),
        EmbeddingSet(ids=ids, data=centers_b[groups_b] + spread * rng.standard_normal((n, d))),
    )


def normalized_kernel(n: int, rank: int, seed: int = 0) -> np.ndarray:
    """Random PSD kernel matrix with unit diagonal (cosine kernel of random features)."""
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((n, rank))
    F /= np.linalg.norm(F, axis=1, keepdims=True)
    K = F @ F.T
    np.fill_diagonal(K, 1.0)
    return K


def random_orthogonal(d: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def orthogonal_recovery(n: int = 200, dx: int = 4, seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw inputs X, reference features F = X Q^T for a random orthogonal Q, and Q."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, dx))
    Q = random_orthogonal(dx, seed=seed + 1)
    return X, X @ Q.T, Q
