"""Flat and nested partition handling.

Partitions of n items are dense integer label vectors in canonical form:
labels are renumbered by order of first appearance, so item 0 always has
label 0 and each new cluster gets the next unused integer. Dense labels keep
membership queries O(1) inside the Gibbs loops.
"""

from __future__ import annotations

import numpy as np


def canonicalize(labels) -> np.ndarray:
    """Relabel clusters by order of first appearance; block structure unchanged."""
    lab = np.asarray(labels)
    if lab.ndim != 1 or lab.size == 0:
        raise ValueError("labels must be a nonempty 1-D integer vector")
    if np.any(lab < 0):
        raise ValueError("labels must be nonnegative")
    _, first_pos, inverse = np.unique(lab, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first_pos))
    return order[inverse].astype(np.int64)


def n_clusters(labels) -> int:
    return int(np.unique(np.asarray(labels)).size)


def blocks(labels) -> list[frozenset]:
    """Partition as a set of blocks, for order-free comparisons."""
    lab = np.asarray(labels)
    return [frozenset(np.flatnonzero(lab == v).tolist()) for v in np.unique(lab)]


def _check_coclustering(coclust: np.ndarray, n: int) -> np.ndarray:
    c = np.asarray(coclust, dtype=float)
    if c.shape != (n, n):
        raise ValueError(f"co-clustering matrix must be {n}x{n}, got {c.shape}")
    if not np.allclose(c, c.T, atol=1e-12):
        raise ValueError("co-clustering matrix must be symmetric")
    if np.any(c < -1e-12) or np.any(c > 1 + 1e-12):
        raise ValueError("co-clustering entries must lie in [0, 1]")
    if not np.allclose(np.diag(c), 1.0, atol=1e-12):
        raise ValueError("co-clustering matrix must have unit diagonal")
    return c


def binder_loss(labels, coclust) -> float:
    """Pairwise squared deviation between co-membership of a partition and
    co-clustering probabilities, summed over unordered pairs."""
    lab = np.asarray(labels)
    c = _check_coclustering(coclust, lab.size)
    same = lab[:, None] == lab[None, :]
    iu = np.triu_indices(lab.size, k=1)
    diff = same[iu].astype(float) - c[iu]
    return float(np.sum(diff * diff))


def coclustering_matrix(draws) -> np.ndarray:
    """Fraction of draws in which each pair of items shares a cluster."""
    arr = np.asarray(draws)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("draws must be a nonempty sequence of equal-length label vectors")
    acc = np.zeros((arr.shape[1], arr.shape[1]))
    for row in arr:
        acc += row[:, None] == row[None, :]
    acc /= arr.shape[0]
    np.fill_diagonal(acc, 1.0)
    return acc


def induced_row_partitions(subject_labels, row_labels) -> list[np.ndarray]:
    """Per-column row partition implied by a nested state.

    Column j inherits the row labeling of its subject cluster, so any two
    columns in the same cluster share the identical partition.
    """
    S = np.asarray(subject_labels)
    M = np.asarray(row_labels)
    return [canonicalize(M[S[j]]) for j in range(S.size)]
