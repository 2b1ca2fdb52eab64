"""Density clustering into pseudo-identities and identity-balanced batch sampling."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .numerics import as_features, pairwise_sq_dist

NOISE = -1


def dbscan(features, eps: float = 0.6, min_pts: int = 4) -> np.ndarray:
    """DBSCAN on Euclidean distance.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``, inclusive. Clusters are numbered from 0 in order of
    discovery while scanning rows; a border point joins the first cluster
    that reaches it. Unreached points are labelled ``NOISE``.
    """
    X = as_features(features, "features")
    n = X.shape[0]
    if n == 0:
        raise ValueError("dbscan needs at least one point")
    if not eps > 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")

    within = pairwise_sq_dist(X, X) <= eps * eps
    neighbors = [np.flatnonzero(row) for row in within]
    core = within.sum(axis=1) >= min_pts

    labels = np.full(n, NOISE, dtype=np.int64)
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for q in neighbors[j]:
                if labels[q] == NOISE:
                    labels[q] = cluster
                if core[q] and not visited[q]:
                    visited[q] = True
                    queue.append(q)
        cluster += 1
    return labels


@dataclass
class PseudoDataset:
    sample_indices: np.ndarray
    pseudo_labels: np.ndarray
    num_clusters: int

    def __len__(self) -> int:
        return len(self.sample_indices)

    def members(self, cluster: int) -> np.ndarray:
        return self.sample_indices[self.pseudo_labels == cluster]


def build_pseudo_dataset(labels) -> PseudoDataset:
    """Drop noise rows and remap cluster ids onto ``0..K-1`` by first appearance."""
    labels = np.asarray(labels, dtype=np.int64)
    keep = np.flatnonzero(labels != NOISE)
    kept = labels[keep]
    _, first = np.unique(kept, return_index=True)
    order = kept[np.sort(first)]
    remap = {old: new for new, old in enumerate(order)}
    pseudo = np.array([remap[v] for v in kept], dtype=np.int64)
    return PseudoDataset(keep, pseudo, len(order))


def pk_sample(ds: PseudoDataset, I: int, B: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """Draw ``min(I, K)`` identities, then ``B`` samples from each.

    Samples are drawn without replacement when the cluster is large enough,
    with replacement otherwise.
    """
    if ds.num_clusters == 0:
        raise ValueError("client has no clusters; cannot build a PK batch")
    if I < 1 or B < 1:
        raise ValueError("I and B must be positive")
    chosen = rng.choice(ds.num_clusters, size=min(I, ds.num_clusters), replace=False)
    return _draw_members(ds, chosen, B, rng)


def _draw_members(ds, clusters, B, rng):
    batch = []
    for c in clusters:
        members = ds.members(c)
        picks = rng.choice(members, size=B, replace=len(members) < B)
        batch.extend((int(idx), int(c)) for idx in picks)
    return batch


def ppe_iterations(num_clusters: int, I: int) -> int:
    """Iterations in one personalized pseudo-epoch: ceil(K / I)."""
    if num_clusters < 1:
        raise ValueError("need at least one cluster")
    if I < 1:
        raise ValueError("I must be positive")
    return -(-num_clusters // I)


def ppe_schedule(ds: PseudoDataset, I: int, B: int, rng: np.random.Generator):
    """Batches for one pseudo-epoch.

    Identities are dealt from a shuffled deck so every cluster appears at
    least once. A short final hand is topped up with other identities so
    each batch still holds ``min(I, K)`` of them.
    """
    K = ds.num_clusters
    steps = ppe_iterations(K, I)
    width = min(I, K)
    deck = rng.permutation(K)
    batches = []
    for s in range(steps):
        hand = deck[s * I:(s + 1) * I]
        if len(hand) < width:
            rest = np.setdiff1d(np.arange(K), hand)
            hand = np.concatenate([hand, rng.choice(rest, size=width - len(hand), replace=False)])
        batches.append(_draw_members(ds, hand, B, rng))
    return batches


@dataclass
class BatchPlan:
    identities_per_batch: int
    images_per_identity: int
    iterations_per_ppe: int

    @classmethod
    def for_clusters(cls, num_clusters: int, I: int, B: int) -> "BatchPlan":
        return cls(I, B, ppe_iterations(num_clusters, I))
