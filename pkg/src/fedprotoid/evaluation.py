"""Cross-camera retrieval metrics: mean average precision and CMC Rank-1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .encoder import ModelParams, forward
from .numerics import as_features, pairwise_sq_dist


@dataclass
class RetrievalSplit:
    """Query and gallery rows with identity and camera per row.

    Construction fails if some query has no gallery entry with the same
    identity seen from a different camera.
    """

    query: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray

    def __post_init__(self):
        self.query = as_features(self.query, "query")
        self.gallery = as_features(self.gallery, "gallery")
        self.query_ids = np.asarray(self.query_ids, dtype=np.int64)
        self.query_cams = np.asarray(self.query_cams, dtype=np.int64)
        self.gallery_ids = np.asarray(self.gallery_ids, dtype=np.int64)
        self.gallery_cams = np.asarray(self.gallery_cams, dtype=np.int64)
        nq, ng = len(self.query), len(self.gallery)
        if self.query_ids.shape != (nq,) or self.query_cams.shape != (nq,):
            raise ValueError("query ids/cameras must have one entry per query row")
        if self.gallery_ids.shape != (ng,) or self.gallery_cams.shape != (ng,):
            raise ValueError("gallery ids/cameras must have one entry per gallery row")
        if self.query.shape[1] != self.gallery.shape[1]:
            raise ValueError("query and gallery dimensions differ")
        good = (self.query_ids[:, None] == self.gallery_ids[None, :]) & (
            self.query_cams[:, None] != self.gallery_cams[None, :]
        )
        missing = np.flatnonzero(~good.any(axis=1))
        if missing.size:
            raise ValueError(f"query {missing[0]} has no cross-camera gallery match")


def average_precision(hits: np.ndarray) -> float:
    """AP of a ranked 0/1 relevance vector (precision averaged at each hit)."""
    hits = np.asarray(hits, dtype=bool)
    n_rel = hits.sum()
    if n_rel == 0:
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_rel + 1) / ranks))


def retrieval_metrics(q_feat, q_ids, q_cams, g_feat, g_ids, g_cams) -> Tuple[float, float]:
    """(mAP, Rank-1) for precomputed features.

    Gallery rows sharing both identity and camera with the query are
    ignored. Ties in distance keep gallery order.
    """
    dist = pairwise_sq_dist(q_feat, g_feat)
    aps = np.empty(len(q_ids))
    top1 = np.empty(len(q_ids))
    for i in range(len(q_ids)):
        order = np.argsort(dist[i], kind="stable")
        junk = (g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i])
        hits = (g_ids[order] == q_ids[i])[~junk]
        aps[i] = average_precision(hits)
        top1[i] = float(hits[0])
    return float(aps.mean()), float(top1.mean())


def evaluate(model: ModelParams, split: RetrievalSplit) -> Tuple[float, float]:
    return retrieval_metrics(
        forward(model, split.query), split.query_ids, split.query_cams,
        forward(model, split.gallery), split.gallery_ids, split.gallery_cams,
    )
