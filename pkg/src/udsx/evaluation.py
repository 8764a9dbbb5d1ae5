"""Retrieval metrics (rank-k matching rate, mean average precision).

Galleries are ranked per query by ascending distance with ties broken by the
lower gallery index. Average precision is the mean of the precision values at
each relevant hit, accumulated with exact float summation so any faithful
reimplementation produces bit-identical numbers. Every query must have at
least one gallery match; queries without one are a protocol violation and
raise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneModel
from .synthdata import Dataset


@dataclass
class RetrievalResult:
    rank_k: dict[int, float]
    mean_ap: float
    per_query_ap: np.ndarray

    def to_dict(self) -> dict:
        return {
            "rank_k": {str(k): v for k, v in sorted(self.rank_k.items())},
            "mAP": self.mean_ap,
        }


def _distances(query: np.ndarray, gallery: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        return np.sqrt(((gallery - query) ** 2).sum(axis=1))
    if metric == "cosine":
        qn = query / max(np.linalg.norm(query), 1e-300)
        gn = gallery / np.maximum(
            np.sqrt((gallery**2).sum(axis=1, keepdims=True)), 1e-300
        )
        return 1.0 - gn @ qn
    raise ValueError(f"unknown metric {metric!r}")


def cmc_map(
    query_embeddings,
    query_labels,
    gallery_embeddings,
    gallery_labels,
    ks=(1, 5, 10),
    metric: str = "euclidean",
) -> RetrievalResult:
    """Rank-k match rates and mAP for a query/gallery retrieval split."""
    q = np.asarray(query_embeddings, dtype=float)
    g = np.asarray(gallery_embeddings, dtype=float)
    q_labels = np.asarray(query_labels, dtype=int)
    g_labels = np.asarray(gallery_labels, dtype=int)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError("query and gallery must be (n, dim) with equal dim")
    n_q, n_g = q.shape[0], g.shape[0]
    if n_q < 1 or n_g < 1:
        raise ValueError("need at least one query and one gallery item")

    ks = sorted({int(k) for k in ks if 1 <= int(k) <= n_g})
    hits_at = {k: 0 for k in ks}
    per_query_ap = np.zeros(n_q)
    for qi in range(n_q):
        dist = _distances(q[qi], g, metric)
        order = np.argsort(dist, kind="stable")
        matches = g_labels[order] == q_labels[qi]
        n_rel = int(matches.sum())
        if n_rel == 0:
            raise ValueError(
                f"query {qi} (label {q_labels[qi]}) has no gallery match; "
                "protocol violation"
            )
        ranks = np.flatnonzero(matches) + 1
        precisions = np.arange(1, n_rel + 1, dtype=float) / ranks
        per_query_ap[qi] = math.fsum(precisions) / n_rel
        for k in ks:
            hits_at[k] += int(ranks[0] <= k)

    rank_k = {k: hits_at[k] / n_q for k in ks}
    return RetrievalResult(rank_k, math.fsum(per_query_ap) / n_q, per_query_ap)


def embed_images(model: BackboneModel, images, batch_size: int = 256) -> np.ndarray:
    """Single-stream, unperturbed embeddings (inference path)."""
    images = np.asarray(images, dtype=float)
    chunks = [
        model.forward_batch(images[i : i + batch_size]).embedding
        for i in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def evaluate_held_out(
    model: BackboneModel, dataset: Dataset, ks=(1, 5, 10), metric: str = "euclidean"
) -> RetrievalResult:
    """Retrieval metrics on the held-out domain's query/gallery split.

    Expansion machinery plays no part here: embeddings come from plain
    forward passes with no hooks and no statistics lookups.
    """
    q_images, q_labels, _ = dataset.query_arrays()
    g_images, g_labels, _ = dataset.gallery_arrays()
    if len(q_labels) == 0 or len(g_labels) == 0:
        raise ValueError("dataset has an empty query or gallery split")
    q_emb = embed_images(model, q_images)
    g_emb = embed_images(model, g_images)
    return cmc_map(q_emb, q_labels, g_emb, g_labels, ks=ks, metric=metric)
