"""Losses that pull the two training streams back together.

A batch is duplicated into two streams that share backbone weights but see
different expansion treatment. These losses compare the resulting embeddings:
an L1 pairwise term between stream siblings (csp), a center loss whose
centroids come from the opposing stream (csc), and a batch-hard triplet loss
whose anchor/positive pairs cross streams while anchor/negative stay within a
stream (cst).

All reductions are means over samples/anchors so values are batch-size
invariant. Distance kinks (zero distance, tied mining candidates, hinge at
exactly zero) use the conventional subgradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ZERO_DIST_EPS = 1e-300  # guard only against exact zero distances


@dataclass
class StreamBatch:
    """Aligned embeddings of the same samples from both streams."""

    labels: np.ndarray
    domains: np.ndarray
    f_d: np.ndarray
    f_p: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        self.domains = np.asarray(self.domains, dtype=int)
        self.f_d = np.asarray(self.f_d, dtype=float)
        self.f_p = np.asarray(self.f_p, dtype=float)
        m = self.labels.shape[0]
        if self.f_d.ndim != 2 or self.f_p.ndim != 2:
            raise ValueError("stream embeddings must be (m, dim) matrices")
        if self.f_d.shape != self.f_p.shape:
            raise ValueError(
                f"streams are misaligned: {self.f_d.shape} vs {self.f_p.shape}"
            )
        if self.f_d.shape[0] != m or self.domains.shape[0] != m:
            raise ValueError("labels, domains and embeddings must have equal length")

    @property
    def size(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class CsrConfig:
    psi1: float = 2.0
    psi2: float = 5e-4
    psi3: float = 1.0
    margin: float = 0.3

    def __post_init__(self):
        if min(self.psi1, self.psi2, self.psi3) < 0:
            raise ValueError("component weights must be non-negative")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


@dataclass
class StreamLossGrads:
    value: float
    grad_d: np.ndarray
    grad_p: np.ndarray


@dataclass
class CsrBreakdown:
    value: float
    csp: float
    csc: float
    cst: float
    grad_d: np.ndarray
    grad_p: np.ndarray


def csp_loss(batch: StreamBatch) -> StreamLossGrads:
    """Mean L1 distance between stream siblings."""
    diff = batch.f_d - batch.f_p
    m = batch.size
    value = float(np.abs(diff).sum() / m)
    grad = np.sign(diff) / m
    return StreamLossGrads(value, grad, -grad)


def _unit_rows(diff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row directions diff/||diff|| with zero rows for zero distances."""
    dist = np.sqrt((diff**2).sum(axis=1))
    safe = np.where(dist > _ZERO_DIST_EPS, dist, 1.0)
    units = diff / safe[:, None]
    units[dist <= _ZERO_DIST_EPS] = 0.0
    return dist, units


def _class_groups(labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def center_loss(embeddings, labels) -> tuple[float, np.ndarray]:
    """Mean distance of each embedding to its in-batch class centroid.

    Uses the Euclidean norm (not its square). A class with a single member
    contributes zero since its centroid is itself. Gradients include the
    centroid's dependence on the batch.
    """
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels, dtype=int)
    m = embeddings.shape[0]
    if labels.shape[0] != m:
        raise ValueError("labels and embeddings must have equal length")
    centroids = np.empty_like(embeddings)
    groups = _class_groups(labels)
    for idx in groups.values():
        centroids[idx] = embeddings[idx].mean(axis=0)
    dist, units = _unit_rows(embeddings - centroids)
    value = float(dist.sum() / m)
    grad = units.copy()
    for idx in groups.values():
        grad[idx] -= units[idx].mean(axis=0)
    return value, grad / m


def csc_loss(batch: StreamBatch) -> StreamLossGrads:
    """Center loss with centroids swapped across streams.

    Each embedding is pulled toward the in-batch class centroid computed in
    the opposing stream; both directions are summed and mean-reduced. With
    identical streams this equals exactly twice the plain center loss.
    """
    m = batch.size
    groups = _class_groups(batch.labels)
    cent_d = np.empty_like(batch.f_d)
    cent_p = np.empty_like(batch.f_p)
    for idx in groups.values():
        cent_d[idx] = batch.f_d[idx].mean(axis=0)
        cent_p[idx] = batch.f_p[idx].mean(axis=0)

    dist_dp, units_dp = _unit_rows(batch.f_d - cent_p)  # d-stream vs p-centroids
    dist_pd, units_pd = _unit_rows(batch.f_p - cent_d)  # p-stream vs d-centroids
    value = float((dist_dp.sum() + dist_pd.sum()) / m)

    grad_d = units_dp.copy()
    grad_p = units_pd.copy()
    for idx in groups.values():
        grad_d[idx] -= units_pd[idx].mean(axis=0)  # via the d-stream centroid
        grad_p[idx] -= units_dp[idx].mean(axis=0)  # via the p-stream centroid
    return StreamLossGrads(value, grad_d / m, grad_p / m)


def _euclidean(a, b) -> float:
    return float(np.sqrt(((np.asarray(a, float) - np.asarray(b, float)) ** 2).sum()))


def cross_extractor_triplet(fa, gp, fn, margin: float = 0.0, metric=_euclidean) -> float:
    """Hinge on (anchor-to-positive) - (anchor-to-negative) across extractors.

    The anchor and negative come from one extractor, the positive from the
    other; margin 0 reproduces the bare hinge.
    """
    return max(metric(fa, gp) - metric(fa, fn) + margin, 0.0)


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def _check_mining_preconditions(labels: np.ndarray) -> None:
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise ValueError("batch-hard mining needs at least 2 classes in the batch")
    if counts.min() < 2:
        raise ValueError("batch-hard mining needs >= 2 samples per class")


def cst_loss(batch: StreamBatch, cfg: CsrConfig) -> StreamLossGrads:
    """Cross-stream batch-hard triplet loss.

    For each anchor: the hardest positive is the farthest same-class sample in
    the opposite stream, the hardest negative the nearest different-class
    sample in the anchor's own stream. Both anchor-in-d and anchor-in-p hinges
    are averaged (factor 1/2) and mean-reduced over anchors. Mining index
    choices are treated as constants in the gradient.
    """
    _check_mining_preconditions(batch.labels)
    m = batch.size
    same = batch.labels[:, None] == batch.labels[None, :]

    grad_d = np.zeros_like(batch.f_d)
    grad_p = np.zeros_like(batch.f_p)
    total = 0.0
    scale = 1.0 / (2.0 * m)
    for anchor_emb, other_emb, grad_a, grad_o in (
        (batch.f_d, batch.f_p, grad_d, grad_p),
        (batch.f_p, batch.f_d, grad_p, grad_d),
    ):
        d_cross = _pairwise_distances(anchor_emb, other_emb)
        d_within = _pairwise_distances(anchor_emb, anchor_emb)
        pos_dist = np.where(same, d_cross, -np.inf)
        neg_dist = np.where(~same, d_within, np.inf)
        hardest_pos = pos_dist.argmax(axis=1)
        hardest_neg = neg_dist.argmin(axis=1)
        for i in range(m):
            j, k = int(hardest_pos[i]), int(hardest_neg[i])
            d_ap = d_cross[i, j]
            d_an = d_within[i, k]
            hinge = d_ap - d_an + cfg.margin
            if hinge <= 0:
                continue
            total += hinge * scale
            if d_ap > _ZERO_DIST_EPS:
                u = (anchor_emb[i] - other_emb[j]) / d_ap
                grad_a[i] += scale * u
                grad_o[j] -= scale * u
            if d_an > _ZERO_DIST_EPS:
                v = (anchor_emb[i] - anchor_emb[k]) / d_an
                grad_a[i] -= scale * v
                grad_a[k] += scale * v
    return StreamLossGrads(float(total), grad_d, grad_p)


def csr_loss(batch: StreamBatch, cfg: CsrConfig) -> CsrBreakdown:
    """Weighted sum of the three reunification terms with a component breakdown.

    Components with zero weight are skipped entirely (their value reports as
    0.0), so a disabled triplet term never trips mining preconditions.
    """
    grad_d = np.zeros_like(batch.f_d)
    grad_p = np.zeros_like(batch.f_p)
    csp_val = csc_val = cst_val = 0.0
    if cfg.psi1 > 0:
        out = csp_loss(batch)
        csp_val = out.value
        grad_d += cfg.psi1 * out.grad_d
        grad_p += cfg.psi1 * out.grad_p
    if cfg.psi2 > 0:
        out = csc_loss(batch)
        csc_val = out.value
        grad_d += cfg.psi2 * out.grad_d
        grad_p += cfg.psi2 * out.grad_p
    if cfg.psi3 > 0:
        out = cst_loss(batch, cfg)
        cst_val = out.value
        grad_d += cfg.psi3 * out.grad_d
        grad_p += cfg.psi3 * out.grad_p
    value = cfg.psi1 * csp_val + cfg.psi2 * csc_val + cfg.psi3 * cst_val
    return CsrBreakdown(float(value), csp_val, csc_val, cst_val, grad_d, grad_p)


def batch_hard_triplet(embeddings, labels, margin: float = 0.0) -> float:
    """Plain single-stream batch-hard triplet loss (mean over anchors).

    Hardest positive excludes the anchor itself; kept as the single-stream
    reference that the cross-stream loss must reduce to when both streams
    coincide and the margin is zero.
    """
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels, dtype=int)
    _check_mining_preconditions(labels)
    m = labels.shape[0]
    dist = _pairwise_distances(embeddings, embeddings)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(m, dtype=bool)
    pos = np.where(same & ~eye, dist, -np.inf).max(axis=1)
    neg = np.where(~same, dist, np.inf).min(axis=1)
    return float(np.maximum(pos - neg + margin, 0.0).mean())
