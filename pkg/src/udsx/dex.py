"""Classification losses for the implicit expansion stream.

`dex_loss` is the cross-entropy loss with each denominator logit inflated by a
non-negative quadratic term built from the sample domain's embedding
covariance. It upper-bounds the expected cross-entropy under Gaussian
perturbation of the embedding, which `monte_carlo_l_infinity` estimates
directly so the bound can be verified numerically.

All softmax-family values go through max-subtracted log-sum-exp. Gradients are
analytic, including the dependence of the inflation terms on the classifier
weights (which is what pulls class weights toward each other as the expansion
strength grows).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CorruptStatisticsError(ValueError):
    """The supplied covariance produced materially negative inflation terms."""


@dataclass(frozen=True)
class DexConfig:
    """Expansion strength and gradient wiring for the inflated loss.

    lambda_ scales the logit inflation; freeze_gamma_grad drops the gradient
    of the inflation terms with respect to the classifier weights (ablation
    switch; the loss value is unchanged).
    """

    lambda_: float = 15.0
    freeze_gamma_grad: bool = False

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError(f"lambda_ must be >= 0, got {self.lambda_}")


@dataclass
class LossValueWithGrads:
    value: float
    grad_embedding: np.ndarray
    grad_weights: np.ndarray


@dataclass
class McEstimate:
    value: float
    stderr: float


def _check_weights(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] < 2:
        raise ValueError(f"classifier weights must be (C>=2, dim), got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("classifier weights contain non-finite entries")
    return w


def _log_sum_exp(logits: np.ndarray) -> float:
    m = np.max(logits)
    return float(m + np.log(np.sum(np.exp(logits - m))))


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def _ce_core(w, f, y, gamma=None) -> LossValueWithGrads:
    logits = w @ f
    inflated = logits if gamma is None else logits + gamma
    value = _log_sum_exp(inflated) - float(logits[y])
    p = _stable_softmax(inflated)
    grad_f = p @ w - w[y]
    grad_w = np.outer(p, f)
    grad_w[y] -= f
    return LossValueWithGrads(value, grad_f, grad_w)


def cross_entropy(w, f, y: int) -> LossValueWithGrads:
    """Bias-free softmax cross-entropy of one embedding, with analytic grads."""
    w = _check_weights(w)
    f = np.asarray(f, dtype=float)
    if f.shape != (w.shape[1],):
        raise ValueError(f"embedding shape {f.shape} does not match weights {w.shape}")
    if not 0 <= y < w.shape[0]:
        raise ValueError(f"class id {y} out of range for {w.shape[0]} classes")
    return _ce_core(w, f, y)


def gamma_terms(w, y: int, sigma, lambda_: float) -> np.ndarray:
    """Per-class logit inflation: (lambda/2) (w_j - w_y)^T sigma (w_j - w_y).

    Entry y is exactly zero. Entries are non-negative up to roundoff for a
    positive semi-definite sigma.
    """
    w = _check_weights(w)
    if not 0 <= y < w.shape[0]:
        raise ValueError(f"class id {y} out of range for {w.shape[0]} classes")
    if lambda_ < 0:
        raise ValueError(f"lambda_ must be >= 0, got {lambda_}")
    sigma = np.asarray(sigma, dtype=float)
    dim = w.shape[1]
    if sigma.shape != (dim, dim):
        raise ValueError(f"sigma shape {sigma.shape} does not match dim {dim}")
    if lambda_ == 0.0:
        return np.zeros(w.shape[0])
    sig = 0.5 * (sigma + sigma.T)
    diff = w - w[y]
    gam = 0.5 * lambda_ * ((diff @ sig) * diff).sum(axis=1)
    gam[y] = 0.0
    return gam


def dex_loss(w, f, y: int, sigma, cfg: DexConfig) -> LossValueWithGrads:
    """Cross-entropy with covariance-inflated denominator logits.

    Reduces bit-for-bit to `cross_entropy` when every inflation term is zero
    (in particular for lambda_ = 0). Raises CorruptStatisticsError if any
    inflation term is below -1e-6, which indicates a non-PSD covariance.
    """
    w = _check_weights(w)
    f = np.asarray(f, dtype=float)
    if f.shape != (w.shape[1],):
        raise ValueError(f"embedding shape {f.shape} does not match weights {w.shape}")
    if not 0 <= y < w.shape[0]:
        raise ValueError(f"class id {y} out of range for {w.shape[0]} classes")

    gam = gamma_terms(w, y, sigma, cfg.lambda_)
    if np.min(gam) < -1e-6:
        raise CorruptStatisticsError(
            f"inflation term {np.min(gam):.3e} < -1e-6; covariance looks non-PSD"
        )
    if not np.any(gam):
        return _ce_core(w, f, y)

    out = _ce_core(w, f, y, gamma=gam)
    if not cfg.freeze_gamma_grad:
        sig = 0.5 * (np.asarray(sigma, dtype=float) + np.asarray(sigma, dtype=float).T)
        p = _stable_softmax(w @ f + gam)
        diff_sig = (w - w[y]) @ sig
        out.grad_weights += cfg.lambda_ * p[:, None] * diff_sig
        out.grad_weights[y] -= cfg.lambda_ * (p @ diff_sig)
    return out


def monte_carlo_l_infinity(
    w, f, y: int, sigma, lambda_: float, n_samples: int, seed: int
) -> McEstimate:
    """Monte-Carlo estimate of the expected cross-entropy under embedding noise.

    Draws perturbed embeddings from N(f, lambda * sigma) via Cholesky (with a
    1e-9 diagonal jitter retry) and averages the per-draw cross-entropy.
    Deterministic given the seed. lambda_ = 0 returns the plain loss with
    zero standard error.
    """
    w = _check_weights(w)
    f = np.asarray(f, dtype=float)
    if n_samples < 100:
        raise ValueError(f"n_samples must be >= 100, got {n_samples}")
    if lambda_ < 0:
        raise ValueError(f"lambda_ must be >= 0, got {lambda_}")
    if lambda_ == 0.0:
        return McEstimate(cross_entropy(w, f, y).value, 0.0)

    dim = w.shape[1]
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (dim, dim):
        raise ValueError(f"sigma shape {sigma.shape} does not match dim {dim}")
    cov = lambda_ * 0.5 * (sigma + sigma.T)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(cov + 1e-9 * np.eye(dim))
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not factorable even with jitter") from exc

    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, dim))
    samples = f + z @ chol.T
    logits = samples @ w.T
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    losses = lse - logits[:, y]
    stderr = float(losses.std(ddof=1) / np.sqrt(n_samples))
    return McEstimate(float(losses.mean()), stderr)


def max_interclass_weight_distance(w) -> float:
    """Largest Euclidean distance between any two classifier weight rows."""
    w = _check_weights(w)
    diffs = w[:, None, :] - w[None, :, :]
    return float(np.sqrt((diffs**2).sum(axis=2)).max())


def _batch_core(w, embeddings, labels, gamma_rows=None) -> LossValueWithGrads:
    """Vectorized mean-reduced softmax loss with optional per-sample inflation."""
    m = embeddings.shape[0]
    ar = np.arange(m)
    logits = embeddings @ w.T
    inflated = logits if gamma_rows is None else logits + gamma_rows
    peak = inflated.max(axis=1, keepdims=True)
    lse = peak[:, 0] + np.log(np.exp(inflated - peak).sum(axis=1))
    value = float(np.mean(lse - logits[ar, labels]))
    p = np.exp(inflated - lse[:, None])
    grad_emb = (p @ w - w[labels]) / m
    grad_w = p.T @ embeddings
    np.subtract.at(grad_w, labels, embeddings)
    return LossValueWithGrads(value, grad_emb, grad_w / m)


def batch_cross_entropy(w, embeddings, labels) -> LossValueWithGrads:
    """Mean-reduced cross-entropy over a batch; grads for embeddings and weights."""
    w = _check_weights(w)
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels, dtype=int)
    return _batch_core(w, embeddings, labels)


def batch_dex_loss(w, embeddings, labels, sigmas, cfg: DexConfig) -> LossValueWithGrads:
    """Mean-reduced inflated loss over a batch.

    sigmas is a per-sample sequence of covariance snapshots; None entries mean
    cold statistics and fall back to the plain cross-entropy for that sample.
    Inflation vectors are shared within (snapshot, class) groups, and when
    every inflation term vanishes the computation is the exact cross-entropy
    path, bit for bit.
    """
    w = _check_weights(w)
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels, dtype=int)
    m = embeddings.shape[0]

    groups: dict[tuple[int, int], list[int]] = {}
    for i in range(m):
        key = (id(sigmas[i]) if sigmas[i] is not None else -1, int(labels[i]))
        groups.setdefault(key, []).append(i)

    gamma_rows = None
    group_info = []
    for (sig_key, y), idx in groups.items():
        if sig_key == -1 or cfg.lambda_ == 0.0:
            continue
        sigma = sigmas[idx[0]]
        gam = gamma_terms(w, y, sigma, cfg.lambda_)
        if np.min(gam) < -1e-6:
            raise CorruptStatisticsError(
                f"inflation term {np.min(gam):.3e} < -1e-6; covariance looks non-PSD"
            )
        if np.any(gam):
            if gamma_rows is None:
                gamma_rows = np.zeros((m, w.shape[0]))
            gamma_rows[idx] = gam
            group_info.append((y, idx, sigma))

    out = _batch_core(w, embeddings, labels, gamma_rows)
    if gamma_rows is not None and not cfg.freeze_gamma_grad:
        logits = embeddings @ w.T
        inflated = logits + gamma_rows
        peak = inflated.max(axis=1, keepdims=True)
        p = np.exp(inflated - peak)
        p /= p.sum(axis=1, keepdims=True)
        for y, idx, sigma in group_info:
            sig = 0.5 * (np.asarray(sigma, dtype=float) + np.asarray(sigma, dtype=float).T)
            diff_sig = (w - w[y]) @ sig
            p_sum = p[idx].sum(axis=0)
            out.grad_weights += cfg.lambda_ / m * p_sum[:, None] * diff_sig
            out.grad_weights[y] -= cfg.lambda_ / m * (p_sum @ diff_sig)
    return out
