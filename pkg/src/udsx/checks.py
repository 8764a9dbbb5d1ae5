"""Self-contained verification suites runnable from the CLI and the test suite.

The gradient suite compares every analytic gradient against central finite
differences of the corresponding value function. The bound suite draws random
loss instances and checks that the Monte-Carlo estimate of the expected loss
under embedding noise never exceeds the closed-form inflated loss by more
than sampling error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneModel, StageSpec
from .csr import CsrConfig, StreamBatch, csc_loss, csp_loss, cst_loss
from .dex import DexConfig, cross_entropy, dex_loss, monte_carlo_l_infinity
from .pste import PsteConfig
from .train import TrainConfig, evaluate_objective


@dataclass
class GradCheckResult:
    name: str
    instances: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


@dataclass
class BoundCheckResult:
    instances: int
    violations: int
    worst_margin: float  # most negative value of (dex + 4*stderr - estimate)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def central_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function over a flat copy of x."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        grad.ravel()[i] = (up - down) / (2 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float((np.abs(analytic - numeric) / scale).max())


def _random_psd(rng: np.random.Generator, dim: int) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    return a @ a.T


def _check_cross_entropy(rng, instances) -> float:
    worst = 0.0
    for _ in range(instances):
        c = int(rng.integers(2, 11))
        dim = int(rng.integers(2, 17))
        w = rng.standard_normal((c, dim))
        f = rng.standard_normal(dim)
        y = int(rng.integers(c))
        out = cross_entropy(w, f, y)
        num_f = central_difference(lambda fv: cross_entropy(w, fv, y).value, f)
        num_w = central_difference(lambda wv: cross_entropy(wv, f, y).value, w)
        worst = max(worst, max_rel_err(out.grad_embedding, num_f))
        worst = max(worst, max_rel_err(out.grad_weights, num_w))
    return worst


def _check_dex(rng, instances) -> float:
    worst = 0.0
    for _ in range(instances):
        c = int(rng.integers(2, 11))
        dim = int(rng.integers(2, 17))
        w = rng.standard_normal((c, dim))
        f = rng.standard_normal(dim)
        y = int(rng.integers(c))
        sigma = _random_psd(rng, dim) / dim
        cfg = DexConfig(lambda_=float(rng.uniform(0.1, 5.0)))
        out = dex_loss(w, f, y, sigma, cfg)
        num_f = central_difference(lambda fv: dex_loss(w, fv, y, sigma, cfg).value, f)
        num_w = central_difference(lambda wv: dex_loss(wv, f, y, sigma, cfg).value, w)
        worst = max(worst, max_rel_err(out.grad_embedding, num_f))
        worst = max(worst, max_rel_err(out.grad_weights, num_w))
    return worst


def _fd_safe_stream_batch(rng, margin: float, guard: float = 1e-3) -> StreamBatch:
    """Random batch resampled away from the loss surface's kink points.

    The losses use subgradients at exact kinks (zero coordinate differences,
    zero distances, tied mining candidates, hinges at zero); finite
    differences straddling a kink would measure the wrong thing, so probe
    points keep a safety margin from all of them.
    """
    for _ in range(200):
        p = int(rng.integers(2, 4))
        k = int(rng.integers(2, 4))
        dim = int(rng.integers(2, 9))
        labels = np.repeat(np.arange(p), k)
        domains = rng.integers(0, 3, size=labels.size)
        f_d = rng.standard_normal((labels.size, dim))
        f_p = rng.standard_normal((labels.size, dim))
        batch = StreamBatch(labels, domains, f_d, f_p)
        if np.abs(f_d - f_p).min() < guard:
            continue
        if _near_mining_kink(batch, margin, guard):
            continue
        return batch
    raise RuntimeError("could not draw a kink-safe batch")


def _near_mining_kink(batch: StreamBatch, margin: float, guard: float) -> bool:
    m = batch.size
    same = batch.labels[:, None] == batch.labels[None, :]
    for anchor_emb, other_emb in ((batch.f_d, batch.f_p), (batch.f_p, batch.f_d)):
        diff_cross = anchor_emb[:, None, :] - other_emb[None, :, :]
        d_cross = np.sqrt((diff_cross**2).sum(axis=2))
        diff_within = anchor_emb[:, None, :] - anchor_emb[None, :, :]
        d_within = np.sqrt((diff_within**2).sum(axis=2))
        pos = np.where(same, d_cross, -np.inf)
        neg = np.where(~same, d_within, np.inf)
        for i in range(m):
            pos_sorted = np.sort(pos[i][np.isfinite(pos[i])])[::-1]
            neg_sorted = np.sort(neg[i][np.isfinite(neg[i])])
            if pos_sorted.size >= 2 and pos_sorted[0] - pos_sorted[1] < guard:
                return True
            if neg_sorted.size >= 2 and neg_sorted[1] - neg_sorted[0] < guard:
                return True
            hinge = pos_sorted[0] - neg_sorted[0] + margin
            if abs(hinge) < guard:
                return True
    return False


def _check_stream_loss(rng, instances, loss_fn, margin: float = 0.3) -> float:
    worst = 0.0
    for _ in range(instances):
        batch = _fd_safe_stream_batch(rng, margin)

        def value(f_d, f_p):
            b = StreamBatch(batch.labels, batch.domains, f_d, f_p)
            return loss_fn(b).value

        out = loss_fn(batch)
        num_d = central_difference(lambda v: value(v, batch.f_p), batch.f_d)
        num_p = central_difference(lambda v: value(batch.f_d, v), batch.f_p)
        worst = max(worst, max_rel_err(out.grad_d, num_d))
        worst = max(worst, max_rel_err(out.grad_p, num_p))
    return worst


def _tiny_model(rng) -> BackboneModel:
    specs = [StageSpec(3, 4), StageSpec(4, 4)]
    return BackboneModel(specs, (4, 4), n_classes=3, seed=int(rng.integers(2**31)))


def _composite_instance_is_fd_safe(model, inputs, cfg, hook) -> bool:
    """Reject probe instances near rectifier or mining kinks."""
    guard = 1e-3
    trace_d = model.forward_batch(inputs)
    trace_p = model.forward_batch(inputs, hook=hook)
    for trace in (trace_d, trace_p):
        for pooled in trace.pre_rectifier:
            if np.abs(pooled).min() < guard:
                return False
    batch = StreamBatch(
        np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]),
        trace_d.embedding, trace_p.embedding,
    )
    if np.abs(batch.f_d - batch.f_p).min() < guard:
        return False
    return not _near_mining_kink(batch, cfg.csr.margin, guard)


def _check_composite(rng, instances) -> float:
    """Full objective (both streams, all losses, frozen perturbation) vs FD."""
    worst = 0.0
    done = 0
    attempts = 0
    while done < instances:
        attempts += 1
        if attempts > 50 * instances:
            raise RuntimeError("could not draw enough kink-safe composite instances")
        model = _tiny_model(rng)
        m = 4
        inputs = rng.standard_normal((m, 3, 4, 4))
        labels = np.array([0, 0, 1, 1])
        domains = np.array([0, 1, 0, 1])
        sigmas = [_random_psd(rng, model.embedding_dim) / model.embedding_dim] * m
        frozen = rng.standard_normal((m, 4, 2, 2)) * 0.1
        cfg = TrainConfig(
            mode="udsx",
            lambda_=1.0,
            total_epochs=1,
            warmup_epochs=0,
            batch_p=2,
            batch_k=2,
            pste=PsteConfig(layers=(0, 1), min_width=1, horizon_epochs=1),
            csr=CsrConfig(psi1=0.7, psi2=0.5, psi3=1.1, margin=0.3),
        )

        def hook(k, acts):
            return acts + frozen if k == 0 else acts

        if not _composite_instance_is_fd_safe(model, inputs, cfg, hook):
            continue
        done += 1

        out = evaluate_objective(
            model, inputs, inputs, labels, domains, sigmas, cfg, hook
        )
        for name, param in model.parameters().items():

            def value(p_new, _name=name, _param=param):
                backup = _param.copy()
                _param[...] = p_new
                try:
                    return evaluate_objective(
                        model, inputs, inputs, labels, domains, sigmas, cfg, hook
                    ).l_udsx
                finally:
                    _param[...] = backup

            numeric = central_difference(value, param.copy())
            worst = max(worst, max_rel_err(out.grads[name], numeric))
    return worst


def run_gradient_checks(seed: int = 0, instances: int = 50) -> list[GradCheckResult]:
    """Finite-difference the whole analytic gradient surface."""
    rng = np.random.default_rng(seed)
    tol = 1e-5
    cst = lambda b: cst_loss(b, CsrConfig(margin=0.3))
    return [
        GradCheckResult("cross_entropy", instances, _check_cross_entropy(rng, instances), tol),
        GradCheckResult("dex_loss", instances, _check_dex(rng, instances), tol),
        GradCheckResult("csp_loss", instances, _check_stream_loss(rng, instances, csp_loss), tol),
        GradCheckResult("csc_loss", instances, _check_stream_loss(rng, instances, csc_loss), tol),
        GradCheckResult("cst_loss", instances, _check_stream_loss(rng, instances, cst), tol),
        GradCheckResult(
            "composite_objective", instances, _check_composite(rng, instances), tol
        ),
    ]


def run_bound_checks(
    seed: int = 0, instances: int = 200, n_samples: int = 20000
) -> BoundCheckResult:
    """Expected-loss-under-noise estimates must stay below the closed form."""
    rng = np.random.default_rng(seed)
    violations = 0
    worst = np.inf
    for i in range(instances):
        c = int(rng.integers(2, 11))
        dim = int(rng.integers(2, 17))
        w = rng.standard_normal((c, dim))
        f = rng.standard_normal(dim)
        y = int(rng.integers(c))
        sigma = _random_psd(rng, dim)
        lam = float(rng.uniform(0.0, 50.0))
        bound = dex_loss(w, f, y, sigma, DexConfig(lambda_=lam)).value
        estimate = monte_carlo_l_infinity(
            w, f, y, sigma, lam, n_samples, seed=int(rng.integers(2**31))
        )
        margin = bound + 4.0 * estimate.stderr - estimate.value
        worst = min(worst, margin)
        if margin < 0:
            violations += 1
    return BoundCheckResult(instances, violations, float(worst))
