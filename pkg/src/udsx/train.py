"""Dual-stream training loop.

Each batch is duplicated: one stream runs unperturbed and is scored with the
covariance-inflated loss, the other runs with one intermediate layer perturbed
and is scored with plain cross-entropy. Reunification losses compare the two
embedding sets, everything backpropagates into a single shared parameter
store, and the per-domain statistics are refreshed after the optimizer step
from unperturbed activations only (feeding perturbed activations back into
the variance tracker would let the noise amplify itself).

Reduced modes reuse the same step with switches: single-stream modes run one
forward pass, and disabled loss terms are skipped rather than multiplied by
zero so a reduced mode is bit-identical to the matching degenerate
configuration of the full step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneModel
from .csr import CsrConfig, StreamBatch, csr_loss
from .dex import (
    DexConfig,
    batch_cross_entropy,
    batch_dex_loss,
    max_interclass_weight_distance,
)
from .evaluation import evaluate_held_out
from .optim import make_optimizer
from .pste import PsteConfig, candidate_layers, select_layer, stratify_channels, apply_expansion
from .stats import DomainStats
from .synthdata import Dataset

MODES = ("udsx", "dex_only", "pste_only", "dex_naive", "dex_dsd", "dex_dsd_pste")

RUN_LOG_COLUMNS = (
    "epoch",
    "lr",
    "l_ce",
    "l_dex",
    "l_csp",
    "l_csc",
    "l_cst",
    "l_se",
    "l_csr",
    "l_udsx",
    "max_weight_distance",
    "rank1",
    "mAP",
)


class TrainingAborted(RuntimeError):
    """A non-finite loss appeared; carries the offending report."""

    def __init__(self, message: str, report: "LossReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class ModeFlags:
    dual_stream: bool
    perturb: bool
    use_dex: bool
    use_ce: bool
    use_csr: bool


_MODE_FLAGS = {
    "udsx": ModeFlags(True, True, True, True, True),
    "dex_dsd_pste": ModeFlags(True, True, True, True, False),
    "dex_dsd": ModeFlags(True, False, True, True, False),
    "dex_naive": ModeFlags(False, True, True, False, False),
    "dex_only": ModeFlags(False, False, True, False, False),
    "pste_only": ModeFlags(False, True, False, True, False),
}


def mode_flags(mode: str) -> ModeFlags:
    if mode not in _MODE_FLAGS:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    return _MODE_FLAGS[mode]


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "udsx"
    lambda_: float = 15.0
    beta1: float = 1.0
    beta2: float = 1.0
    lr: float = 1.75e-4
    warmup_epochs: int = 10
    decay_epochs: tuple[int, ...] = (30, 55)
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    batch_p: int = 8
    batch_k: int = 4
    total_epochs: int = 120
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    cold_start_min_count: int = 32
    eval_every: int = 1
    freeze_gamma_grad: bool = False
    stats_decay: float | None = None
    pste: PsteConfig = field(default_factory=PsteConfig)
    csr: CsrConfig = field(default_factory=CsrConfig)

    def __post_init__(self):
        mode_flags(self.mode)
        if self.lambda_ < 0 or min(self.beta1, self.beta2) < 0:
            raise ValueError("lambda_ and stream weights must be >= 0")
        if self.warmup_epochs > self.total_epochs:
            raise ValueError(
                f"warmup_epochs {self.warmup_epochs} exceeds total {self.total_epochs}"
            )
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError(f"decay_epochs must be sorted, got {self.decay_epochs}")
        if self.batch_p < 2 or self.batch_k < 2:
            raise ValueError("batches need >= 2 classes and >= 2 instances per class")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def dex_config(self) -> DexConfig:
        return DexConfig(self.lambda_, self.freeze_gamma_grad)


@dataclass
class LossReport:
    epoch: int
    step: int
    l_ce: float | None
    l_dex: float | None
    l_csp: float | None
    l_csc: float | None
    l_cst: float | None
    l_se: float
    l_csr: float | None
    l_udsx: float

    def components(self) -> dict[str, float | None]:
        return {
            "l_ce": self.l_ce,
            "l_dex": self.l_dex,
            "l_csp": self.l_csp,
            "l_csc": self.l_csc,
            "l_cst": self.l_cst,
            "l_se": self.l_se,
            "l_csr": self.l_csr,
            "l_udsx": self.l_udsx,
        }


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    @property
    def size(self) -> int:
        return self.labels.shape[0]


@dataclass
class DualBatch:
    """Two logically independent views of the same samples."""

    view_d: Batch
    view_p: Batch
    rng_d: np.random.Generator
    rng_p: np.random.Generator


def duplicate_batch(batch: Batch, rng: np.random.Generator) -> DualBatch:
    """Copy a batch into two streams with distinct child rng streams."""
    children = rng.spawn(2)
    view_d = Batch(batch.inputs.copy(), batch.labels.copy(), batch.domains.copy())
    view_p = Batch(batch.inputs.copy(), batch.labels.copy(), batch.domains.copy())
    return DualBatch(view_d, view_p, children[0], children[1])


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup from 0.01*lr to lr, then step decays."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        frac = epoch / cfg.warmup_epochs
        return cfg.lr * (0.01 + 0.99 * frac)
    n_decays = sum(1 for d in cfg.decay_epochs if epoch >= d)
    return cfg.lr * cfg.decay_factor**n_decays


def _pste_batch_hook(
    domains: np.ndarray,
    stats: DomainStats,
    pste_cfg: PsteConfig,
    epoch: int,
    rng: np.random.Generator,
    min_count: int,
):
    """Per-sample layer draw plus per-sample channel perturbation, batched.

    Layer choices are drawn up front in sample order; noise is drawn at the
    perturbed layer in ascending sample order, so the rng consumption pattern
    is deterministic for a given batch composition.
    """
    candidates = candidate_layers(pste_cfg, epoch)
    chosen = [select_layer(candidates, rng) for _ in range(len(domains))]

    def hook(k: int, acts: np.ndarray) -> np.ndarray:
        rows = [i for i, ki in enumerate(chosen) if ki == k]
        if not rows:
            return acts
        out = acts.copy()
        for i in rows:
            d = int(domains[i])
            if stats.channel_count(d, k) < min_count:
                continue
            indices = stratify_channels(acts[i], pste_cfg.strata_lo, pste_cfg.strata_hi)
            out[i] = apply_expansion(
                acts[i], d, k, stats, indices, rng,
                per_element=pste_cfg.per_element_noise,
            )
        return out

    return hook


@dataclass
class ObjectiveResult:
    """Loss values plus assembled parameter gradients for one batch."""

    l_ce: float | None
    l_dex: float | None
    l_csp: float | None
    l_csc: float | None
    l_cst: float | None
    l_se: float
    l_csr: float | None
    l_udsx: float
    grads: dict[str, np.ndarray]
    trace_d: "object" = None
    trace_p: "object" = None


def evaluate_objective(
    model: BackboneModel,
    inputs_d: np.ndarray,
    inputs_p: np.ndarray,
    labels: np.ndarray,
    domains: np.ndarray,
    sigmas,
    cfg: TrainConfig,
    hook=None,
) -> ObjectiveResult:
    """Forward both streams, compute all enabled losses, assemble gradients.

    This is the exact function a training step optimizes, factored out so the
    finite-difference suite can probe the same code path. `hook` applies to
    the perturbed stream; in single-stream modes both input views must alias
    the same samples.
    """
    flags = mode_flags(cfg.mode)
    if flags.dual_stream:
        trace_d = model.forward_batch(inputs_d)
        trace_p = model.forward_batch(inputs_p, hook=hook)
    else:
        trace_d = trace_p = model.forward_batch(inputs_d, hook=hook)

    classifier_grad = np.zeros_like(model.classifier)
    grad_emb_d = np.zeros_like(trace_d.embedding)
    grad_emb_p = np.zeros_like(trace_p.embedding)

    l_dex = l_ce = None
    if flags.use_dex:
        dex_out = batch_dex_loss(
            model.classifier, trace_d.embedding, labels, sigmas, cfg.dex_config()
        )
        l_dex = dex_out.value
        grad_emb_d += cfg.beta2 * dex_out.grad_embedding
        classifier_grad += cfg.beta2 * dex_out.grad_weights
    if flags.use_ce:
        ce_out = batch_cross_entropy(model.classifier, trace_p.embedding, labels)
        l_ce = ce_out.value
        grad_emb_p += cfg.beta1 * ce_out.grad_embedding
        classifier_grad += cfg.beta1 * ce_out.grad_weights

    l_csp = l_csc = l_cst = l_csr = None
    use_csr = flags.use_csr and max(cfg.csr.psi1, cfg.csr.psi2, cfg.csr.psi3) > 0
    if use_csr:
        stream_batch = StreamBatch(labels, domains, trace_d.embedding, trace_p.embedding)
        csr_out = csr_loss(stream_batch, cfg.csr)
        l_csp, l_csc, l_cst = csr_out.csp, csr_out.csc, csr_out.cst
        l_csr = csr_out.value
        grad_emb_d += csr_out.grad_d
        grad_emb_p += csr_out.grad_p

    if flags.dual_stream:
        grads_d, _ = model.backward_batch(trace_d, grad_emb_d)
        grads_p, _ = model.backward_batch(trace_p, grad_emb_p)
        grads = {k: grads_d[k] + grads_p[k] for k in grads_d}
    else:
        grads, _ = model.backward_batch(trace_d, grad_emb_d + grad_emb_p)
    grads["classifier"] = classifier_grad

    l_se = cfg.beta1 * (l_ce or 0.0) + cfg.beta2 * (l_dex or 0.0)
    l_udsx = l_se + (l_csr or 0.0)
    return ObjectiveResult(
        l_ce=l_ce, l_dex=l_dex, l_csp=l_csp, l_csc=l_csc, l_cst=l_cst,
        l_se=l_se, l_csr=l_csr, l_udsx=l_udsx, grads=grads,
        trace_d=trace_d, trace_p=trace_p,
    )


class Trainer:
    """Owns the step lifecycle: model, statistics, and optimizer state."""

    def __init__(self, cfg: TrainConfig, model: BackboneModel, stats: DomainStats):
        self.cfg = cfg
        self.flags = mode_flags(cfg.mode)
        self.model = model
        self.stats = stats
        self.step_count = 0
        self.optimizer = make_optimizer(
            cfg.optimizer, model.parameters(), cfg.weight_decay, cfg.momentum
        )

    def _sigma_snapshots(self, domains: np.ndarray) -> list[np.ndarray | None]:
        out: list[np.ndarray | None] = []
        cache: dict[int, np.ndarray | None] = {}
        for d in domains:
            d = int(d)
            if d not in cache:
                warm = self.stats.covariance_count(d) >= self.cfg.cold_start_min_count
                cache[d] = self.stats.covariance(d) if warm else None
            out.append(cache[d])
        return out

    def train_step(
        self, batch: Batch, epoch: int, rng: np.random.Generator
    ) -> LossReport:
        """One optimizer step; statistics are refreshed after the update."""
        cfg, flags = self.cfg, self.flags
        model = self.model
        perturbing = flags.perturb and cfg.pste.enabled

        sigmas = self._sigma_snapshots(batch.domains) if flags.use_dex else None
        if flags.dual_stream:
            dual = duplicate_batch(batch, rng)
            hook = (
                _pste_batch_hook(
                    dual.view_p.domains, self.stats, cfg.pste, epoch, dual.rng_p,
                    cfg.cold_start_min_count,
                )
                if perturbing
                else None
            )
            inputs_d, inputs_p = dual.view_d.inputs, dual.view_p.inputs
        else:
            hook = (
                _pste_batch_hook(
                    batch.domains, self.stats, cfg.pste, epoch, rng,
                    cfg.cold_start_min_count,
                )
                if perturbing
                else None
            )
            inputs_d = inputs_p = batch.inputs

        objective = evaluate_objective(
            model, inputs_d, inputs_p, batch.labels, batch.domains, sigmas, cfg, hook
        )

        report = LossReport(
            epoch=epoch, step=self.step_count,
            l_ce=objective.l_ce, l_dex=objective.l_dex, l_csp=objective.l_csp,
            l_csc=objective.l_csc, l_cst=objective.l_cst, l_se=objective.l_se,
            l_csr=objective.l_csr, l_udsx=objective.l_udsx,
        )
        values = [v for v in report.components().values() if v is not None]
        if not np.all(np.isfinite(values)):
            raise TrainingAborted(
                f"non-finite loss at epoch {epoch}: {report.components()}", report
            )

        if flags.dual_stream or not perturbing:
            stats_trace = objective.trace_d
        else:
            # perturbed single-stream modes get a dedicated clean pass (with
            # the pre-step parameters) so the tracked variances never see the
            # injected noise
            stats_trace = model.forward_batch(batch.inputs)

        self.optimizer.step(objective.grads, lr_schedule(cfg, epoch))
        model.bump_version()
        self.step_count += 1

        layer_means = [
            stats_trace.activations[k].mean(axis=(2, 3))
            for k in range(model.n_layers)
        ]
        for i in range(batch.size):
            d = int(batch.domains[i])
            self.stats.update_covariance(d, stats_trace.embedding[i])
            for k in range(model.n_layers):
                self.stats.update_channel_means(d, k, layer_means[k][i])
        return report


def weight_distance_entry(model: BackboneModel, epoch: int) -> tuple[int, float]:
    """Run-log entry for the classifier weight spread at this epoch."""
    return epoch, max_interclass_weight_distance(model.classifier)


class _PkSampler:
    """Draws batches of P classes x K instances, seeded and deterministic."""

    def __init__(self, labels: np.ndarray, p: int, k: int, rng: np.random.Generator):
        self.rng = rng
        self.p = p
        self.k = k
        self.by_class = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
        eligible = [c for c, idx in self.by_class.items() if idx.size >= k]
        if len(eligible) < p:
            raise ValueError(
                f"need {p} classes with >= {k} samples, found {len(eligible)}"
            )
        self.classes = np.array(sorted(eligible))

    def draw(self) -> np.ndarray:
        chosen = self.rng.choice(self.classes, size=self.p, replace=False)
        picks = [
            self.rng.choice(self.by_class[int(c)], size=self.k, replace=False)
            for c in chosen
        ]
        return np.concatenate(picks)


@dataclass
class EpochRow:
    epoch: int
    lr: float
    means: dict[str, float | None]
    max_weight_distance: float
    rank1: float | None
    mean_ap: float | None

    def as_csv_values(self) -> list[str]:
        def fmt(v) -> str:
            return "" if v is None else repr(float(v))

        values = [str(self.epoch), fmt(self.lr)]
        for key in RUN_LOG_COLUMNS[2:10]:
            values.append(fmt(self.means.get(key)))
        values.append(fmt(self.max_weight_distance))
        values.append(fmt(self.rank1))
        values.append(fmt(self.mean_ap))
        return values


@dataclass
class RunResult:
    rows: list[EpochRow]
    model: BackboneModel
    stats: DomainStats
    best_epoch: int | None
    best_rank1: float | None
    best_map: float | None
    final_weight_distance: float


def _epoch_means(reports: list[LossReport]) -> dict[str, float | None]:
    keys = ("l_ce", "l_dex", "l_csp", "l_csc", "l_cst", "l_se", "l_csr", "l_udsx")
    means: dict[str, float | None] = {}
    for key in keys:
        values = [getattr(r, key) for r in reports]
        present = [v for v in values if v is not None]
        means[key] = float(np.mean(present)) if present else None
    return means


def run_training(
    cfg: TrainConfig, dataset: Dataset, log_path=None, evaluate: bool = True
) -> RunResult:
    """Train on the non-held-out domains; optionally evaluate every few epochs.

    Writes one CSV row per epoch when log_path is given. Reruns with an
    identical config and dataset produce byte-identical logs.
    """
    images, labels, domains = dataset.train_arrays()
    if images.ndim != 4:
        raise ValueError("dataset has no training split")
    root = np.random.SeedSequence(cfg.seed)
    init_ss, sampler_ss, step_ss = root.spawn(3)

    model = BackboneModel.default(
        n_classes=dataset.spec.n_classes, seed=int(init_ss.generate_state(1)[0])
    )
    expected = (model.input_channels(), *model.input_hw)
    if images.shape[1:] != expected:
        raise ValueError(
            f"dataset images {images.shape[1:]} do not match model input {expected}"
        )
    stats = DomainStats(model.embedding_dim, model.layer_channels(), decay=cfg.stats_decay)
    trainer = Trainer(cfg, model, stats)
    sampler = _PkSampler(
        labels, cfg.batch_p, cfg.batch_k, np.random.default_rng(sampler_ss)
    )
    step_rng = np.random.default_rng(step_ss)

    batch_size = cfg.batch_p * cfg.batch_k
    steps_per_epoch = max(1, images.shape[0] // batch_size)

    rows: list[EpochRow] = []
    best_epoch = None
    best_rank1 = None
    best_map = None
    for epoch in range(cfg.total_epochs):
        reports = []
        for _ in range(steps_per_epoch):
            idx = sampler.draw()
            batch = Batch(images[idx], labels[idx], domains[idx])
            reports.append(trainer.train_step(batch, epoch, step_rng))
        _, weight_distance = weight_distance_entry(model, epoch)

        rank1 = mean_ap = None
        is_eval_epoch = evaluate and (
            epoch % cfg.eval_every == 0 or epoch == cfg.total_epochs - 1
        )
        if is_eval_epoch:
            result = evaluate_held_out(model, dataset)
            rank1 = result.rank_k.get(1)
            mean_ap = result.mean_ap
            if best_rank1 is None or (rank1 is not None and rank1 > best_rank1):
                best_epoch, best_rank1, best_map = epoch, rank1, mean_ap

        rows.append(
            EpochRow(
                epoch=epoch,
                lr=lr_schedule(cfg, epoch),
                means=_epoch_means(reports),
                max_weight_distance=weight_distance,
                rank1=rank1,
                mean_ap=mean_ap,
            )
        )

    if log_path is not None:
        write_run_log(rows, log_path)
    return RunResult(
        rows=rows,
        model=model,
        stats=stats,
        best_epoch=best_epoch,
        best_rank1=best_rank1,
        best_map=best_map,
        final_weight_distance=rows[-1].max_weight_distance if rows else float("nan"),
    )


def write_run_log(rows: list[EpochRow], path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUN_LOG_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv_values())
