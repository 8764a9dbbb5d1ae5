"""Progressive feature-space expansion: layer schedule, channel selection, noise.

One intermediate layer is perturbed per forward pass. The candidate-layer set
starts at the earliest `min_width` layers and widens toward the full list over
`horizon_epochs`. Within the chosen layer only mid-activation channels are
perturbed, with per-channel Gaussian noise scaled by that domain/layer's
running variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .stats import DomainStats


@dataclass(frozen=True)
class PsteConfig:
    layers: tuple[int, ...] = (0, 1, 2, 3, 4)
    min_width: int = 3
    horizon_epochs: int = 60
    strata_lo: float = 0.375
    strata_hi: float = 0.625
    schedule: str = "linear"  # "linear" widens smoothly; "step" jumps at the horizon
    per_element_noise: bool = False
    enabled: bool = True

    def __post_init__(self):
        if not self.layers:
            raise ValueError("layers must be non-empty")
        if not 1 <= self.min_width <= len(self.layers):
            raise ValueError(
                f"min_width must be in [1, {len(self.layers)}], got {self.min_width}"
            )
        if self.horizon_epochs < 1:
            raise ValueError(f"horizon_epochs must be >= 1, got {self.horizon_epochs}")
        if not 0.0 <= self.strata_lo < self.strata_hi <= 1.0:
            raise ValueError(
                f"strata must satisfy 0 <= lo < hi <= 1, got "
                f"[{self.strata_lo}, {self.strata_hi})"
            )
        if self.schedule not in ("linear", "step"):
            raise ValueError(f"schedule must be 'linear' or 'step', got {self.schedule}")


@dataclass
class PsteDecision:
    """Record of one applied expansion: where it hit and what was added."""

    epoch: int
    layer: int
    channel_indices: np.ndarray
    perturbation: np.ndarray


def candidate_layers(cfg: PsteConfig, t: int) -> list[int]:
    """Layers eligible for expansion at epoch t (monotone widening, from 0)."""
    if t < 0:
        raise ValueError(f"epoch must be >= 0, got {t}")
    n = len(cfg.layers)
    if cfg.schedule == "linear":
        last = math.floor((n - 1) * min(t / cfg.horizon_epochs, 1.0))
        last = max(last, cfg.min_width - 1)
    else:
        last = (n - 1) * min(t // cfg.horizon_epochs, 1)
        last = max(last, cfg.min_width)
        last = min(last, n - 1)
    return list(cfg.layers[: last + 1])


def select_layer(candidates, rng: np.random.Generator) -> int:
    """Uniform draw of one layer from the candidate set."""
    if len(candidates) == 0:
        raise ValueError("candidate layer set is empty")
    return int(candidates[int(rng.integers(len(candidates)))])


def stratify_channels(feature, lo: float = 0.375, hi: float = 0.625) -> np.ndarray:
    """Channels whose mean-activation rank falls in [floor(lo*C), floor(hi*C)).

    Ranking is by spatial-mean activation, descending, ties broken by lower
    channel index. Returns a sorted index array (possibly empty for tiny C).
    """
    feature = np.asarray(feature, dtype=float)
    if feature.ndim < 1 or feature.shape[0] < 1:
        raise ValueError(f"feature must have a leading channel axis, got {feature.shape}")
    c = feature.shape[0]
    means = feature.reshape(c, -1).mean(axis=1)
    order = np.argsort(-means, kind="stable")
    start = math.floor(lo * c)
    stop = math.floor(hi * c)
    return np.sort(order[start:stop])


def apply_expansion(
    feature,
    domain: int,
    layer: int,
    stats: DomainStats,
    indices,
    rng: np.random.Generator,
    per_element: bool = False,
) -> np.ndarray:
    """Add zero-mean Gaussian noise to the selected channel rows.

    Noise std per channel is the square root of the tracked variance for
    (domain, layer). By default one draw per channel is broadcast across
    spatial positions. Rows outside `indices` are returned bit-identical.
    """
    feature = np.asarray(feature, dtype=float)
    variance = stats.channel_variance(domain, layer)  # raises if entry missing
    if feature.shape[0] != variance.shape[0]:
        raise ValueError(
            f"feature has {feature.shape[0]} channels but layer {layer} "
            f"registered {variance.shape[0]}"
        )
    out = feature.copy()
    indices = np.asarray(indices, dtype=int)
    if indices.size == 0:
        return out
    std = np.sqrt(variance[indices])
    if per_element:
        noise = rng.standard_normal(out[indices].shape)
        out[indices] += noise * std.reshape((-1,) + (1,) * (out.ndim - 1))
    else:
        noise = rng.standard_normal(indices.size) * std
        out[indices] += noise.reshape((-1,) + (1,) * (out.ndim - 1))
    return out


def expand_feature(
    feature,
    domain: int,
    layer: int,
    stats: DomainStats,
    cfg: PsteConfig,
    epoch: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, PsteDecision]:
    """Stratify channels of one intermediate feature and perturb them."""
    indices = stratify_channels(feature, cfg.strata_lo, cfg.strata_hi)
    perturbed = apply_expansion(
        feature, domain, layer, stats, indices, rng, per_element=cfg.per_element_noise
    )
    decision = PsteDecision(
        epoch=epoch,
        layer=layer,
        channel_indices=indices,
        perturbation=perturbed - feature,
    )
    return perturbed, decision
