"""Running per-domain statistics: embedding covariance and channel variances.

Accumulators use exact single-pass (Welford-style) updates with population
normalization, so a single sample has zero variance and results do not depend
on batching. An optional exponential-decay mode is available for long runs.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

STATS_FORMAT_HEADER = "udsx-stats v1"


class UnknownDomainError(KeyError):
    """Statistics were requested for a domain that was never updated."""


class UnknownLayerError(KeyError):
    """Channel statistics referenced a layer that was never registered."""


class RunningCovariance:
    """Streaming mean and covariance of fixed-dimension vectors.

    The comoment update is symmetrized (average of the two outer products),
    which keeps the accumulated matrix exactly symmetric at every step while
    still telescoping to sum((x - mean)(x - mean)^T) in exact arithmetic.
    """

    def __init__(self, dim: int, decay: float | None = None):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        if decay is not None and not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {decay}")
        self.dim = int(dim)
        self.decay = decay
        self.count = 0
        self.mean = np.zeros(self.dim)
        self.comoment = np.zeros((self.dim, self.dim))

    def update(self, x) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected vector of dim {self.dim}, got shape {x.shape}")
        if self.decay is None:
            self.count += 1
            d1 = x - self.mean
            self.mean += d1 / self.count
            d2 = x - self.mean
            cross = 0.5 * (d1[:, None] * d2[None, :] + d2[:, None] * d1[None, :])
            self.comoment += cross
        else:
            if self.count == 0:
                self.mean = x.copy()
            else:
                g = self.decay
                d = x - self.mean
                self.mean = self.mean + (1.0 - g) * d
                self.comoment = g * self.comoment + (1.0 - g) * np.outer(d, d)
            self.count += 1

    def covariance(self) -> np.ndarray:
        """Population covariance; the zero matrix before any sample arrives."""
        if self.count == 0:
            return np.zeros((self.dim, self.dim))
        if self.decay is None:
            return self.comoment / self.count
        return self.comoment.copy()


class RunningChannelVariance:
    """Per-channel streaming variance over spatially averaged activations."""

    def __init__(self, layer: int, domain: int, channels: int, decay: float | None = None):
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        self.layer = int(layer)
        self.domain = int(domain)
        self.channels = int(channels)
        self.decay = decay
        self.count = 0
        self.mean = np.zeros(self.channels)
        self.m2 = np.zeros(self.channels)

    def update(self, channel_means) -> None:
        x = np.asarray(channel_means, dtype=float)
        if x.shape != (self.channels,):
            raise ValueError(
                f"expected {self.channels} channel means, got shape {x.shape}"
            )
        if self.decay is None:
            self.count += 1
            d1 = x - self.mean
            self.mean += d1 / self.count
            d2 = x - self.mean
            self.m2 += d1 * d2
        else:
            if self.count == 0:
                self.mean = x.copy()
            else:
                g = self.decay
                d = x - self.mean
                self.mean = self.mean + (1.0 - g) * d
                self.m2 = g * self.m2 + (1.0 - g) * d * d
            self.count += 1

    def variance(self) -> np.ndarray:
        """Population variance per channel, clamped at 0 against roundoff."""
        if self.count == 0:
            return np.zeros(self.channels)
        if self.decay is None:
            return np.maximum(self.m2, 0.0) / self.count
        return np.maximum(self.m2, 0.0)


class DomainStats:
    """Registry of per-domain second-order statistics.

    Holds one embedding covariance per domain and one channel-variance
    accumulator per (domain, layer). Lookups for domains that were never
    updated raise instead of returning silent zeros; use the *_count
    queries to probe warm-up state without erroring.

    Single writer per instance; concurrent reads are safe when no writer
    is active. No internal locking.
    """

    def __init__(
        self,
        embedding_dim: int,
        layer_channels: Mapping[int, int],
        decay: float | None = None,
    ):
        if embedding_dim < 1:
            raise ValueError(f"embedding_dim must be >= 1, got {embedding_dim}")
        self.embedding_dim = int(embedding_dim)
        self.layer_channels = {int(k): int(c) for k, c in layer_channels.items()}
        self.decay = decay
        self._covariances: dict[int, RunningCovariance] = {}
        self._channel_vars: dict[tuple[int, int], RunningChannelVariance] = {}

    def domains(self) -> list[int]:
        return sorted(self._covariances)

    def update_covariance(self, domain: int, embedding) -> None:
        acc = self._covariances.get(domain)
        if acc is None:
            acc = RunningCovariance(self.embedding_dim, decay=self.decay)
            self._covariances[domain] = acc
        acc.update(embedding)

    def update_channel_variance(self, domain: int, layer: int, feature) -> None:
        if layer not in self.layer_channels:
            raise UnknownLayerError(f"layer {layer} was never registered")
        feature = np.asarray(feature, dtype=float)
        channels = self.layer_channels[layer]
        if feature.ndim < 2 or feature.shape[0] != channels:
            raise ValueError(
                f"layer {layer} expects feature with {channels} channel rows, "
                f"got shape {feature.shape}"
            )
        self.update_channel_means(domain, layer, feature.reshape(channels, -1).mean(axis=1))

    def update_channel_means(self, domain: int, layer: int, means) -> None:
        """Update with an already spatially averaged channel vector."""
        if layer not in self.layer_channels:
            raise UnknownLayerError(f"layer {layer} was never registered")
        key = (domain, layer)
        acc = self._channel_vars.get(key)
        if acc is None:
            acc = RunningChannelVariance(
                layer, domain, self.layer_channels[layer], decay=self.decay
            )
            self._channel_vars[key] = acc
        acc.update(means)

    def covariance(self, domain: int) -> np.ndarray:
        acc = self._covariances.get(domain)
        if acc is None:
            raise UnknownDomainError(f"no covariance statistics for domain {domain}")
        return acc.covariance()

    def channel_variance(self, domain: int, layer: int) -> np.ndarray:
        if layer not in self.layer_channels:
            raise UnknownLayerError(f"layer {layer} was never registered")
        acc = self._channel_vars.get((domain, layer))
        if acc is None:
            raise UnknownDomainError(
                f"no channel statistics for domain {domain}, layer {layer}"
            )
        return acc.variance()

    def covariance_count(self, domain: int) -> int:
        """Samples absorbed into the domain covariance; 0 for unseen domains."""
        acc = self._covariances.get(domain)
        return 0 if acc is None else acc.count

    def channel_count(self, domain: int, layer: int) -> int:
        acc = self._channel_vars.get((domain, layer))
        return 0 if acc is None else acc.count


def quadratic_form(sigma, v) -> float:
    """v^T sigma v with shape validation."""
    sigma = np.asarray(sigma, dtype=float)
    v = np.asarray(v, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"sigma must be square, got shape {sigma.shape}")
    if v.shape != (sigma.shape[0],):
        raise ValueError(f"vector shape {v.shape} does not conform to {sigma.shape}")
    return float(v @ sigma @ v)


def _hex_values(a: np.ndarray) -> str:
    return " ".join(float(x).hex() for x in np.ravel(a))


def _parse_hex(text: str, n: int) -> np.ndarray:
    parts = text.split()
    if len(parts) != n:
        raise ValueError(f"expected {n} values, got {len(parts)}")
    return np.array([float.fromhex(p) for p in parts])


def save_stats(stats: DomainStats, path) -> None:
    """Write a snapshot in a versioned text format (hex floats, lossless)."""
    lines = [STATS_FORMAT_HEADER]
    lines.append(f"embedding_dim {stats.embedding_dim}")
    layers = ",".join(f"{k}:{c}" for k, c in sorted(stats.layer_channels.items()))
    lines.append(f"layers {layers}")
    lines.append(f"decay {'none' if stats.decay is None else repr(stats.decay)}")
    for d in stats.domains():
        acc = stats._covariances[d]
        lines.append(f"covariance domain={d} dim={acc.dim} count={acc.count}")
        lines.append("mean " + _hex_values(acc.mean))
        for row in acc.comoment:
            lines.append("row " + _hex_values(row))
    for (d, k) in sorted(stats._channel_vars):
        acc = stats._channel_vars[(d, k)]
        lines.append(
            f"channelvar domain={d} layer={k} channels={acc.channels} count={acc.count}"
        )
        lines.append("mean " + _hex_values(acc.mean))
        lines.append("m2 " + _hex_values(acc.m2))
    lines.append("end")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_stats(path) -> DomainStats:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != STATS_FORMAT_HEADER:
        raise ValueError(f"unrecognized stats format header in {path}")
    if lines[-1] != "end" and "end" not in lines:
        raise ValueError(f"truncated stats file {path}")

    def fields(line: str, prefix: str) -> dict[str, str]:
        if not line.startswith(prefix):
            raise ValueError(f"expected '{prefix}' line, got: {line!r}")
        return dict(part.split("=", 1) for part in line[len(prefix):].split())

    embedding_dim = int(lines[1].split()[1])
    layer_spec = lines[2].split(" ", 1)[1] if " " in lines[2] else ""
    layer_channels = {}
    if layer_spec:
        for item in layer_spec.split(","):
            k, c = item.split(":")
            layer_channels[int(k)] = int(c)
    decay_text = lines[3].split()[1]
    decay = None if decay_text == "none" else float(decay_text)

    stats = DomainStats(embedding_dim, layer_channels, decay=decay)
    i = 4
    while i < len(lines) and lines[i] != "end":
        line = lines[i]
        if line.startswith("covariance "):
            meta = fields(line, "covariance ")
            dim = int(meta["dim"])
            acc = RunningCovariance(dim, decay=decay)
            acc.count = int(meta["count"])
            acc.mean = _parse_hex(lines[i + 1].split(" ", 1)[1], dim)
            rows = [
                _parse_hex(lines[i + 2 + r].split(" ", 1)[1], dim) for r in range(dim)
            ]
            acc.comoment = np.vstack(rows)
            stats._covariances[int(meta["domain"])] = acc
            i += 2 + dim
        elif line.startswith("channelvar "):
            meta = fields(line, "channelvar ")
            channels = int(meta["channels"])
            acc = RunningChannelVariance(
                int(meta["layer"]), int(meta["domain"]), channels, decay=decay
            )
            acc.count = int(meta["count"])
            acc.mean = _parse_hex(lines[i + 1].split(" ", 1)[1], channels)
            acc.m2 = _parse_hex(lines[i + 2].split(" ", 1)[1], channels)
            stats._channel_vars[(acc.domain, acc.layer)] = acc
            i += 3
        else:
            raise ValueError(f"unexpected line in stats file: {line!r}")
    return stats
