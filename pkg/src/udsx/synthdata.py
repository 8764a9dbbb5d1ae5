"""Deterministic multi-domain synthetic dataset generator and file I/O.

A scene is a smooth class pattern living purely in channel contrasts (zero
per-site channel mean) plus a much stronger common-mode clutter field drawn
fresh for every sample, plus white sensor noise. A domain restyles scenes
with a per-channel affine map, a circular spatial shift, and its own noise
level; samples may also carry a small spatial jitter of their own.

The construction gives training something real to learn: a channel mixture
that cancels the clutter exposes the class signal cleanly, while any generic
mixture is swamped by it. Because the styles rescale channels per domain,
the cancelling mixture shifts from domain to domain, which is exactly the
generalization gap the expansion machinery is meant to close.

One domain is held out: its samples form the query/gallery retrieval split
(one query per class, rest gallery) while the remaining domains form the
training split. Generation is reproducible and parallelizable: every
(domain, class) cell draws from its own seed stream derived from the dataset
seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

DATASET_MAGIC = b"UDSXSYN1"
_SPLIT_CODES = {"train": 0, "query": 1, "gallery": 2}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


class DataFormatError(ValueError):
    """Dataset file is unreadable: bad magic, truncation, or corrupt header."""


@dataclass(frozen=True)
class SynthSpec:
    n_domains: int = 4
    n_classes: int = 20
    samples_per_cell: int = 16
    channels: int = 3
    height: int = 32
    width: int = 16
    prototype_seed: int = 7
    class_contrast: float = 2.0
    clutter_strength: float = 2.0
    style_spread: float = 0.5
    sample_jitter: float = 1.0  # std (pixels) of per-sample circular shifts
    noise_sigma: float = 0.1
    domain_noise_spread: float = 0.25
    held_out_domain: int = -1  # negative counts from the end

    def __post_init__(self):
        if self.n_domains < 2:
            raise ValueError(f"n_domains must be >= 2, got {self.n_domains}")
        if self.n_classes < 4:
            raise ValueError(f"n_classes must be >= 4, got {self.n_classes}")
        if self.samples_per_cell < 1:
            raise ValueError("samples_per_cell must be >= 1")
        if self.channels < 2 or min(self.height, self.width) < 1:
            raise ValueError("images need >= 2 channels and spatial dims >= 1")
        if self.noise_sigma < 0 or self.style_spread < 0 or self.domain_noise_spread < 0:
            raise ValueError("spreads and noise must be >= 0")
        if self.sample_jitter < 0:
            raise ValueError(f"sample_jitter must be >= 0, got {self.sample_jitter}")
        if self.clutter_strength < 0:
            raise ValueError(
                f"clutter_strength must be >= 0, got {self.clutter_strength}"
            )
        if self.class_contrast <= 0:
            raise ValueError(f"class_contrast must be > 0, got {self.class_contrast}")
        if not -self.n_domains <= self.held_out_domain < self.n_domains:
            raise ValueError(f"held_out_domain {self.held_out_domain} out of range")

    def resolved_held_out(self) -> int:
        return self.held_out_domain % self.n_domains

    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass
class Record:
    domain: int
    label: int
    split: str
    image: np.ndarray
    camera: int = -1  # reserved for real-data protocols; unused here


@dataclass
class Dataset:
    spec: SynthSpec
    records: list[Record] = field(default_factory=list)

    def _arrays(self, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rows = [r for r in self.records if r.split == split]
        images = np.stack([r.image for r in rows]) if rows else np.empty((0,))
        labels = np.array([r.label for r in rows], dtype=int)
        domains = np.array([r.domain for r in rows], dtype=int)
        return images, labels, domains

    def train_arrays(self):
        return self._arrays("train")

    def query_arrays(self):
        return self._arrays("query")

    def gallery_arrays(self):
        return self._arrays("gallery")

    def train_classes(self) -> int:
        return len({r.label for r in self.records if r.split == "train"})


def domain_styles(spec: SynthSpec) -> list[dict]:
    """Per-domain channel affine, circular shift, and noise multiplier.

    Styles are part of the generated world, so they derive from the prototype
    seed, not the sampling seed. Shift magnitudes grow with the style spread.
    """
    styles = []
    for d in range(spec.n_domains):
        rng = np.random.default_rng(
            np.random.SeedSequence(spec.prototype_seed, spawn_key=(1, d))
        )
        scale = np.exp(spec.style_spread * rng.standard_normal(spec.channels))
        shift = spec.style_spread * rng.standard_normal(spec.channels)
        noise_scale = float(np.exp(spec.domain_noise_spread * rng.standard_normal()))
        dy = int(round(spec.style_spread * rng.normal(0, spec.height / 6)))
        dx = int(round(spec.style_spread * rng.normal(0, spec.width / 6)))
        styles.append(
            {"scale": scale, "shift": shift, "noise_scale": noise_scale, "roll": (dy, dx)}
        )
    return styles


def _smooth(arr: np.ndarray, radius: int = 2) -> np.ndarray:
    """Circular box blur over the two trailing (spatial) axes."""
    out = np.zeros_like(arr)
    count = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            out += np.roll(arr, (dy, dx), axis=(-2, -1))
            count += 1
    return out / count


def class_prototypes(spec: SynthSpec) -> np.ndarray:
    """Smooth per-class patterns confined to channel contrasts.

    Each pattern has exactly zero channel mean at every spatial site, so a
    common-mode clutter field is orthogonal to the class signal there.
    Smoothness makes prototype correlation decay gradually under spatial
    shifts rather than all at once.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.prototype_seed, spawn_key=(0,)))
    prototypes = []
    for _ in range(spec.n_classes):
        raw = _smooth(rng.standard_normal(spec.image_shape()))
        raw -= raw.mean(axis=0, keepdims=True)
        std = raw.std()
        if std > 0:
            raw /= std
        prototypes.append(spec.class_contrast * raw)
    return np.stack(prototypes)


def generate(spec: SynthSpec, seed: int) -> Dataset:
    """Sample a full dataset; bit-identical for identical (spec, seed)."""
    prototypes = class_prototypes(spec)
    styles = domain_styles(spec)
    held = spec.resolved_held_out()
    records: list[Record] = []
    for d in range(spec.n_domains):
        scale = styles[d]["scale"][:, None, None]
        shift = styles[d]["shift"][:, None, None]
        roll = styles[d]["roll"]
        sigma = spec.noise_sigma * styles[d]["noise_scale"]
        for c in range(spec.n_classes):
            cell_rng = np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(d, c))
            )
            # a retrieval split needs a gallery mate per query, so cells of
            # size 1 in the held-out domain become gallery-only
            query_index = (
                int(cell_rng.integers(spec.samples_per_cell))
                if spec.samples_per_cell >= 2
                else -1
            )
            for i in range(spec.samples_per_cell):
                jitter = (0, 0)
                if spec.sample_jitter > 0:
                    jitter = (
                        int(round(cell_rng.normal(0, spec.sample_jitter))),
                        int(round(cell_rng.normal(
                            0, spec.sample_jitter * spec.width / spec.height
                        ))),
                    )
                total_roll = (roll[0] + jitter[0], roll[1] + jitter[1])
                scene = np.roll(prototypes[c], total_roll, axis=(1, 2))
                if spec.clutter_strength > 0:
                    field = _smooth(cell_rng.standard_normal((spec.height, spec.width)))
                    field /= max(field.std(), 1e-12)
                    scene = scene + spec.clutter_strength * field[None, :, :]
                if sigma > 0:
                    scene = scene + sigma * cell_rng.standard_normal(spec.image_shape())
                image = scale * scene + shift
                if d != held:
                    split = "train"
                elif i == query_index:
                    split = "query"
                else:
                    split = "gallery"
                records.append(Record(domain=d, label=c, split=split, image=image))
    return Dataset(spec=spec, records=records)


def nearest_centroid_accuracy(dataset: Dataset, fit_domain: int, test_domain: int) -> float:
    """Pixel-space nearest-centroid accuracy fit on one domain, tested on another.

    Within a domain the cell samples are split in half (fit/test); this is the
    independent yardstick for the generator's domain gap.
    """
    by_cell: dict[tuple[int, int], list[np.ndarray]] = {}
    for r in dataset.records:
        by_cell.setdefault((r.domain, r.label), []).append(r.image)
    classes = sorted({c for (_, c) in by_cell})
    centroids = []
    for c in classes:
        cell = by_cell[(fit_domain, c)]
        half = max(1, len(cell) // 2)
        centroids.append(np.mean(cell[:half], axis=0).ravel())
    centroids = np.stack(centroids)
    correct = 0
    total = 0
    for c in classes:
        cell = by_cell[(test_domain, c)]
        start = max(1, len(cell) // 2) if test_domain == fit_domain else 0
        for image in cell[start:]:
            dists = ((centroids - image.ravel()) ** 2).sum(axis=1)
            correct += int(classes[int(np.argmin(dists))] == c)
            total += 1
    return correct / total if total else float("nan")


def save(dataset: Dataset, path) -> None:
    """Binary dump of a dataset.

    Layout: 8 magic bytes; little-endian int64 header length; a UTF-8 JSON
    header line (spec fields, record count, image shape, dtype); then one
    fixed-size record per sample: int64 domain, int64 label, int64 camera,
    uint8 split code, raw float64 image bytes in C order.
    """
    spec = dataset.spec
    header = {
        "spec": asdict(spec),
        "n_records": len(dataset.records),
        "dtype": "float64",
        "image_shape": list(spec.image_shape()),
    }
    header_bytes = (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<q", len(header_bytes)))
        fh.write(header_bytes)
        for r in dataset.records:
            fh.write(
                struct.pack("<qqqB", r.domain, r.label, r.camera, _SPLIT_CODES[r.split])
            )
            fh.write(np.ascontiguousarray(r.image, dtype=np.float64).tobytes())


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DataFormatError(
            f"bad magic in {path}: expected {DATASET_MAGIC!r}, "
            f"got {blob[:len(DATASET_MAGIC)]!r}"
        )
    offset = len(DATASET_MAGIC)
    try:
        (header_len,) = struct.unpack_from("<q", blob, offset)
    except struct.error as exc:
        raise DataFormatError(f"truncated header length at offset {offset}") from exc
    offset += 8
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"corrupt header at offset {offset}") from exc
    offset += header_len
    spec = SynthSpec(**header["spec"])
    shape = tuple(header["image_shape"])
    image_bytes = int(np.prod(shape)) * 8
    prefix_bytes = 25  # three int64 fields plus the split code byte
    record_bytes = prefix_bytes + image_bytes
    records = []
    for _ in range(header["n_records"]):
        if offset + record_bytes > len(blob):
            raise DataFormatError(
                f"truncated record at offset {offset}: need {record_bytes} bytes, "
                f"have {len(blob) - offset}"
            )
        domain, label, camera, split_code = struct.unpack_from("<qqqB", blob, offset)
        image = np.frombuffer(
            blob,
            dtype=np.float64,
            count=int(np.prod(shape)),
            offset=offset + prefix_bytes,
        ).reshape(shape)
        records.append(
            Record(
                int(domain),
                int(label),
                _SPLIT_NAMES[int(split_code)],
                image.copy(),
                camera=int(camera),
            )
        )
        offset += record_bytes
    if offset != len(blob):
        raise DataFormatError(f"{len(blob) - offset} trailing bytes after records")
    return Dataset(spec=spec, records=records)
