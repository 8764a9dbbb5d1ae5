"""Small staged feature extractor with tap points for feature perturbation.

Each stage applies a dense channel-mixing affine map at every spatial site,
average-pools the spatial dims by the stage's reduction factor, then applies a
rectifier. The embedding is the spatial mean of the last stage's output and
feeds a bias-free linear classifier. Forward passes can intercept any stage's
output through a hook, which the backward pass treats as an additive constant
(no gradient through injected noise).

Everything runs in float64 so gradients can be checked against central finite
differences at tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODEL_FORMAT_HEADER = "udsx-model v1"


class StaleTraceError(ValueError):
    """A trace was replayed against a model whose parameters have changed."""


@dataclass(frozen=True)
class StageSpec:
    in_channels: int
    out_channels: int
    spatial_reduction: int = 2
    nonlinearity: str = "relu"

    def __post_init__(self):
        if self.out_channels < 4:
            raise ValueError(
                f"out_channels must be >= 4 so channel selection is possible, "
                f"got {self.out_channels}"
            )
        if self.in_channels < 1 or self.spatial_reduction < 1:
            raise ValueError("in_channels and spatial_reduction must be >= 1")
        if self.nonlinearity != "relu":
            raise ValueError(f"unsupported nonlinearity {self.nonlinearity!r}")


@dataclass
class ForwardTrace:
    """Per-stage activations (post-hook), embedding and logits, batch-first."""

    activations: list[np.ndarray]
    embedding: np.ndarray
    logits: np.ndarray
    version: int
    stage_inputs: list[np.ndarray] = field(repr=False, default_factory=list)
    pre_rectifier: list[np.ndarray] = field(repr=False, default_factory=list)


def _pool_windows(h: int, w: int, reduction: int) -> tuple[int, int]:
    wh = reduction if h >= reduction else 1
    ww = reduction if w >= reduction else 1
    if h % wh or w % ww:
        raise ValueError(f"spatial dims ({h}, {w}) not divisible by pooling {wh}x{ww}")
    return wh, ww


def _avg_pool(x: np.ndarray, wh: int, ww: int) -> np.ndarray:
    """Window-mean over the trailing spatial axes via strided slice sums."""
    if wh == 1 and ww == 1:
        return x.copy()
    acc = None
    for dy in range(wh):
        for dx in range(ww):
            part = x[..., dy::wh, dx::ww]
            acc = part.copy() if acc is None else acc + part
    return acc / (wh * ww)


class BackboneModel:
    """Staged extractor plus bias-free classifier over a single parameter store.

    `version` increments whenever parameters change; traces remember the
    version they were computed under and refuse to backpropagate after an
    update.
    """

    def __init__(
        self,
        stage_specs: list[StageSpec],
        input_hw: tuple[int, int],
        n_classes: int,
        seed: int,
    ):
        if not stage_specs:
            raise ValueError("need at least one stage")
        for a, b in zip(stage_specs, stage_specs[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError("stage channel counts do not chain")
        if n_classes < 2:
            raise ValueError(f"need >= 2 classes, got {n_classes}")
        self.stage_specs = list(stage_specs)
        self.input_hw = (int(input_hw[0]), int(input_hw[1]))
        self.n_classes = int(n_classes)
        self.embedding_dim = stage_specs[-1].out_channels
        self.version = 0

        # symmetric uniform, 1/sqrt(fan_in) scaling with a sqrt(6) gain so the
        # rectified stages keep activation variance (and with it the tracked
        # covariances) at a workable magnitude
        rng = np.random.default_rng(seed)
        self.stage_w: list[np.ndarray] = []
        self.stage_b: list[np.ndarray] = []
        for spec in stage_specs:
            bound = np.sqrt(6.0) / np.sqrt(spec.in_channels)
            self.stage_w.append(
                rng.uniform(-bound, bound, size=(spec.out_channels, spec.in_channels))
            )
            self.stage_b.append(rng.uniform(-bound, bound, size=spec.out_channels))
        bound = 1.0 / np.sqrt(self.embedding_dim)
        self.classifier = rng.uniform(-bound, bound, size=(n_classes, self.embedding_dim))

    @classmethod
    def default(cls, n_classes: int, seed: int) -> "BackboneModel":
        """Five stages, channels (8, 12, 16, 24, 32), for 3x32x16 inputs."""
        channels = (8, 12, 16, 24, 32)
        specs = [StageSpec(3, channels[0])]
        specs += [StageSpec(channels[i], channels[i + 1]) for i in range(4)]
        return cls(specs, (32, 16), n_classes, seed)

    @property
    def n_layers(self) -> int:
        return len(self.stage_specs)

    def layer_channels(self) -> dict[int, int]:
        return {k: spec.out_channels for k, spec in enumerate(self.stage_specs)}

    def input_channels(self) -> int:
        return self.stage_specs[0].in_channels

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed by name (mutate + bump_version to update)."""
        params = {}
        for i in range(self.n_layers):
            params[f"stage{i}.w"] = self.stage_w[i]
            params[f"stage{i}.b"] = self.stage_b[i]
        params["classifier"] = self.classifier
        return params

    def bump_version(self) -> None:
        self.version += 1

    def forward_batch(self, inputs, hook=None) -> ForwardTrace:
        """Run a batch through all stages.

        `hook(k, activations)` is called after every stage with the batch
        tensor and must return a same-shaped tensor; the returned tensor is
        what downstream stages (and the trace) see.
        """
        x = np.asarray(inputs, dtype=float)
        if x.ndim != 4:
            raise ValueError(f"expected (m, C, H, W) input, got shape {x.shape}")
        expected = (self.input_channels(), *self.input_hw)
        if x.shape[1:] != expected:
            raise ValueError(f"input shape {x.shape[1:]} does not match {expected}")

        stage_inputs: list[np.ndarray] = []
        pre_rectifier: list[np.ndarray] = []
        activations: list[np.ndarray] = []
        for k, spec in enumerate(self.stage_specs):
            stage_inputs.append(x)
            m, _, h, w = x.shape
            # batched GEMM over flattened spatial sites; per-sample results are
            # bit-identical to a batch of one
            mixed = np.matmul(self.stage_w[k], x.reshape(m, -1, h * w))
            mixed = mixed.reshape(m, spec.out_channels, h, w)
            mixed += self.stage_b[k][None, :, None, None]
            wh, ww = _pool_windows(h, w, spec.spatial_reduction)
            pooled = _avg_pool(mixed, wh, ww)
            pre_rectifier.append(pooled)
            out = np.maximum(pooled, 0.0)
            if hook is not None:
                out = np.asarray(hook(k, out), dtype=float)
                if out.shape != pooled.shape:
                    raise ValueError(
                        f"hook at layer {k} changed shape {pooled.shape} -> {out.shape}"
                    )
            activations.append(out)
            x = out

        embedding = x.mean(axis=(2, 3))
        # einsum keeps the contraction order independent of the batch size, so
        # batched and single-sample forwards agree bit for bit
        logits = np.einsum("md,cd->mc", embedding, self.classifier)
        return ForwardTrace(
            activations=activations,
            embedding=embedding,
            logits=logits,
            version=self.version,
            stage_inputs=stage_inputs,
            pre_rectifier=pre_rectifier,
        )

    def forward(self, image, perturb_hook=None) -> ForwardTrace:
        """Single-image forward; trace fields keep a leading batch axis of 1.

        perturb_hook is an optional (layer, transform) pair; transform receives
        the unbatched stage output and must return a same-shaped tensor.
        """
        x = np.asarray(image, dtype=float)
        if x.ndim != 3:
            raise ValueError(f"expected (C, H, W) image, got shape {x.shape}")
        hook = None
        if perturb_hook is not None:
            layer, transform = perturb_hook

            def hook(k, batch):
                if k != layer:
                    return batch
                out = batch.copy()
                out[0] = transform(batch[0])
                return out

        return self.forward_batch(x[None], hook=hook)

    def backward_batch(
        self, trace: ForwardTrace, grad_embedding
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Reverse-mode gradients of the stages given d(loss)/d(embedding).

        Hook transforms are treated as additive constants. Returns parameter
        gradients (stage weights and biases; the classifier's gradient is
        produced by the loss itself) and the gradient at the input tensor.
        """
        if trace.version != self.version:
            raise StaleTraceError(
                f"trace was computed at version {trace.version}, "
                f"model is at {self.version}"
            )
        grad_embedding = np.asarray(grad_embedding, dtype=float)
        if grad_embedding.shape != trace.embedding.shape:
            raise ValueError(
                f"grad shape {grad_embedding.shape} does not match "
                f"embedding {trace.embedding.shape}"
            )

        last = trace.activations[-1]
        m, c, h, w = last.shape
        grad = np.broadcast_to(
            grad_embedding[:, :, None, None] / (h * w), last.shape
        ).copy()

        grads: dict[str, np.ndarray] = {}
        for k in range(self.n_layers - 1, -1, -1):
            spec = self.stage_specs[k]
            pooled = trace.pre_rectifier[k]
            grad_pooled = grad * (pooled > 0)
            inputs = trace.stage_inputs[k]
            m, c_in, mh, mw = inputs.shape
            c_out = spec.out_channels
            wh, ww = _pool_windows(mh, mw, spec.spatial_reduction)
            hp, wp = mh // wh, mw // ww
            # the mixing weight gradient contracts against the window-averaged
            # inputs: within a pooling window the upstream gradient is constant
            in_avg = _avg_pool(inputs, wh, ww).reshape(m, c_in, hp * wp)
            gp_flat = grad_pooled.reshape(m, c_out, hp * wp)
            grads[f"stage{k}.w"] = np.matmul(
                gp_flat, in_avg.transpose(0, 2, 1)
            ).sum(axis=0)
            grads[f"stage{k}.b"] = gp_flat.sum(axis=(0, 2))
            back_pooled = np.matmul(self.stage_w[k].T, gp_flat / (wh * ww))
            grad = (
                np.broadcast_to(
                    back_pooled.reshape(m, c_in, hp, 1, wp, 1),
                    (m, c_in, hp, wh, wp, ww),
                )
                .reshape(m, c_in, mh, mw)
            )
        return grads, grad

    def save(self, path) -> None:
        """Write parameters to the versioned text checkpoint format."""
        lines = [MODEL_FORMAT_HEADER]
        lines.append(f"input {self.input_channels()} {self.input_hw[0]} {self.input_hw[1]}")
        lines.append(f"classes {self.n_classes}")
        lines.append(f"stages {self.n_layers}")
        for k, spec in enumerate(self.stage_specs):
            lines.append(
                f"stage {k} in {spec.in_channels} out {spec.out_channels} "
                f"reduction {spec.spatial_reduction} nonlinearity {spec.nonlinearity}"
            )
        for name, arr in self.parameters().items():
            shape = " ".join(str(s) for s in arr.shape)
            lines.append(f"param {name} {shape}")
            lines.append(" ".join(float(x).hex() for x in arr.ravel()))
        lines.append("end")
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "BackboneModel":
        with open(path, "r", encoding="ascii") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if not lines or lines[0] != MODEL_FORMAT_HEADER:
            raise ValueError(f"unrecognized model format header in {path}")
        if "end" not in lines:
            raise ValueError(f"truncated model checkpoint {path}")
        _, in_c, in_h, in_w = lines[1].split()
        n_classes = int(lines[2].split()[1])
        n_stages = int(lines[3].split()[1])
        specs = []
        for k in range(n_stages):
            parts = lines[4 + k].split()
            specs.append(
                StageSpec(
                    in_channels=int(parts[3]),
                    out_channels=int(parts[5]),
                    spatial_reduction=int(parts[7]),
                    nonlinearity=parts[9],
                )
            )
        model = cls(specs, (int(in_h), int(in_w)), n_classes, seed=0)
        params = model.parameters()
        i = 4 + n_stages
        while i < len(lines) and lines[i] != "end":
            parts = lines[i].split()
            if parts[0] != "param":
                raise ValueError(f"unexpected line in checkpoint: {lines[i]!r}")
            name = parts[1]
            shape = tuple(int(s) for s in parts[2:])
            values = np.array([float.fromhex(v) for v in lines[i + 1].split()])
            if name not in params or values.size != np.prod(shape):
                raise ValueError(f"bad parameter block {name!r} in checkpoint")
            params[name][...] = values.reshape(shape)
            i += 2
        return model
