"""Flat key=value config files, overrides, and run manifests.

Config files hold one `key = value` pair per line; `#` starts a comment.
Recognized keys mirror the training, expansion, reunification and data
configs. Unknown keys are errors so typos cannot silently fall back to
defaults. The fully resolved config is echoed into every run manifest.
"""

from __future__ import annotations

import json
import time
from importlib.metadata import PackageNotFoundError, version as _pkg_version
from pathlib import Path

from .csr import CsrConfig
from .pste import PsteConfig
from .synthdata import SynthSpec
from .train import MODES, TrainConfig


class ConfigError(ValueError):
    """Bad key, bad value, or missing required entry in a config."""


def parse_config_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def load_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def apply_overrides(entries: dict[str, str], sets: list[str]) -> dict[str, str]:
    merged = dict(entries)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        merged[key.strip()] = value.strip()
    return merged


def _parse(value: str, kind, key: str):
    try:
        if kind is bool:
            if value.lower() in ("true", "1", "yes", "on"):
                return True
            if value.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc


def _int_tuple(value: str, key: str) -> tuple[int, ...]:
    if not value:
        return ()
    try:
        return tuple(int(v) for v in value.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc


_TRAIN_KEYS = {
    "mode": str,
    "lambda": float,
    "beta1": float,
    "beta2": float,
    "lr": float,
    "warmup_epochs": int,
    "decay_epochs": "int_tuple",
    "decay_factor": float,
    "weight_decay": float,
    "batch_p": int,
    "batch_k": int,
    "epochs": int,
    "seed": int,
    "optimizer": str,
    "momentum": float,
    "cold_start_min_count": int,
    "eval_every": int,
    "freeze_gamma_grad": bool,
    "stats_decay": float,
    "pste.layers": "int_tuple",
    "pste.min_width": int,
    "pste.horizon_epochs": int,
    "pste.strata_lo": float,
    "pste.strata_hi": float,
    "pste.schedule": str,
    "pste.per_element_noise": bool,
    "pste.enabled": bool,
    "csr.psi1": float,
    "csr.psi2": float,
    "csr.psi3": float,
    "csr.margin": float,
    "dataset": str,
}

_DATA_KEYS = {
    "data.n_domains": int,
    "data.n_classes": int,
    "data.samples_per_cell": int,
    "data.channels": int,
    "data.height": int,
    "data.width": int,
    "data.prototype_seed": int,
    "data.class_contrast": float,
    "data.clutter_strength": float,
    "data.style_spread": float,
    "data.sample_jitter": float,
    "data.noise_sigma": float,
    "data.domain_noise_spread": float,
    "data.held_out_domain": int,
    "seed": int,
}


def _check_known(entries: dict[str, str], allowed: dict) -> None:
    for key in entries:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r}")


def build_train_config(entries: dict[str, str]) -> tuple[TrainConfig, str | None]:
    """Resolve a TrainConfig plus the optional dataset path."""
    _check_known(entries, _TRAIN_KEYS)

    def get(key, default):
        if key not in entries:
            return default
        kind = _TRAIN_KEYS[key]
        if kind == "int_tuple":
            return _int_tuple(entries[key], key)
        return _parse(entries[key], kind, key)

    mode = get("mode", "udsx")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    pste = PsteConfig(
        layers=get("pste.layers", (0, 1, 2, 3, 4)),
        min_width=get("pste.min_width", 3),
        horizon_epochs=get("pste.horizon_epochs", 60),
        strata_lo=get("pste.strata_lo", 0.375),
        strata_hi=get("pste.strata_hi", 0.625),
        schedule=get("pste.schedule", "linear"),
        per_element_noise=get("pste.per_element_noise", False),
        enabled=get("pste.enabled", True),
    )
    csr = CsrConfig(
        psi1=get("csr.psi1", 2.0),
        psi2=get("csr.psi2", 5e-4),
        psi3=get("csr.psi3", 1.0),
        margin=get("csr.margin", 0.3),
    )
    try:
        cfg = TrainConfig(
            mode=mode,
            lambda_=get("lambda", 15.0),
            beta1=get("beta1", 1.0),
            beta2=get("beta2", 1.0),
            lr=get("lr", 1.75e-4),
            warmup_epochs=get("warmup_epochs", 10),
            decay_epochs=get("decay_epochs", (30, 55)),
            decay_factor=get("decay_factor", 0.1),
            weight_decay=get("weight_decay", 5e-4),
            batch_p=get("batch_p", 8),
            batch_k=get("batch_k", 4),
            total_epochs=get("epochs", 120),
            seed=get("seed", 0),
            optimizer=get("optimizer", "adam"),
            momentum=get("momentum", 0.9),
            cold_start_min_count=get("cold_start_min_count", 32),
            eval_every=get("eval_every", 1),
            freeze_gamma_grad=get("freeze_gamma_grad", False),
            stats_decay=get("stats_decay", None),
            pste=pste,
            csr=csr,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, entries.get("dataset")


def build_synth_spec(entries: dict[str, str]) -> SynthSpec:
    _check_known(entries, _DATA_KEYS)

    def get(key, default):
        if key not in entries:
            return default
        return _parse(entries[key], _DATA_KEYS[key], key)

    try:
        defaults = SynthSpec()
        return SynthSpec(
            n_domains=get("data.n_domains", defaults.n_domains),
            n_classes=get("data.n_classes", defaults.n_classes),
            samples_per_cell=get("data.samples_per_cell", defaults.samples_per_cell),
            channels=get("data.channels", defaults.channels),
            height=get("data.height", defaults.height),
            width=get("data.width", defaults.width),
            prototype_seed=get("data.prototype_seed", defaults.prototype_seed),
            class_contrast=get("data.class_contrast", defaults.class_contrast),
            clutter_strength=get("data.clutter_strength", defaults.clutter_strength),
            style_spread=get("data.style_spread", defaults.style_spread),
            sample_jitter=get("data.sample_jitter", defaults.sample_jitter),
            noise_sigma=get("data.noise_sigma", defaults.noise_sigma),
            domain_noise_spread=get("data.domain_noise_spread", defaults.domain_noise_spread),
            held_out_domain=get("data.held_out_domain", defaults.held_out_domain),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def code_version() -> str:
    try:
        return _pkg_version("udsx")
    except PackageNotFoundError:
        return "0.1.0+local"


def write_manifest(out_dir, command: str, resolved: dict[str, str], seed: int) -> Path:
    """One manifest per artifact directory with the fully resolved config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": dict(sorted(resolved.items())),
        "seed": seed,
        "code_version": code_version(),
        "created_unix": time.time(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
