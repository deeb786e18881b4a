"""Run configuration: a flat `key = value` file with dotted namespaces.

Full-line comments start with #. Every key is declared in SCHEMA with a type
and default; unknown keys or badly typed values are rejected with the line
number. Command-line flags override file values, which override defaults.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from dataclasses import dataclass, field

from .errors import ConfigError

SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "data.classes": (int, 5),
    "paths.manifest": (str, ""),
    "paths.checkpoint": (str, ""),
    "paths.history": (str, ""),
    "paths.embeddings": (str, ""),
    "paths.metrics": (str, ""),
    "paths.projection": (str, ""),
    "paths.out_dir": (str, ""),
    "network.input_size": (int, 32),
    "network.channels": (int, 16),
    "network.blocks": (int, 2),
    "network.embedding_dim": (int, 32),
    "network.dropout": (float, 0.25),
    "train.margin": (float, 1.0),
    "train.learning_rate": (float, 1e-3),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.epsilon": (float, 1e-8),
    "train.batch_size": (int, 16),
    "train.epochs": (int, 20),
    "train.pairs_per_epoch": (int, 512),
    "train.same_pair_fraction": (float, 0.5),
    "train.balance": (bool, False),
    "preprocess.target_radius": (int, 64),
    "preprocess.keep_fraction": (float, 0.9),
    "preprocess.out_size": (int, 32),
    "preprocess.balance": (bool, False),
    "augment.crop_offset_max": (int, 2),
    "augment.hflip": (bool, True),
    "augment.vflip": (bool, True),
    "augment.blur_sigma_lo": (float, 0.0),
    "augment.blur_sigma_hi": (float, 0.8),
    "augment.rotation_lo": (float, 0.0),
    "augment.rotation_hi": (float, 360.0),
    "synth.per_class": (int, 150),
    "synth.size": (int, 32),
    "eval.k": (int, 0),  # 0 means rank the whole index
    "eval.include_self": (bool, False),
    "project.pca_dim": (int, 50),
    "project.perplexity": (float, 30.0),
    "project.iterations": (int, 500),
    "project.learning_rate": (float, 200.0),
}


def _coerce(key: str, raw: str, lineno: int | None = None):
    want, _ = SCHEMA[key]
    where = f" (line {lineno})" if lineno is not None else ""
    if want is bool:
        low = raw.lower()
        if low in ("true", "false"):
            return low == "true"
        raise ConfigError(f"{key}{where}: expected true or false, got {raw!r}")
    if want is int:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}{where}: expected an integer, got {raw!r}") from exc
    if want is float:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}{where}: expected a number, got {raw!r}") from exc
    return raw


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        merged = {key: default for key, (_, default) in SCHEMA.items()}
        for key, val in self.values.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = val
        self.values = merged

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def override(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        want, _ = SCHEMA[key]
        if want in (int, float, bool) and isinstance(value, str):
            value = _coerce(key, value)
        self.values[key] = want(value) if not isinstance(value, want) else value

    def canonical(self) -> str:
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, bool):
                text = "true" if val else "false"
            elif isinstance(val, float):
                text = repr(val)
            else:
                text = str(val)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    # typed sub-config builders -------------------------------------------

    def network_spec(self):
        from .network import default_network_spec

        return default_network_spec(
            input_size=self["network.input_size"],
            channels=self["network.channels"],
            blocks=self["network.blocks"],
            embedding_dim=self["network.embedding_dim"],
            dropout=self["network.dropout"],
        )

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig(
            margin=self["train.margin"],
            learning_rate=self["train.learning_rate"],
            adam_beta1=self["train.beta1"],
            adam_beta2=self["train.beta2"],
            adam_epsilon=self["train.epsilon"],
            batch_size=self["train.batch_size"],
            epochs=self["train.epochs"],
            pairs_per_epoch=self["train.pairs_per_epoch"],
            same_pair_fraction=self["train.same_pair_fraction"],
            seed=self["seed"],
        )

    def augment_spec(self):
        from .imaging import AugmentSpec

        return AugmentSpec(
            crop_offset_max=self["augment.crop_offset_max"],
            allow_hflip=self["augment.hflip"],
            allow_vflip=self["augment.vflip"],
            blur_sigma_range=(self["augment.blur_sigma_lo"], self["augment.blur_sigma_hi"]),
            rotation_range=(self["augment.rotation_lo"], self["augment.rotation_hi"]),
        )

    def preprocess_config(self):
        from .imaging import PreprocessConfig

        return PreprocessConfig(
            target_radius=self["preprocess.target_radius"],
            keep_fraction=self["preprocess.keep_fraction"],
            out_size=self["preprocess.out_size"],
        )

    def projection_config(self):
        from .projection import ProjectionConfig

        return ProjectionConfig(
            pca_dim=self["project.pca_dim"],
            perplexity=self["project.perplexity"],
            iterations=self["project.iterations"],
            learning_rate=self["project.learning_rate"],
            seed=self["seed"],
        )


def parse_config_file(path) -> RunConfig:
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values: dict[str, object] = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ConfigError(f"line {lineno}: expected key = value, got {text!r}")
        key, _, raw = text.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, lineno)
    return RunConfig(values)


def write_run_metadata(
    artifact_path: str, config: RunConfig, command: str, wall_time_s: float
) -> str:
    """Sidecar JSON recording how an artifact was produced."""
    import numpy

    from . import __version__

    meta = {
        "command": command,
        "seed": config["seed"],
        "config_hash": config.hash(),
        "versions": {
            "siamret": __version__,
            "numpy": numpy.__version__,
            "python": sys.version.split()[0],
        },
        "wall_time_seconds": round(wall_time_s, 3),
    }
    path = str(artifact_path) + ".meta.json"
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


class Stopwatch:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        return False
