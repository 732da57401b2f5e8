"""Resolved run configuration shared by every command.

Settings merge in a fixed order: dataclass defaults, then a JSON config
file, then command-line flags.  The result is validated once, frozen, and
written verbatim (plus a content fingerprint) into each output directory
so any artifact can be traced back to the exact knobs that produced it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import check_ablation
from .train import TrainConfig

KIND_ALIASES = {
    "aff": "affine",
    "affine": "affine",
    "hg": "homography",
    "homography": "homography",
    "tps": "tps",
    "mixed": "mixed",
}
SPLITS = (None, "train", "test")


@dataclass
class RunConfig:
    seed: int = 0
    # synthesis
    pairs: int = 10
    height: int = 96
    width: int = 128
    kind: str = "mixed"
    magnitude: float = 0.5
    test_fraction: float = 0.0
    scenes: int = 4
    workers: int = 1
    # model and optimization
    divisor: int = 1
    ablate: tuple = ()
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.985
    momentum: float = 0.9
    alpha: float = 0.9
    max_steps: int | None = None
    optimizer: str = "momentum"
    # evaluation
    thresholds: tuple = (1.0, 3.0, 5.0)
    split: str | None = None
    limit: int | None = None
    error_maps: bool = False

    def validate(self) -> "RunConfig":
        if self.kind not in KIND_ALIASES:
            raise ConfigError(f"kind must be one of {sorted(KIND_ALIASES)}, got {self.kind!r}")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ConfigError(f"magnitude must lie in [0, 1], got {self.magnitude}")
        if not 0.0 <= self.test_fraction <= 1.0:
            raise ConfigError(f"test fraction must lie in [0, 1], got {self.test_fraction}")
        for name in ("pairs", "scenes", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("height", "width"):
            value = getattr(self, name)
            if value < 32 or value % 32:
                raise ConfigError(f"{name} must be a positive multiple of 32, got {value}")
        if not self.thresholds or any(t <= 0 for t in self.thresholds):
            raise ConfigError(f"thresholds must be positive, got {self.thresholds}")
        if list(self.thresholds) != sorted(set(self.thresholds)):
            raise ConfigError(f"thresholds must be strictly increasing, got {self.thresholds}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS[1:]}, got {self.split!r}")
        if self.limit is not None and self.limit < 1:
            raise ConfigError(f"limit must be positive, got {self.limit}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be positive, got {self.max_steps}")
        self.ablate = check_ablation(self.ablate)
        self.kind = KIND_ALIASES[self.kind]
        self.train_config()  # validates the shared hyperparameters
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_decay=self.lr_decay,
            momentum=self.momentum,
            alpha=self.alpha,
            seed=self.seed,
            ablate=self.ablate,
            divisor=self.divisor,
            max_steps=self.max_steps,
            optimizer=self.optimizer,
        ).validate()

    def to_json(self) -> dict:
        payload = asdict(self)
        payload["ablate"] = list(self.ablate)
        payload["thresholds"] = list(self.thresholds)
        return payload

    def fingerprint(self) -> str:
        digest = hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode())
        return digest.hexdigest()[:12]

    def write_resolved(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = self.to_json()
        payload["fingerprint"] = self.fingerprint()
        path = out_dir / "config.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path


def _coerce(name: str, value):
    # JSON and argparse hand back lists; tuple-typed fields expect tuples
    if name in ("ablate", "thresholds") and isinstance(value, list):
        return tuple(value)
    return value


def load_run_config(config_path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, an optional JSON file, and flag overrides, then validate.

    ``overrides`` entries that are None mean "flag not given" and are skipped.
    """
    known = {f.name for f in fields(RunConfig)}
    merged: dict = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(payload, dict):
            raise ConfigError("config file must hold a JSON object")
        payload.pop("fingerprint", None)  # resolved configs are reusable as inputs
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(payload)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown config override: {key}")
        merged[key] = value
    try:
        cfg = replace(RunConfig(), **{k: _coerce(k, v) for k, v in merged.items()})
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    return cfg.validate()


def parse_thresholds(text: str) -> tuple:
    """Comma-separated pixel thresholds, e.g. "1,3,5"."""
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse thresholds {text!r}") from None


def parse_size(text: str) -> tuple:
    """HxW image size, e.g. "96x128"."""
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"size must look like 96x128, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"cannot parse size {text!r}") from None
