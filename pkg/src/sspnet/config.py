"""Experiment configuration: flat dotted keys, JSON files, ``--key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

from .data import SynthConfig
from .errors import DataError
from .neck import NECKS

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data.image_size": 64,
    "data.n_images": 20,
    "data.min_objects": 3,
    "data.max_objects": 8,
    "data.min_scale": 2.0,
    "data.max_scale": 28.0,
    "data.occluded_fraction": 0.2,
    "data.distractors": 2,
    "data.noise": 0.04,
    "model.neck": "sspnet",
    "model.channels": 4,
    "model.width": 4,
    "model.gate_bias": 2.0,
    "anchors.kmeans": True,
    "anchors.pos_thr": 0.5,
    "loss.alpha": 0.01,
    "loss.beta": 1.0,
    "loss.mu1": 1.0,
    "loss.mu2": 1.0,
    "wns.lambda": 0.6,
    "optim.lr": 0.002,
    "optim.momentum": 0.9,
    "optim.weight_decay": 1e-4,
    "optim.epochs": 10,
    "optim.decay_epoch": 8,
    "optim.decay_factor": 0.1,
    "optim.grad_clip": 10.0,
    "detector.train_proposals": 48,
    "detector.test_proposals": 32,
    "detector.score_thr": 0.05,
    "detector.nms_iou": 0.5,
    "crop.width": 640,
    "crop.height": 512,
    "crop.overlap": 30,
}

# keys whose values must be strictly positive
_POSITIVE = {
    "data.image_size", "data.n_images", "data.min_scale", "data.max_scale", "model.channels",
    "model.width", "optim.epochs", "optim.decay_factor", "optim.grad_clip",
    "detector.train_proposals", "detector.test_proposals", "crop.width", "crop.height",
}
_NON_NEGATIVE = {
    "seed", "data.min_objects", "data.max_objects", "data.distractors", "data.noise", "loss.alpha",
    "loss.beta", "loss.mu1", "loss.mu2", "optim.lr", "optim.momentum", "optim.weight_decay",
    "optim.decay_epoch", "crop.overlap", "detector.score_thr",
}
_UNIT = {"data.occluded_fraction", "wns.lambda", "detector.nms_iou"}


def _coerce(key: str, value: Any) -> Any:
    ref = DEFAULTS[key]
    if isinstance(ref, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise DataError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(ref, int):
        try:
            f = float(value)
        except (TypeError, ValueError):
            raise DataError(f"{key}: expected an integer, got {value!r}") from None
        if f != int(f):
            raise DataError(f"{key}: expected an integer, got {value!r}")
        return int(f)
    if isinstance(ref, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise DataError(f"{key}: expected a number, got {value!r}") from None
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self):
        merged = dict(DEFAULTS)
        for k, v in self.values.items():
            if k not in DEFAULTS:
                raise DataError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v)
        self.values = merged
        self.validate()

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        for k in _POSITIVE:
            if not v[k] > 0:
                raise DataError(f"{k} must be positive, got {v[k]}")
        for k in _NON_NEGATIVE:
            if v[k] < 0:
                raise DataError(f"{k} must be non-negative, got {v[k]}")
        for k in _UNIT:
            if not 0.0 <= v[k] <= 1.0:
                raise DataError(f"{k} must lie in [0, 1], got {v[k]}")
        if v["model.neck"] not in NECKS:
            raise DataError(f"model.neck must be one of {NECKS}, got {v['model.neck']!r}")
        if v["data.image_size"] % 32:
            raise DataError(f"data.image_size must be divisible by 32, got {v['data.image_size']}")
        if v["data.min_objects"] > v["data.max_objects"]:
            raise DataError("data.min_objects exceeds data.max_objects")
        if v["data.min_scale"] > v["data.max_scale"]:
            raise DataError("data.min_scale exceeds data.max_scale")
        if v["crop.overlap"] >= min(v["crop.width"], v["crop.height"]):
            raise DataError("crop.overlap must be smaller than the crop")

    def replace(self, **dotted) -> "ExperimentConfig":
        vals = dict(self.values)
        vals.update(dotted)
        return ExperimentConfig(vals)

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        return self.replace(**overrides)

    def to_json(self) -> dict[str, Any]:
        return dict(sorted(self.values.items()))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    # -- views ------------------------------------------------------------
    def synth(self) -> SynthConfig:
        names = {f.name for f in fields(SynthConfig)}
        return SynthConfig(**{k[5:]: v for k, v in self.values.items() if k.startswith("data.") and k[5:] in names})

    def detector_params(self) -> dict[str, Any]:
        v = self.values
        return {
            "neck": v["model.neck"], "channels": v["model.channels"], "width": v["model.width"],
            "gate_bias": v["model.gate_bias"],
            "kmeans_anchors": v["anchors.kmeans"], "pos_thr": v["anchors.pos_thr"],
            "alpha": v["loss.alpha"], "beta": v["loss.beta"], "mu1": v["loss.mu1"], "mu2": v["loss.mu2"],
            "wns_lambda": v["wns.lambda"], "lr": v["optim.lr"], "momentum": v["optim.momentum"],
            "weight_decay": v["optim.weight_decay"], "epochs": v["optim.epochs"],
            "decay_epoch": v["optim.decay_epoch"], "decay_factor": v["optim.decay_factor"],
            "grad_clip": v["optim.grad_clip"], "train_proposals": v["detector.train_proposals"],
            "test_proposals": v["detector.test_proposals"], "score_thr": v["detector.score_thr"],
            "nms_iou": v["detector.nms_iou"], "seed": v["seed"],
        }

    def crop(self) -> tuple[tuple[int, int], int]:
        return (self["crop.width"], self["crop.height"]), self["crop.overlap"]


def load_config(path=None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Defaults, then the JSON file (flat dotted keys), then ``overrides``."""
    values: dict[str, Any] = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise DataError(f"{path}: config must be a JSON object")
        values.update(raw)
    values.update(overrides or {})
    return ExperimentConfig(values)


def parse_overrides(args: Iterable[str]) -> tuple[dict[str, str], list[str]]:
    """Split ``--key=value`` flags naming config keys from everything else."""
    found, rest = {}, []
    for a in args:
        if a.startswith("--") and "=" in a:
            key, value = a[2:].split("=", 1)
            if key in DEFAULTS:
                found[key] = value
                continue
        rest.append(a)
    return found, rest
