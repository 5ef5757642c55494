"""Run configuration: a flat, validated JSON schema with defaults.

Every knob of the pipeline lives here.  A config file only needs the keys
it overrides; unknown keys are rejected.  The config hash (over every
field) versions all artifacts a run writes, so reruns can detect both
no-op repeats and conflicting settings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

# name -> (default, help)
SCHEMA: dict[str, tuple[object, str]] = {
    # corpus
    "seed": (0, "master seed for synthesis, splitting, and training"),
    "image_side": (32, "square side images are rescaled to at ingestion"),
    "synth_examples": (600, "synthetic corpus size"),
    "synth_normal_prior": (0.45, "probability of a normal (healthy) example"),
    "synth_context": (True, "give diseases location/severity context modes"),
    "synth_plain_weight": (0.6, "weight of context-free annotations per disease"),
    "synth_mode_weight": (0.7, "weight of each context mode per disease"),
    "synth_noise": (12.0, "background noise sigma"),
    # mining / split
    "min_support": (12, "pattern occurrences needed to mine a label"),
    "min_eval_per_label": (2, "minimum val and test examples per stratum"),
    "split_seed": (0, "seed for the stratified split"),
    # encoder
    "channels": ([16, 32, 64], "conv block widths; last one is the embedding size"),
    "kernels": ([5, 5, 3], "conv kernel per block"),
    "use_batch_norm": (True, "batch-normalize every convolution"),
    "use_data_dropout": (True, "balance batches by dropping excess normals"),
    "batch_size": (50, "mini-batch size for both trainings"),
    "normal_cap": (0.3333, "max fraction of normals per balanced batch"),
    "crop_size": (28, "random crop side for diseased augmentation; 0 disables"),
    "aug_multiplier": (4, "min augmented appearances per diseased image per epoch"),
    "cnn_epochs": (30, "encoder training epochs (first round)"),
    "cnn_lr": (0.1, "encoder base learning rate"),
    "cnn_momentum": (0.9, "encoder SGD momentum"),
    "cnn_schedule": ("step_down", "constant | step_down | exponential"),
    "cnn_step_fraction": (0.3333, "fraction of epochs per step-down segment"),
    "cnn_step_multiplier": (0.5, "rate multiplier per step-down segment"),
    "cnn_decay": (0.97, "per-epoch decay for the exponential schedule"),
    # decoder
    "cell_kind": ("gru", "lstm | gru"),
    "num_layers": (2, "stacked recurrent layers"),
    "unroll": (5, "teacher-forcing horizon (padded annotation length)"),
    "rnn_epochs": (150, "decoder training epochs (first round)"),
    "rnn_lr": (0.0, "decoder learning rate; 0 uses the per-cell default"),
    "rnn_lr_decay": (0.0, "per-epoch lr decay; 0 uses the per-cell default"),
    "rnn_decay_rate": (0.0, "optimizer decay; 0 uses the per-cell default"),
    "rnn_dropout": (-1.0, "inter-layer dropout; negative uses the per-cell default"),
    "rnn_optimizer": ("rmsprop", "sgd (momentum) | rmsprop; how decay_rate applies"),
    "rnn_batch": (50, "decoder mini-batch size"),
    "clip_norm": (5.0, "global gradient-norm clip for decoder training"),
    # cascade
    "cascade_target_size": (50, "nominal cases per sub-label"),
    "cascade_scale": (0.5, "scales target size down for small corpora"),
    "cascade_lr_scale": (0.1, "trunk learning-rate factor while fine-tuning"),
    "cnn_epochs_iter1": (20, "encoder fine-tune epochs (second round)"),
    "rnn_epochs_iter1": (150, "decoder training epochs (second round)"),
}

_TYPES: dict[str, type] = {key: type(default) for key, (default, _) in SCHEMA.items()}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getattr__(self, key: str):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key)

    def hash(self) -> str:
        canonical = json.dumps(self.values, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return dict(self.values)


def _validate(values: dict) -> None:
    checks = [
        (values["synth_normal_prior"], lambda v: 0.0 <= v <= 1.0, "synth_normal_prior in [0,1]"),
        (values["normal_cap"], lambda v: 0.0 <= v <= 1.0, "normal_cap in [0,1]"),
        (values["min_support"], lambda v: v >= 1, "min_support >= 1"),
        (values["batch_size"], lambda v: v >= 1, "batch_size >= 1"),
        (values["unroll"], lambda v: v >= 1, "unroll >= 1"),
        (values["image_side"], lambda v: v >= 8, "image_side >= 8"),
        (values["crop_size"], lambda v: v == 0 or 0 < v, "crop_size 0 or positive"),
        (values["cell_kind"], lambda v: v in ("lstm", "gru"), "cell_kind lstm|gru"),
        (values["rnn_optimizer"], lambda v: v in ("sgd", "rmsprop"), "rnn_optimizer sgd|rmsprop"),
        (values["cnn_schedule"], lambda v: v in ("constant", "step_down", "exponential"),
         "cnn_schedule constant|step_down|exponential"),
        (values["cascade_scale"], lambda v: v > 0, "cascade_scale > 0"),
        (values["rnn_dropout"], lambda v: v < 1.0, "rnn_dropout < 1"),
    ]
    for value, ok, what in checks:
        if not ok(value):
            raise ConfigError(f"config: {what}, got {value!r}")
    if values["crop_size"] and values["crop_size"] >= values["image_side"]:
        raise ConfigError(f"config: crop_size {values['crop_size']} must be smaller "
                          f"than image_side {values['image_side']}")
    if len(values["channels"]) != len(values["kernels"]):
        raise ConfigError("config: channels and kernels must have equal length")


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file, then explicit overrides."""
    values = {key: default for key, (default, _) in SCHEMA.items()}
    for source, origin in ((_read_file(path), path), (overrides or {}, "overrides")):
        for key, value in source.items():
            if key not in SCHEMA:
                raise ConfigError(f"config: unknown key {key!r} (from {origin})")
            expected = _TYPES[key]
            if expected is float and isinstance(value, int):
                value = float(value)
            if expected is int and isinstance(value, bool):
                raise ConfigError(f"config: {key} must be {expected.__name__}")
            if not isinstance(value, expected):
                raise ConfigError(f"config: {key} must be {expected.__name__}, "
                                  f"got {type(value).__name__}")
            values[key] = value
    _validate(values)
    return RunConfig(values)


def _read_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})")
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    return payload


def describe_defaults() -> str:
    lines = ["configuration keys (JSON file, flat):"]
    for key, (default, help_text) in SCHEMA.items():
        lines.append(f"  {key:<22} default {default!r}: {help_text}")
    return "\n".join(lines)
