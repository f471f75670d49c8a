"""Declarative training configuration.

A config is a flat JSON document (or a named preset) parsed into TrainConfig.
Parsing is strict: unknown keys raise ConfigError naming the key and the
allowed set. Learning-rate decay points may be given in epochs and are
translated to global steps using ceil(train_count / batch_size) steps per
epoch, since schedules are executed in steps.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field

from .attacks import ThreatModel
from .data import get_profile
from .errors import ConfigError
from .losses import LossWeights

MODES = ("atgan", "baseline_at", "standard")

_TOP_KEYS = {
    "mode", "profile", "scale", "seed", "batch_size", "epochs", "total_steps",
    "frac", "threat", "weights", "generator_opt", "discriminator_opt",
    "pretrain_epochs", "loss_network", "data", "checkpoint_every",
}
_THREAT_KEYS = {"epsilon", "steps", "step_size", "init"}
_WEIGHT_KEYS = {"alpha1", "alpha2", "beta", "gamma", "alpha"}
_OPT_KEYS = {"kind", "lr", "betas", "momentum", "decay_milestones",
             "decay_milestones_epochs", "decay_factor"}
_DATA_KEYS = {"root", "synthetic"}


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    momentum: float = 0.9
    decay_milestones: tuple = ()  # global step indices, sorted
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.kind not in ("adam", "momentum"):
            raise ConfigError(f"optimizer kind must be 'adam' or 'momentum', got {self.kind!r}")
        if list(self.decay_milestones) != sorted(self.decay_milestones):
            raise ConfigError(f"decay_milestones must be sorted, got {self.decay_milestones}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "betas": list(self.betas),
                "momentum": self.momentum,
                "decay_milestones": list(self.decay_milestones),
                "decay_factor": self.decay_factor}


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    profile: str
    scale: str = "paper"
    seed: int = 0
    batch_size: int = 128
    epochs: int | None = None
    total_steps: int | None = None
    frac: float = 1.0
    threat: ThreatModel | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    generator_opt: OptimizerSpec = field(default_factory=OptimizerSpec)
    discriminator_opt: OptimizerSpec = field(default_factory=OptimizerSpec)
    pretrain_epochs: int = 3
    loss_network: str | None = None  # path to a pretrained classifier checkpoint
    data_root: str | None = None
    synthetic_data: bool = False
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        get_profile(self.profile)
        if not (0.0 <= self.frac <= 1.0):
            raise ConfigError(f"frac must lie in [0,1], got {self.frac}")
        if self.epochs is None and self.total_steps is None:
            raise ConfigError("config needs 'epochs' or 'total_steps'")
        if self.mode in ("atgan", "baseline_at") and self.threat is None:
            raise ConfigError(f"mode {self.mode!r} requires a 'threat' section")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "profile": self.profile,
            "scale": self.scale,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "total_steps": self.total_steps,
            "frac": self.frac,
            "threat": None if self.threat is None else self.threat.to_json(),
            "weights": self.weights.to_json(),
            "generator_opt": self.generator_opt.to_json(),
            "discriminator_opt": self.discriminator_opt.to_json(),
            "pretrain_epochs": self.pretrain_epochs,
            "loss_network": self.loss_network,
            "data": {"root": self.data_root, "synthetic": self.synthetic_data},
            "checkpoint_every": self.checkpoint_every,
        }


def _check_keys(section: dict, allowed: set, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(
                f"unknown config key {key!r} in {where}; allowed keys: {sorted(allowed)}"
            )


def _parse_threat(raw) -> ThreatModel | None:
    if raw is None:
        return None
    _check_keys(raw, _THREAT_KEYS, "threat")
    eps = raw.get("epsilon", 0.0)
    if eps in ("unbounded", "inf"):
        eps = math.inf
    return ThreatModel(float(eps), int(raw.get("steps", 1)),
                       float(raw.get("step_size", 0.01)),
                       raw.get("init", "random_uniform"))


def _parse_weights(raw, profile: str) -> LossWeights:
    defaults = LossWeights.defaults_for(profile)
    if raw is None:
        return defaults
    _check_keys(raw, _WEIGHT_KEYS, "weights")
    raw = dict(raw)
    alpha = raw.pop("alpha", None)  # shorthand setting alpha1 == alpha2
    base = {"alpha1": defaults.alpha1, "alpha2": defaults.alpha2,
            "beta": defaults.beta, "gamma": defaults.gamma}
    if alpha is not None:
        base["alpha1"] = base["alpha2"] = float(alpha)
    base.update({k: float(v) for k, v in raw.items()})
    return LossWeights(**base)


def _parse_optimizer(raw, profile: str, batch_size: int, where: str) -> OptimizerSpec:
    if raw is None:
        return OptimizerSpec()
    _check_keys(raw, _OPT_KEYS, where)
    raw = dict(raw)
    epochs_ms = raw.pop("decay_milestones_epochs", None)
    milestones = list(raw.pop("decay_milestones", []))
    if epochs_ms is not None:
        steps_per_epoch = math.ceil(get_profile(profile).train_count / batch_size)
        milestones += [int(e) * steps_per_epoch for e in epochs_ms]
    spec = OptimizerSpec(
        kind=raw.get("kind", "adam"),
        lr=float(raw.get("lr", 1e-3)),
        betas=tuple(raw.get("betas", (0.9, 0.999))),
        momentum=float(raw.get("momentum", 0.9)),
        decay_milestones=tuple(sorted(milestones)),
        decay_factor=float(raw.get("decay_factor", 0.1)),
    )
    return spec


def parse_config(raw: dict) -> TrainConfig:
    """Parse and validate a raw config dict."""
    _check_keys(raw, _TOP_KEYS, "config")
    profile = raw.get("profile")
    if profile is None:
        raise ConfigError("config needs a 'profile' key")
    batch_size = int(raw.get("batch_size", 128))
    data = raw.get("data") or {}
    _check_keys(data, _DATA_KEYS, "data")
    return TrainConfig(
        mode=raw.get("mode", "standard"),
        profile=profile,
        scale=raw.get("scale", "paper"),
        seed=int(raw.get("seed", 0)),
        batch_size=batch_size,
        epochs=None if raw.get("epochs") is None else int(raw["epochs"]),
        total_steps=None if raw.get("total_steps") is None else int(raw["total_steps"]),
        frac=float(raw.get("frac", 1.0)),
        threat=_parse_threat(raw.get("threat")),
        weights=_parse_weights(raw.get("weights"), profile),
        generator_opt=_parse_optimizer(raw.get("generator_opt"), profile, batch_size, "generator_opt"),
        discriminator_opt=_parse_optimizer(raw.get("discriminator_opt"), profile, batch_size, "discriminator_opt"),
        pretrain_epochs=int(raw.get("pretrain_epochs", 3)),
        loss_network=raw.get("loss_network"),
        data_root=data.get("root"),
        synthetic_data=bool(data.get("synthetic", False)),
        checkpoint_every=None if raw.get("checkpoint_every") is None else int(raw["checkpoint_every"]),
    )


def load_config(path_or_preset: str) -> TrainConfig:
    """Load a config from a JSON file path or a preset name."""
    if path_or_preset in PRESETS:
        return parse_config(copy.deepcopy(PRESETS[path_or_preset]))
    try:
        with open(path_or_preset) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(
            f"{path_or_preset!r} is neither a config file nor a preset; "
            f"presets: {sorted(PRESETS)}"
        ) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path_or_preset}: invalid JSON: {exc}") from exc
    return parse_config(raw)


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# Reference hyperparameter presets, one per benchmark dataset, plus fast
# desk-scale profiles. Threat epsilons default to the training budgets the
# reference results were reported at.
PRESETS = {
    "mnist-paper": {
        "mode": "atgan", "profile": "mnist", "scale": "paper", "seed": 0,
        "batch_size": 128, "epochs": 50,
        "threat": {"epsilon": 0.3, "steps": 40, "step_size": 1.0, "init": "random_uniform"},
        "weights": {"alpha": 1.0, "beta": 1.0, "gamma": 10.0},
        "generator_opt": {"kind": "adam", "lr": 0.001},
        "discriminator_opt": {"kind": "adam", "lr": 0.001},
        "pretrain_epochs": 5,
    },
    "svhn-paper": {
        "mode": "atgan", "profile": "svhn", "scale": "paper", "seed": 0,
        "batch_size": 64, "epochs": 40,
        "threat": {"epsilon": 8 / 255, "steps": 7, "step_size": 2 / 255, "init": "random_uniform"},
        "weights": {"alpha": 1.0, "beta": 1.0, "gamma": 10.0},
        "generator_opt": {"kind": "adam", "lr": 0.0002, "betas": [0.5, 0.999]},
        "discriminator_opt": {"kind": "momentum", "lr": 0.1, "momentum": 0.9,
                              "decay_milestones_epochs": [20, 30], "decay_factor": 0.1},
        "pretrain_epochs": 5,
    },
    "cifar10-paper": {
        "mode": "atgan", "profile": "cifar10", "scale": "paper", "seed": 0,
        "batch_size": 128, "total_steps": 80000,
        "threat": {"epsilon": 8 / 255, "steps": 7, "step_size": 2 / 255, "init": "random_uniform"},
        "weights": {"alpha": 5.0, "beta": 4.0, "gamma": 10.0},
        "generator_opt": {"kind": "adam", "lr": 0.0002, "betas": [0.5, 0.999]},
        "discriminator_opt": {"kind": "momentum", "lr": 0.1, "momentum": 0.9,
                              "decay_milestones_epochs": [100, 150], "decay_factor": 0.1},
        "pretrain_epochs": 5,
    },
    "toy-fast": {
        "mode": "atgan", "profile": "toy", "scale": "mini", "seed": 0,
        "batch_size": 16, "total_steps": 150,
        "threat": {"epsilon": 0.1, "steps": 7, "step_size": 0.03, "init": "random_uniform"},
        "weights": {"alpha": 1.0, "beta": 1.0, "gamma": 1.0},
        "generator_opt": {"kind": "adam", "lr": 0.002},
        "discriminator_opt": {"kind": "adam", "lr": 0.002},
        "pretrain_epochs": 5,
    },
    "toy-at": {
        "mode": "baseline_at", "profile": "toy", "scale": "mini", "seed": 0,
        "batch_size": 16, "total_steps": 150,
        "threat": {"epsilon": 0.1, "steps": 7, "step_size": 0.03, "init": "random_uniform"},
        "discriminator_opt": {"kind": "adam", "lr": 0.002},
    },
    "toy-standard": {
        "mode": "standard", "profile": "toy", "scale": "mini", "seed": 0,
        "batch_size": 16, "total_steps": 150,
        "discriminator_opt": {"kind": "adam", "lr": 0.002},
    },
}
