"""Run configuration document shared by the command-line tools.

A run configuration is a JSON object with five sections, each mirroring the
config type of the module it drives.  Missing keys fall back to the defaults
below; unknown sections or keys are rejected.

episodes (synthetic data generation)
    classes=20, dim=16, per_class=40, noise=0.35, min_angle=25.0, seed=0

gradnet (flow-network shape and flow hyperparameters)
    feature_dim=16, num_modules=4, hidden_dim=64, embed_dim=64,
    attention_heads=4, head_dim=16, beta0=0.1, xi=0.1,
    variance_epsilon=1e-6, max_ways=5

solver (initial-value solver for the prototype flow)
    method="rk4", integral_time=40.0, num_steps=40

train (episodic meta-training schedule)
    epochs=15, episodes_per_epoch=200, n_way=5, k_shot=1, m_query=15,
    mode="transductive", learning_rate=1e-4, weight_decay=5e-4,
    lr_decay_factor=0.1, lr_decay_epochs=[15, 30, 40], seed=0,
    val_episodes=60

eval (episode evaluation protocol)
    n_way=5, k_shot=1, m_query=15, mode="transductive", episodes=600,
    seed=0, method="metanode", gda_eta=0.1, gda_steps=20
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .analysis import EvalProtocol
from .errors import ConfigError
from .gradnet import GradNetConfig
from .metatrain import TrainConfig
from .odeflow import SolveConfig

__all__ = ["RunConfig", "PAPER_PRESET", "default_document", "merge_documents"]


_SYNTH_DEFAULTS = {
    "classes": 20,
    "dim": 16,
    "per_class": 40,
    "noise": 0.35,
    "min_angle": 25.0,
    "seed": 0,
}

_EVAL_EXTRAS = {"method": "metanode", "gda_eta": 0.1, "gda_steps": 20}

# schedule from the source experiments: long Adam run with stepped decay
PAPER_PRESET = {
    "train": {
        "epochs": 50,
        "learning_rate": 1e-4,
        "weight_decay": 5e-4,
        "lr_decay_factor": 0.1,
        "lr_decay_epochs": [15, 30, 40],
    },
    "solver": {"method": "rk4", "integral_time": 40.0, "num_steps": 40},
}


def _dataclass_defaults(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if f.default is not dataclasses.MISSING:
            value = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            value = f.default_factory()  # type: ignore[misc]
        else:
            raise ConfigError(f"{cls.__name__}.{f.name} has no default")
        if isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def default_document() -> dict:
    """The fully resolved configuration with every key at its default."""
    return {
        "episodes": dict(_SYNTH_DEFAULTS),
        "gradnet": {"feature_dim": 16,
                    **_dataclass_defaults(GradNetConfig, skip=("feature_dim",))},
        "solver": _dataclass_defaults(SolveConfig, skip=("record_trajectory",)),
        "train": _dataclass_defaults(TrainConfig, skip=("solver",)),
        "eval": {**_dataclass_defaults(EvalProtocol), **_EVAL_EXTRAS},
    }


def merge_documents(base: dict, overlay: dict) -> dict:
    """Overlay section dicts onto a base document, key by key."""
    merged = {section: dict(keys) for section, keys in base.items()}
    for section, keys in overlay.items():
        if not isinstance(keys, dict):
            raise ConfigError(f"section {section!r} must be an object")
        merged.setdefault(section, {})
        merged[section].update(keys)
    return merged


def _check_keys(raw: dict, allowed: dict, context: str) -> None:
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {context} key(s): {', '.join(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    """A validated, fully resolved configuration document."""

    document: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run configuration must be a JSON object")
        defaults = default_document()
        _check_keys(raw, defaults, "section")
        resolved = merge_documents(defaults, raw)
        for section in resolved:
            _check_keys(resolved[section], defaults[section], f"{section!r}")
        cfg = cls(resolved)
        cfg._validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def to_json(self) -> str:
        return json.dumps(self.document, indent=2, sort_keys=True) + "\n"

    def _validate(self) -> None:
        # constructing the typed configs runs every module invariant
        try:
            self.gradnet_config()
            self.solve_config()
            self.train_config()
            self.eval_protocol()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        ep = self.document["episodes"]
        if not all(isinstance(ep[k], (int, float)) for k in ep):
            raise ConfigError("episodes section values must be numbers")
        method = self.document["eval"]["method"]
        if method not in ("mean", "gda", "metanode"):
            raise ConfigError(f"eval method must be mean, gda or metanode, "
                              f"got {method!r}")

    # -- typed views -----------------------------------------------------------

    def synth_settings(self) -> dict:
        return dict(self.document["episodes"])

    def gradnet_config(self) -> GradNetConfig:
        return GradNetConfig(**self.document["gradnet"])

    def solve_config(self) -> SolveConfig:
        return SolveConfig(**self.document["solver"])

    def train_config(self) -> TrainConfig:
        section = dict(self.document["train"])
        section["lr_decay_epochs"] = tuple(section["lr_decay_epochs"])
        return TrainConfig(**section, solver=self.solve_config())

    def eval_protocol(self) -> EvalProtocol:
        section = dict(self.document["eval"])
        for extra in _EVAL_EXTRAS:
            section.pop(extra)
        return EvalProtocol(**section)

    def eval_method(self) -> str:
        return self.document["eval"]["method"]

    def gda_settings(self) -> tuple[float, int]:
        return (float(self.document["eval"]["gda_eta"]),
                int(self.document["eval"]["gda_steps"]))
