"""Run configuration: one flat dataclass mirrored 1:1 by the JSON config files.

Every knob of a run lives here — dataset geometry, model shape, objective
weights, optimizer constants, loop control, and the ablation switches.
``RunConfig.validate`` is called on every load; unknown JSON keys are
rejected rather than ignored so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """A config file or flag combination is invalid."""


SIM_MODES = ("token_max_mean", "pooled_cosine")
EVI_ACTIVATIONS = ("exp", "relu", "softplus")
EVI_STOP_GRAD = ("none", "similarity", "reliability")


@dataclass
class RunConfig:
    # dataset geometry
    seed: int = 0
    d_z: int = 8
    q: int = 8
    d: int = 16
    sigma: float = 0.05
    beta: float = 0.5
    n_train: int = 4096
    n_val: int = 512
    n_test: int = 512
    n_hard: int = 3
    n_easy: int = 3
    # model shape
    heads: int = 4
    ffn_mult: int = 4
    ln_eps: float = 1e-5
    norm_eps: float = 1e-8
    # objective
    tau: float = 0.1
    kappa: float = 0.5
    lam: float = 1.0
    sim_mode: str = "token_max_mean"
    evi_activation: str = "exp"
    evi_stop_grad: str = "none"
    # optimizer
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.0
    # loop control
    steps: int = 2000
    batch: int = 32
    val_every: int = 200
    # paths (CLI flags take precedence over these when both are given)
    data_dir: str | None = None
    out_dir: str | None = None
    # ablation switches
    wo_c_ref: bool = False
    wo_c_mod: bool = False
    wo_scd: bool = False
    wo_ldis: bool = False
    wo_a_ref: bool = False
    wo_a_mod: bool = False
    wo_ldir: bool = False
    wo_evi_ref: bool = False
    wo_evi_mod: bool = False
    wo_levi: bool = False

    def validate(self) -> "RunConfig":
        positive = {
            "d_z": self.d_z, "q": self.q, "d": self.d, "heads": self.heads,
            "ffn_mult": self.ffn_mult, "n_train": self.n_train, "n_val": self.n_val,
            "n_test": self.n_test, "steps": self.steps, "batch": self.batch,
            "val_every": self.val_every,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.n_hard < 0 or self.n_easy < 0:
            raise ConfigError("n_hard and n_easy must be non-negative")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.kappa < 0 or self.lam < 0:
            raise ConfigError(
                f"loss weights must be non-negative, got kappa={self.kappa}, lam={self.lam}"
            )
        if self.sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm must be non-negative (0 disables), got {self.clip_norm}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.batch > self.n_train:
            raise ConfigError(f"batch={self.batch} exceeds n_train={self.n_train}")
        if self.sim_mode not in SIM_MODES:
            raise ConfigError(f"sim_mode must be one of {SIM_MODES}, got {self.sim_mode!r}")
        if self.evi_activation not in EVI_ACTIVATIONS:
            raise ConfigError(
                f"evi_activation must be one of {EVI_ACTIVATIONS}, got {self.evi_activation!r}"
            )
        if self.evi_stop_grad not in EVI_STOP_GRAD:
            raise ConfigError(
                f"evi_stop_grad must be one of {EVI_STOP_GRAD}, got {self.evi_stop_grad!r}"
            )
        if self.wo_scd and (self.wo_c_ref or self.wo_c_mod):
            raise ConfigError("wo_scd supersedes wo_c_ref/wo_c_mod; do not combine them")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(cls.field_names())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data).validate()

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(raw)


def preset(name: str) -> RunConfig:
    """Named configurations: ``desk`` (the tested default) and ``paper``.

    The paper-scale preset only changes what scale dictates — batch 64,
    lr 2e-5, and 128 query tokens (32 per frame, four frames); it is
    smoke-tested, not trained to convergence in CI.
    """
    if name == "desk":
        return RunConfig().validate()
    if name == "paper":
        return RunConfig(batch=64, lr=2e-5, q=128).validate()
    raise ConfigError(f"unknown preset {name!r}; expected 'desk' or 'paper'")


# Canonical ablation variants: maps a variant label to RunConfig overrides.
VARIANTS: dict[str, dict] = {
    "full": {},
    "wo_C_ref": {"wo_c_ref": True},
    "wo_C_mod": {"wo_c_mod": True},
    "wo_SCD": {"wo_scd": True},
    "wo_Ldis": {"wo_ldis": True},
    "wo_A_ref": {"wo_a_ref": True},
    "wo_A_mod": {"wo_a_mod": True},
    "wo_Ldir": {"wo_ldir": True},
    "wo_Evi_ref": {"wo_evi_ref": True},
    "wo_Evi_mod": {"wo_evi_mod": True},
    "wo_Levi": {"wo_levi": True},
    "w_ReLU": {"evi_activation": "relu"},
    "w_Softplus": {"evi_activation": "softplus"},
}


def variant_config(base: RunConfig, name: str) -> RunConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {name!r}; known: {sorted(VARIANTS)}")
    return base.replace(**VARIANTS[name])
