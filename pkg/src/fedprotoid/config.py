"""Experiment configuration and its TOML loader.

The file is flat: top-level ``seed`` (mandatory), ``out_dir`` and
``workers``, plus the sections listed in :data:`SECTIONS`. Every key must
be known; anything else is rejected with the offending key named.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .encoder import LossWeights
from .numerics import MEDIAN, KernelKind, KernelSpec
from .synthgen import SynthSpec

KERNELS = ("none", "linear", "poly2", "gaussian")
TRANSMIT = ("teacher", "student")
PROTO_SOURCES = ("global", "pseudo_client")
MMD_MODES = ("minibatch", "full")
COMM_MODELS = ("fedprotoid", "mmt")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str = "runs/default"
    workers: int = 1
    # model
    d_hidden: int = 64
    d_feat: int = 32
    # loss
    beta1: float = 0.5
    beta2: float = 0.5
    gamma1: float = 0.5
    gamma2: float = 0.5
    lam: float = 0.1
    margin: float = 0.3
    # training
    lr: float = 0.2
    tau: float = 0.5
    I: int = 4
    B: int = 4
    ppe_count: int = 1
    warmup_steps: int = 200
    # federation
    rounds: int = 60
    alpha: float = 0.5
    transmit: str = "teacher"
    proto_source: str = "global"
    proto_fraction: float = 1.0
    comm_model: str = "fedprotoid"
    # mmd
    kernel: str = "gaussian"
    bandwidth: Any = MEDIAN
    poly_offset: float = 1.0
    mmd_mode: str = "minibatch"
    # clustering
    eps: float = 0.6
    min_pts: int = 4
    # data
    data: SynthSpec = field(default_factory=SynthSpec)

    def __post_init__(self):
        try:
            self.loss_weights
        except ValueError as exc:
            raise ConfigError("loss", str(exc)) from None
        checks = {
            "rounds": self.rounds >= 0,
            "workers": self.workers >= 1,
            "d_hidden": self.d_hidden >= 1,
            "d_feat": self.d_feat >= 1,
            "margin": self.margin >= 0,
            "lr": self.lr >= 0,
            "I": self.I >= 1,
            "B": self.B >= 1,
            "ppe_count": self.ppe_count >= 1,
            "warmup_steps": self.warmup_steps >= 0,
            "proto_fraction": 0 < self.proto_fraction <= 1,
            "eps": self.eps > 0,
            "min_pts": self.min_pts >= 1,
        }
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(key, f"invalid value {getattr(self, key)!r}")
        choices = {
            "transmit": TRANSMIT,
            "proto_source": PROTO_SOURCES,
            "kernel": KERNELS,
            "mmd_mode": MMD_MODES,
            "comm_model": COMM_MODELS,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(key, f"must be one of {', '.join(allowed)}")
        try:
            self.kernel_spec
        except ValueError as exc:
            raise ConfigError("bandwidth", str(exc)) from None

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.beta1, self.beta2, self.gamma1, self.gamma2,
                           self.lam, self.alpha, self.tau)

    @property
    def kernel_spec(self) -> Optional[KernelSpec]:
        """``None`` when the MMD term is disabled."""
        if self.kernel == "none":
            return None
        return KernelSpec(KernelKind(self.kernel), self.bandwidth, self.poly_offset)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


# section name -> {toml key: dataclass field}
SECTIONS: Dict[str, Dict[str, str]] = {
    "model": {"d_hidden": "d_hidden", "d_feat": "d_feat"},
    "loss": {k: k for k in ("beta1", "beta2", "gamma1", "gamma2", "margin")} | {"lambda": "lam"},
    "train": {k: k for k in ("lr", "tau", "I", "B", "ppe_count", "warmup_steps")},
    "federation": {k: k for k in ("rounds", "alpha", "transmit", "proto_source",
                                  "proto_fraction", "comm_model")},
    "mmd": {"kernel": "kernel", "bandwidth": "bandwidth", "poly_offset": "poly_offset",
            "mode": "mmd_mode"},
    "cluster": {"eps": "eps", "min_pts": "min_pts"},
}
TOP_LEVEL = ("seed", "out_dir", "workers")
DATA_KEYS = tuple(f.name for f in dataclasses.fields(SynthSpec))


def _coerce(key: str, name: str, value, default):
    if isinstance(value, (dict, list)):
        raise ConfigError(key, "expected a scalar value")
    if name == "bandwidth":
        return value
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(key, "booleans are not accepted here")
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def config_from_mapping(raw: Dict[str, Any]) -> ExperimentConfig:
    if "seed" not in raw:
        raise ConfigError("seed", "mandatory key is missing")
    template = ExperimentConfig(seed=0)
    kwargs: Dict[str, Any] = {}
    data_kwargs: Dict[str, Any] = {}
    for key, value in raw.items():
        if key in TOP_LEVEL:
            kwargs[key] = _coerce(key, key, value, getattr(template, key))
        elif key == "data":
            if not isinstance(value, dict):
                raise ConfigError(key, "expected a section")
            for dk, dv in value.items():
                if dk not in DATA_KEYS:
                    raise ConfigError(f"data.{dk}", "unknown key")
                data_kwargs[dk] = _coerce(f"data.{dk}", dk, dv, getattr(template.data, dk))
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(key, "expected a section")
            for sk, sv in value.items():
                name = SECTIONS[key].get(sk)
                if name is None:
                    raise ConfigError(f"{key}.{sk}", "unknown key")
                kwargs[name] = _coerce(f"{key}.{sk}", name, sv, getattr(template, name))
        else:
            raise ConfigError(key, "unknown key")
    # synthetic data follows the master seed unless pinned
    data_kwargs.setdefault("seed", kwargs["seed"])
    try:
        kwargs["data"] = SynthSpec(**data_kwargs)
    except ValueError as exc:
        raise ConfigError("data", str(exc)) from None
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"not valid TOML: {exc}") from None
    return config_from_mapping(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a config back to the TOML layout :func:`load_config` reads."""
    lines = [f"seed = {cfg.seed}", f'out_dir = "{cfg.out_dir}"', f"workers = {cfg.workers}"]
    for section, keys in SECTIONS.items():
        lines.append(f"\n[{section}]")
        for key, name in keys.items():
            lines.append(f"{key} = {_toml_value(getattr(cfg, name))}")
    lines.append("\n[data]")
    for key in DATA_KEYS:
        lines.append(f"{key} = {_toml_value(getattr(cfg.data, key))}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, str):
        return f'"{v}"'
    return repr(v)
