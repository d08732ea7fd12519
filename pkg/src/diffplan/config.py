"""Run configuration.

Config files are flat YAML (or JSON) maps with dotted keys, for example::

    diffusion.K: 100
    net.hidden: [256, 256, 256]
    finetune.regularizer: bc

Nested maps are accepted too and flattened.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from diffplan.errors import ConfigError


@dataclass
class DiffusionSection:
    schedule: str = "cosine"
    K: int = 100
    ddim_steps: int = 10
    eta: float = 1.0
    min_std: float = 0.1
    clip_x0: float = 1.0


@dataclass
class NetSection:
    hidden: list[int] = field(default_factory=lambda: [256, 256, 256])
    embed_dim: int = 32
    activation: str = "silu"


@dataclass
class EnvSection:
    suite: str = "default"
    H: int = 12
    T_o: int = 2
    T_a: int = 8
    episode_length: int = 50


@dataclass
class PretrainSection:
    steps: int = 20000
    batch_size: int = 256
    lr: float = 1e-4
    log_interval: int = 100
    eval_interval: int = 0
    eval_episodes: int = 50
    seed: int = 0


@dataclass
class FinetuneSection:
    regularizer: str = "bc"
    lam: float = 1.0
    clip_eps: float = 0.2
    gamma: float = 1.0
    p_step: int = 10
    n_init: int = 10
    init_cap_factor: int = 20
    lr: float = 1e-5
    lr_decay: float = 0.9999
    lr_floor_fraction: float = 0.1
    env_steps: int = 200000
    episodes_per_round: int = 1
    batch_size: int = 256
    replay_capacity: int = 4096
    target_capacity: int = 50
    reward_transform: str = "standardize"
    proficiency_quantile: float = 0.9
    proficiency_window: int = 100
    proficiency_min_history: int = 10
    rolling_window: int = 20
    max_grad_norm: float = 0.0
    checkpoint_interval: int = 0
    seed: int = 0


@dataclass
class EvalSection:
    episodes: int = 50
    deterministic: bool = False


@dataclass
class Config:
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    net: NetSection = field(default_factory=NetSection)
    env: EnvSection = field(default_factory=EnvSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def flat(self) -> dict[str, Any]:
        out = {}
        for sec in dataclasses.fields(self):
            section = getattr(self, sec.name)
            for f in dataclasses.fields(section):
                out[f"{sec.name}.{f.name}"] = getattr(section, f.name)
        return out

    def validate(self) -> Config:
        _validate(self)
        return self


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in d.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, full + "."))
        else:
            out[full] = value
    return out


def _coerce(key: str, value: Any, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(float(value)) if isinstance(value, str) else int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            return [int(v) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"cannot interpret {value!r} as {type(default).__name__}") from None


def apply(config: Config, values: dict[str, Any]) -> Config:
    """Set dotted keys on ``config`` in place and return it."""
    for key, value in _flatten(values).items():
        sec_name, _, name = key.partition(".")
        section = getattr(config, sec_name, None)
        if section is None or not name or not hasattr(section, name):
            raise ConfigError(key, "unknown key")
        setattr(section, name, _coerce(key, value, getattr(section, name)))
    return config


def load_config(path=None, overrides: dict[str, Any] | None = None) -> Config:
    config = Config()
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config file must contain a key-value map")
        apply(config, data)
    if overrides:
        apply(config, overrides)
    return config.validate()


def dump_config(config: Config) -> str:
    return yaml.safe_dump(config.flat(), sort_keys=False)


def _require(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(key, message)


def _validate(c: Config) -> None:
    d, n, e, p, f = c.diffusion, c.net, c.env, c.pretrain, c.finetune
    _require(d.schedule in ("cosine", "linear"), "diffusion.schedule", "must be cosine or linear")
    _require(d.K >= 1, "diffusion.K", "must be >= 1")
    _require(1 <= d.ddim_steps <= d.K, "diffusion.ddim_steps", "must be in [1, diffusion.K]")
    _require(d.eta >= 0, "diffusion.eta", "must be >= 0")
    _require(d.min_std >= 0, "diffusion.min_std", "must be >= 0")
    _require(d.clip_x0 >= 0, "diffusion.clip_x0", "must be >= 0 (0 disables clipping)")
    _require(len(n.hidden) >= 1 and all(h >= 1 for h in n.hidden), "net.hidden", "needs positive widths")
    _require(n.embed_dim >= 2 and n.embed_dim % 2 == 0, "net.embed_dim", "must be even and >= 2")
    _require(n.activation in ("silu", "tanh"), "net.activation", "must be silu or tanh")
    _require(e.suite == "default", "env.suite", "only the default suite exists")
    _require(e.H >= 1, "env.H", "must be >= 1")
    _require(e.T_o >= 1, "env.T_o", "must be >= 1")
    _require(1 <= e.T_a <= e.H, "env.T_a", "must be in [1, env.H]")
    _require(e.episode_length >= 1, "env.episode_length", "must be >= 1")
    _require(p.steps >= 0, "pretrain.steps", "must be >= 0")
    _require(p.batch_size >= 1, "pretrain.batch_size", "must be >= 1")
    _require(p.lr > 0, "pretrain.lr", "must be > 0")
    _require(p.log_interval >= 1, "pretrain.log_interval", "must be >= 1")
    _require(p.eval_interval >= 0, "pretrain.eval_interval", "must be >= 0")
    _require(f.regularizer in ("bc", "none", "kl", "pl"), "finetune.regularizer", "must be bc, none, kl or pl")
    _require(f.lam >= 0, "finetune.lam", "must be >= 0")
    _require(f.clip_eps > 0, "finetune.clip_eps", "must be > 0")
    _require(0 < f.gamma <= 1, "finetune.gamma", "must be in (0, 1]")
    _require(f.p_step >= 1, "finetune.p_step", "must be >= 1")
    _require(f.n_init >= 0, "finetune.n_init", "must be >= 0")
    _require(f.init_cap_factor >= 1, "finetune.init_cap_factor", "must be >= 1")
    _require(f.lr > 0, "finetune.lr", "must be > 0")
    _require(0 < f.lr_decay <= 1, "finetune.lr_decay", "must be in (0, 1]")
    _require(0 < f.lr_floor_fraction <= 1, "finetune.lr_floor_fraction", "must be in (0, 1]")
    _require(f.env_steps >= 0, "finetune.env_steps", "must be >= 0")
    _require(f.episodes_per_round >= 1, "finetune.episodes_per_round", "must be >= 1")
    _require(f.batch_size >= 1, "finetune.batch_size", "must be >= 1")
    _require(f.target_capacity >= 1, "finetune.target_capacity", "must be >= 1")
    _require(f.reward_transform in ("standardize", "raw"), "finetune.reward_transform", "must be standardize or raw")
    _require(0 < f.proficiency_quantile < 1, "finetune.proficiency_quantile", "must be in (0, 1)")
    _require(f.max_grad_norm >= 0, "finetune.max_grad_norm", "must be >= 0")
    _require(c.eval.episodes >= 1, "eval.episodes", "must be >= 1")
