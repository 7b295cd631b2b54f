from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

POS_MODES = ("fixed_sinusoidal", "learnable_sinusoidal_init", "fully_learnable")


@dataclass(frozen=True)
class ModelConfig:
    n_items: int = 0  # filled in from the dataset
    d: int = 64
    max_len: int = 50
    layers: int = 2
    heads: int = 4
    kappa: int = 64
    beta: float = 0.5
    tau: float = 2.0
    alpha_c: float = 0.01
    alpha_s: float = 0.05
    window: int = 5
    dropout: float = 0.3
    attn_dropout: float = 0.1
    var_eps: float = 1e-6
    ln_eps: float = 1e-12
    d_ff: int | None = None
    pos_mode: str = "fully_learnable"
    group_mlp_hidden: bool = False
    enable_x_complete: bool = True
    enable_t_complete: bool = True
    enable_x_short: bool = True
    enable_t_short: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("alpha_c", "alpha_s"):
            a = getattr(self, name)
            if not 0.0 < a < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {a}")
        if self.window < 1 or self.kappa < 1 or self.layers < 1:
            raise ValueError("window, kappa and layers must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.pos_mode not in POS_MODES:
            raise ValueError(f"pos_mode must be one of {POS_MODES}, got {self.pos_mode!r}")
        if self.pos_mode != "fully_learnable" and self.d % 2:
            raise ValueError("sinusoidal positional encodings need an even d")
        if self.d_ff is not None and self.d_ff < self.d:
            raise ValueError("d_ff must be >= d")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def ffn_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 10
    seed: int = 42
    clip_norm: float | None = None
    exclude_history_eval: bool = False
    eval_batch_size: int = 256
    monitor_k: int = 10  # early stopping watches validation Recall@monitor_k

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.monitor_k < 1:
            raise ValueError("monitor_k must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    data: str = ""
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, Any]:
        flat = {"data": self.data, "out_dir": self.out_dir}
        flat.update(asdict(self.model))
        flat.update(asdict(self.train))
        flat.pop("n_items")
        return flat

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"n_items"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _coerce(value: str, current: Any) -> Any:
    # command-line overrides arrive as strings
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if value.lower() in ("none", "null"):
        return None
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float) or current is None:
        try:
            return float(value)
        except ValueError:
            return value
    return value


def build_config(values: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Apply flat key/value settings on top of ``base``; unknown keys raise KeyError."""
    base = base or RunConfig()
    top, model, train = {}, {}, {}
    for key, value in values.items():
        if key in ("data", "out_dir"):
            top[key] = str(value)
        elif key in _MODEL_KEYS:
            model[key] = _coerce(value, getattr(base.model, key))
        elif key in _TRAIN_KEYS:
            train[key] = _coerce(value, getattr(base.train, key))
        else:
            raise KeyError(f"unknown config key {key!r}")
    return RunConfig(
        data=top.get("data", base.data),
        out_dir=top.get("out_dir", base.out_dir),
        model=replace(base.model, **model),
        train=replace(base.train, **train),
    )


def load_config(path: str | os.PathLike | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        values.update(json.loads(Path(path).read_text()))
    cfg = build_config(values)
    if overrides:
        cfg = build_config(overrides, cfg)
    env_seed = os.environ.get("GRIT_SEED")
    if env_seed:
        cfg = replace(cfg, train=replace(cfg.train, seed=int(env_seed)))
    return cfg
