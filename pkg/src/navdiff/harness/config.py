"""Sectioned run configuration with range validation and seed namespacing."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from navdiff.harness.persist import config_hash


class ConfigError(ValueError):
    pass


@dataclass
class SimSection:
    maze_width: int = 11
    maze_height: int = 11
    cell_size: float = 0.5
    resolution: int = 32
    fov: float = 90.0
    max_steps: int = 200


@dataclass
class DataSection:
    k: int = 5
    h: int = 4
    train_mazes: int = 30
    val_mazes: int = 3
    test_mazes: int = 5
    episodes_per_maze: int = 20
    eval_episodes_per_maze: int = 10
    min_geo: float = 1.5
    max_geo: float = 6.0


@dataclass
class PredictorSection:
    d: int = 64
    d_ctx: int = 64
    n_queries: int = 8
    n_ctx_tokens: int = 8
    encoder_channels: tuple = (16, 32, 64)
    unet_channels: tuple = (16, 32, 64)
    heads: int = 4
    stage1_steps: int = 1500
    stage2_steps: int = 8500
    batch_size: int = 32
    lr: float = 5e-4


@dataclass
class PolicySection:
    variant: str = "hybrid"
    future_source: str = "oracle"
    widths: tuple = (16, 32, 64, 128)
    d_f: int = 128
    d_h: int = 128
    n_envs: int = 8
    rollout_length: int = 128
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs_per_batch: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 2.5e-4
    n_updates: int = 300
    k: int = 5
    val_every: int = 25


@dataclass
class EvalSection:
    k: int = 5
    T: int = 200
    sampler_steps: int = 20
    seeds: tuple = (0,)
    future_source: str = "predictor"
    split: str = "test"


_RANGES = {
    "sim": {
        "maze_width": (5, 101), "maze_height": (5, 101), "cell_size": (0.1, 5.0),
        "resolution": (16, 256), "fov": (1.0, 179.0), "max_steps": (1, 10000),
    },
    "data": {
        "k": (1, 100), "h": (1, 32), "train_mazes": (1, 100000), "val_mazes": (1, 100000),
        "test_mazes": (1, 100000), "episodes_per_maze": (1, 100000),
        "eval_episodes_per_maze": (1, 100000), "min_geo": (0.0, 1000.0), "max_geo": (0.0, 1000.0),
    },
    "predictor": {
        "d": (1, 4096), "d_ctx": (1, 4096), "n_queries": (1, 256), "n_ctx_tokens": (1, 256), "heads": (1, 64),
        "stage1_steps": (0, 10**7), "stage2_steps": (0, 10**7), "batch_size": (1, 4096), "lr": (1e-8, 1.0),
    },
    "policy": {
        "d_f": (1, 8192), "d_h": (1, 8192), "n_envs": (1, 1024), "rollout_length": (1, 100000),
        "gamma": (0.0, 1.0), "gae_lambda": (0.0, 1.0), "clip": (1e-6, 0.999), "epochs_per_batch": (1, 100),
        "entropy_coef": (0.0, 10.0), "value_coef": (0.0, 10.0), "lr": (1e-8, 1.0), "n_updates": (1, 10**7),
        "k": (1, 100), "val_every": (1, 10**7),
    },
    "eval": {"k": (1, 100), "T": (1, 100000), "sampler_steps": (1, 1000)},
}
_CHOICES = {
    ("policy", "variant"): {"hybrid", "early", "late"},
    ("policy", "future_source"): {"oracle", "predictor", "none"},
    ("eval", "future_source"): {"oracle", "predictor", "none"},
    ("eval", "split"): {"train", "val", "test"},
}


@dataclass
class RunConfig:
    seed: int = 0
    sim: SimSection = field(default_factory=SimSection)
    data: DataSection = field(default_factory=DataSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    policy: PolicySection = field(default_factory=PolicySection)
    eval: EvalSection = field(default_factory=EvalSection)

    SECTIONS = ("sim", "data", "predictor", "policy", "eval")

    def validate(self) -> "RunConfig":
        errors = []
        for name in self.SECTIONS:
            sec = getattr(self, name)
            for key, (lo, hi) in _RANGES.get(name, {}).items():
                v = getattr(sec, key)
                if not (lo <= v <= hi):
                    errors.append(f"{name}.{key}={v} outside [{lo}, {hi}]")
        for (name, key), allowed in _CHOICES.items():
            v = getattr(getattr(self, name), key)
            if v not in allowed:
                errors.append(f"{name}.{key}={v!r} not in {sorted(allowed)}")
        if self.sim.maze_width % 2 == 0 or self.sim.maze_height % 2 == 0:
            errors.append("maze dimensions must be odd")
        if self.data.min_geo > self.data.max_geo:
            errors.append("data.min_geo exceeds data.max_geo")
        if self.eval.k > self.eval.T:
            errors.append("eval.k exceeds eval.T")
        for name in ("encoder_channels", "unet_channels"):
            if not getattr(self.predictor, name) or min(getattr(self.predictor, name)) < 1:
                errors.append(f"predictor.{name} must be non-empty positive integers")
        if len(self.policy.widths) != 4 or min(self.policy.widths) < 1:
            errors.append("policy.widths needs four positive stage widths")
        if not self.eval.seeds:
            errors.append("eval.seeds must list at least one seed")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    def to_dict(self) -> dict:
        d = {"seed": self.seed}
        for name in self.SECTIONS:
            d[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(getattr(self, name)).items()}
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["run"] = {"seed": str(self.seed), "config_hash": self.hash}
        for name in self.SECTIONS:
            cp[name] = {k: _fmt(v) for k, v in asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def seed_for(self, *namespace) -> int:
        """Deterministic sub-seed for a module-level namespace."""
        text = "/".join([str(self.seed), *map(str, namespace)])
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little") & 0x7FFFFFFF


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section == "run":
        if key == "seed":
            cfg.seed = int(raw)
            return
        if key == "config_hash":
            return
        raise ConfigError(f"unknown key run.{key}")
    if section not in RunConfig.SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    sec = getattr(cfg, section)
    names = {f.name for f in fields(sec)}
    if key not in names:
        raise ConfigError(f"unknown key {section}.{key}")
    try:
        setattr(sec, key, _parse(raw, getattr(sec, key)))
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {exc}") from None


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the INI file, then ``section.key=value`` overrides; validated."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read(p)
        for section in cp.sections():
            for key, raw in cp[section].items():
                _apply(cfg, section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        _apply(cfg, section, key, raw)
    return cfg.validate()
