"""Flat ``key=value`` run configuration."""
from __future__ import annotations

import dataclasses
import hashlib
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


def _widths(text: str) -> tuple:
    return tuple(int(t) for t in str(text).split(",") if t.strip())


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.1
    beta_gen: float | None = None  # None: share ``beta`` between the ENN and generator objectives
    n_d: int = 2
    n_e: int = 1
    m: int = 256
    lr: float = 1e-4
    critic_lr: float | None = None  # None: use ``lr``
    generator_lr: float | None = None  # None: use ``lr``
    gan_beta1: float = 0.9
    gan_beta2: float = 0.999
    max_g_iters: int = 3000
    min_g_iters: int = 400
    pretrain_epochs: int = 150
    seed: int = 0
    lipschitz_mode: str = "gp"
    lambda_gp: float = 10.0
    clip_c: float = 0.01
    conv_window: int = 50
    conv_tol: float = 0.02
    latent_dim: int = 32
    evidence_activation: str = "relu"
    classifier_hidden: tuple = (500, 500)
    generator_hidden: tuple = (128, 128)
    critic_hidden: tuple = (128, 128)
    generator_init_gain: float = 10.0
    weight_decay: float = 1e-4
    enn_update: str = "combined"
    n_per_class: int = 1000
    check_phases: bool = False

    def __post_init__(self):
        for name in ("classifier_hidden", "generator_hidden", "critic_hidden"):
            v = getattr(self, name)
            if isinstance(v, str):
                object.__setattr__(self, name, _widths(v))
            else:
                object.__setattr__(self, name, tuple(int(t) for t in v))
        problems = []
        if self.n_d < 1:
            problems.append("n_d must be >= 1")
        if self.n_e < 0:
            problems.append("n_e must be >= 0")
        if self.m < 2:
            problems.append("m must be >= 2")
        if not self.lr > 0 or any(r is not None and not r > 0 for r in (self.critic_lr, self.generator_lr)):
            problems.append("learning rates must be > 0")
        if not (0 <= self.gan_beta1 < 1 and 0 <= self.gan_beta2 < 1):
            problems.append("Adam betas must lie in [0, 1)")
        if self.beta < 0 or (self.beta_gen is not None and self.beta_gen < 0):
            problems.append("beta must be >= 0")
        if self.lipschitz_mode not in ("gp", "clip"):
            problems.append("lipschitz_mode must be gp or clip")
        if self.evidence_activation not in ("relu", "softplus"):
            problems.append("evidence_activation must be relu or softplus")
        if self.enn_update not in ("combined", "two_step"):
            problems.append("enn_update must be combined or two_step")
        if self.conv_window < 1 or self.conv_tol <= 0:
            problems.append("convergence window/tolerance must be positive")
        if self.n_per_class < 1:
            problems.append("n_per_class must be >= 1")
        if min(len(self.classifier_hidden), len(self.generator_hidden), len(self.critic_hidden)) < 1:
            problems.append("every network needs at least one hidden layer")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def generator_beta(self) -> float:
        return self.beta if self.beta_gen is None else self.beta_gen

    @property
    def critic_rate(self) -> float:
        return self.lr if self.critic_lr is None else self.critic_lr

    @property
    def generator_rate(self) -> float:
        return self.lr if self.generator_lr is None else self.generator_lr

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # ---- text form -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                text = ",".join(str(x) for x in v)
            elif v is None:
                text = "none"
            elif isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _coerce(cls.__dataclass_fields__[key].default, key, val, lineno)
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


_OPTIONAL_FLOATS = ("beta_gen", "critic_lr", "generator_lr")


def _coerce(default, key, val, lineno):
    try:
        if key in _OPTIONAL_FLOATS:
            return None if val.lower() == "none" else float(val)
        if isinstance(default, bool):
            if val.lower() not in ("true", "false"):
                raise ValueError(val)
            return val.lower() == "true"
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        if isinstance(default, tuple):
            return _widths(val)
        return val
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent RNG stream per named purpose (data, init, latent, ...)."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
