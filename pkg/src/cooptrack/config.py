"""Flat key = value configuration with comments.

Every tunable constant of the pipeline lives here. Files look like::

    # model
    d = 32
    tau = 4
    vehicle_range = -51.2, 51.2, -51.2, 51.2

Unknown keys and unparsable values raise ``ConfigurationError``.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .numerics import ConfigurationError
from .scene import HEIGHT_RANGE, INFRA_RANGE, VEHICLE_RANGE


@dataclass
class Config:
    # model
    d: int = 32
    tau: int = 4
    n_fresh: int = 50
    n_classes: int = 3
    block: int = 8
    n_heads: int = 4
    ff_mult: int = 4
    bind_gate: float = 4.0
    # tracking
    sigma_keep: float = 0.4
    patience: int = 5
    match_threshold: float = 0.5
    late_gate: float = 2.0
    # losses
    lambda_bbx: float = 0.25
    lambda_cls: float = 2.0
    lambda_asso: float = 10.0
    cls_alpha: float = 0.25
    cls_gamma: float = 2.0
    asso_alpha: float = 0.5
    asso_gamma: float = 1.0
    label_gate: float = 2.0
    # optimisation
    lr: float = 2e-4
    weight_decay: float = 0.01
    max_grad_norm: float = 10.0
    epochs_stage1: int = 4
    epochs_stage2: int = 3
    freeze_stage1: bool = False
    # perception ranges (x0, x1, y0, y1) and heights, metres
    vehicle_range: tuple = VEHICLE_RANGE
    infra_range: tuple = INFRA_RANGE
    height_range: tuple = HEIGHT_RANGE
    # benchmark
    n_scenarios: int = 20
    n_train: int = 14
    duration_s: float = 10.0
    rate_hz: float = 10.0
    n_objects: int = 28
    sigma_pos: float = 0.5
    domain_gap: bool = True
    scenario_spec: str = ""
    # evaluation
    eval_radius: float = 2.0
    eval_classes: tuple = (0,)
    latency_compensation: bool = True
    latency_levels: tuple = (0.0, 100.0, 300.0, 500.0)
    rotation_levels: tuple = (0.0, 0.05, 0.1, 0.2)
    # seeds
    seed: int = 0

    def validate(self) -> "Config":
        if self.d <= 0 or self.d % 2:
            raise ConfigurationError("d must be a positive even integer")
        if self.d % self.block:
            raise ConfigurationError(f"d={self.d} is not divisible by block={self.block}")
        if self.d % self.n_heads:
            raise ConfigurationError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        for name in ("tau", "n_fresh", "patience", "epochs_stage1", "epochs_stage2", "n_objects"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        for name in ("sigma_keep", "match_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.lr <= 0 or self.rate_hz <= 0 or self.duration_s <= 0:
            raise ConfigurationError("lr, rate_hz and duration_s must be positive")
        if self.n_frames < 1:
            raise ConfigurationError("duration_s * rate_hz must give at least one frame")
        if not 0 < self.n_train <= self.n_scenarios:
            raise ConfigurationError("need 0 < n_train <= n_scenarios")
        for name in ("vehicle_range", "infra_range"):
            x0, x1, y0, y1 = getattr(self, name)
            if not (x0 < x1 and y0 < y1):
                raise ConfigurationError(f"{name} must be ordered (min < max)")
        return self

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    @property
    def n_frames(self) -> int:
        """Frames per scenario; the duration is fixed, so the count scales with the rate."""
        return int(round(self.duration_s * self.rate_hz))

    @property
    def dt(self) -> float:
        return 1.0 / self.rate_hz

    @property
    def n_eval(self) -> int:
        return self.n_scenarios - self.n_train

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(name: str, text: str):
    default = getattr(Config(), name)
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            kind = type(default[0]) if default else float
            return tuple(kind(x.strip()) for x in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {name!r}: {text!r}") from exc


def parse_config(text: str, base: Config = None) -> Config:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse(key, val)
    return dataclasses.replace(base or Config(), **values).validate()


def dump_config(cfg: Config) -> str:
    return "".join(f"{f} = {_format(getattr(cfg, f))}\n" for f in _FIELDS)


def load_config(path) -> Config:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def save_config(cfg: Config, path):
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))
