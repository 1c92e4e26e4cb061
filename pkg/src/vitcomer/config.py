"""Plain-text `key = value` configuration files.

Lines starting with ``#`` and blank lines are ignored; trailing ``# ...``
comments are stripped. Unknown keys are errors. Model keys are the
:class:`CoMerConfig` field names; the remaining keys control runs:

=================  ========  =================================================
key                default   meaning
=================  ========  =================================================
variant            toy       named preset applied before the other keys
steps              500       toy-training SGD steps
lr                 0.05      SGD learning rate
momentum           0.9       SGD momentum
batch              10        images per SGD step
clip_norm          1.0       global gradient-norm cap (``none`` disables)
train_images       50        size of the synthetic training set
data_seed          0         seed of the synthetic set
loss_target        0.05      final-loss threshold checked by train-toy
eps                1e-4      finite-difference step
tol                1e-4      gradcheck relative-error tolerance
grad_samples       8         entries checked per parameter tensor (0 = all)
oracle_seeds       20        random cases per oracle
oracle_tol         1e-10     oracle absolute-error tolerance
=================  ========  =================================================
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .model import VARIANTS, CoMerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: CoMerConfig = field(default_factory=lambda: CoMerConfig.from_variant("toy"))
    steps: int = 500
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 10
    clip_norm: Optional[float] = 1.0
    train_images: int = 50
    data_seed: int = 0
    loss_target: float = 0.05
    eps: float = 1e-4
    tol: float = 1e-4
    grad_samples: int = 8
    oracle_seeds: int = 20
    oracle_tol: float = 1e-10


MODEL_KEYS = {f.name: f for f in fields(CoMerConfig)}
RUN_KEYS = {f.name: f for f in fields(RunConfig) if f.name != "model"}


def parse_lines(text: str) -> dict:
    """Ordered ``key -> raw string`` map; duplicate keys and malformed lines are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw.lower() == "true"
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return None if raw.lower() == "none" else float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None


def model_config_from_items(items: dict) -> CoMerConfig:
    unknown = sorted(set(items) - set(MODEL_KEYS))
    if unknown:
        raise ConfigError(f"unknown model keys: {', '.join(unknown)}")
    variant = items.get("variant", "toy")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    base = CoMerConfig.from_variant(variant)
    changes = {k: _convert(k, v, getattr(base, k)) for k, v in items.items() if k != "variant"}
    try:
        return base.with_(**changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def model_config_from_text(text: str) -> CoMerConfig:
    return model_config_from_items(parse_lines(text))


def run_config_from_text(text: str) -> RunConfig:
    items = parse_lines(text)
    unknown = sorted(set(items) - set(MODEL_KEYS) - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    model = model_config_from_items({k: v for k, v in items.items() if k in MODEL_KEYS})
    defaults = RunConfig(model=model)
    changes = {k: _convert(k, v, getattr(defaults, k)) for k, v in items.items() if k in RUN_KEYS}
    return replace(defaults, **changes)


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return run_config_from_text(text)
