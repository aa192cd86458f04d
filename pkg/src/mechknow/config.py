"""Run configuration: one flat key=value namespace shared by all recipes.

Precedence, lowest to highest: built-in desk defaults, profile presets,
recipe presets, config file entries, command-line overrides. The cache root
additionally honors the MECHKNOW_CACHE environment variable (see data).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import DEFAULT_CACHE, EXP_NOISE
from .transforms import ConfigurationError, ROTATION

PROFILES = ("desk", "paper")

# full budgets are unstated upstream; the paper profile simply runs the desk
# recipe at 4x the causal-pair budget
PAPER_SCALE = 4


@dataclass
class ExperimentConfig:
    recipe: str = ""
    profile: str = "desk"
    experiment: str = EXP_NOISE
    kind: str = ROTATION
    family: str = "factornet"
    seed: int = 0
    # training
    epochs: int = 10
    pairs_per_epoch: int = 8192
    batch_size: int = 256
    step_size: float = 2e-3
    eval_every: int = 200
    # data
    p_black: float = 0.7
    heldout_class: int = 9
    image_limit: Optional[int] = None
    # evaluation
    eval_samples: int = 600
    # hypothesis-verification
    k: int = 10
    n_candidates: int = 10
    threshold: float = 0.9999
    test_limit: Optional[int] = 300
    # paths
    cache_dir: Path = field(default_factory=lambda: DEFAULT_CACHE)
    checkpoint_dir: Path = field(default_factory=lambda: Path("checkpoints"))
    results_dir: Path = field(default_factory=lambda: Path("results"))

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigurationError(f"profile must be one of {PROFILES}, got {self.profile!r}")

    def scaled_pairs(self) -> int:
        return self.pairs_per_epoch * (PAPER_SCALE if self.profile == "paper" else 1)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    t = _FIELD_TYPES[key]
    raw = raw.strip()
    if t in ("Optional[int]",):
        return None if raw.lower() in ("none", "") else int(raw)
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    if t == "Path":
        return Path(raw)
    return raw


def parse_config_file(path: Path) -> dict:
    """key = value lines; '#' comments and blank lines ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def parse_overrides(pairs: list) -> dict:
    """CLI-style overrides, each item 'key=value'."""
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigurationError(f"override must be key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def build_config(
    recipe_defaults: Optional[dict] = None,
    file_path: Optional[Path] = None,
    overrides: Optional[dict] = None,
) -> ExperimentConfig:
    merged: dict = {}
    for layer in (recipe_defaults, parse_config_file(file_path) if file_path else None, overrides):
        if layer:
            for key in layer:
                if key not in _FIELD_TYPES:
                    raise ConfigurationError(f"unknown config key {key!r}")
            merged.update(layer)
    return ExperimentConfig(**merged)
