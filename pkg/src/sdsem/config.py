"""Run configuration: flat key-value files, presets and config hashing."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .errors import SchemaError
from .params import PriorConfig

#: reference chain settings and the scaled-down variant used for tests
PAPER_PRESET = {"iterations": 250_000, "burn_in": 100_000, "thinning": 10}
DESK_PRESET = {"iterations": 5_000, "burn_in": 2_000, "thinning": 5}


@dataclass
class RunConfig:
    """Everything a fit/forecast run needs beyond the data files."""

    m: int
    l: int
    seed: int
    order: int = 2
    iterations: int = DESK_PRESET["iterations"]
    burn_in: int = DESK_PRESET["burn_in"]
    thinning: int = DESK_PRESET["thinning"]
    chains: int = 4
    holdout: int = 0
    horizon: int = 0
    rank_threshold: float = 0.05
    ssvs: bool = True
    diagonal_state_noise: bool = True
    preliminary_iterations: int = 400
    preliminary_burn_in: int = 150
    preliminary_thinning: int = 2
    forecast_replicates: int = 1
    credible_level: float = 0.95
    anchors_y: list = None
    anchors_x: list = None
    # simulation-only knobs (used by the synthetic data command)
    n_sites: int = 9
    n_periods: int = 300
    n_vars_x: int = 1
    prior: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        if self.seed is None:
            raise SchemaError("seed is mandatory")
        for name in ("m", "l", "order", "iterations", "thinning", "chains"):
            if getattr(self, name) <= 0:
                raise SchemaError(f"{name} must be positive")
        if self.burn_in < 0 or self.burn_in >= self.iterations:
            raise SchemaError("burn_in must lie in [0, iterations)")

    def config_hash(self) -> str:
        """Stable digest over the semantically meaningful fields."""
        parts = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if f.name == "prior":
                for pf in sorted(dataclasses.fields(PriorConfig), key=lambda f: f.name):
                    parts.append(f"prior.{pf.name}={getattr(value, pf.name)!r}")
            else:
                parts.append(f"{f.name}={value!r}")
        digest = hashlib.sha256("\n".join(parts).encode()).hexdigest()
        return digest[:16]


_BOOL_STRINGS = {"true": True, "false": False, "yes": True, "no": False,
                 "1": True, "0": False}


def _coerce(raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() not in _BOOL_STRINGS:
            raise SchemaError(f"cannot parse boolean from {raw!r}")
        return _BOOL_STRINGS[raw.lower()]
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is list:
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw


def parse_config_text(text: str) -> RunConfig:
    """Parse a flat ``key = value`` config; ``prior.<name>`` keys override priors."""
    values, prior_values = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise SchemaError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key.startswith("prior."):
            prior_values[key[len("prior."):]] = raw
        else:
            values[key] = raw

    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            raise SchemaError(f"unknown config key {key!r}")
        f = fields[key]
        target = {"m": int, "l": int, "seed": int, "order": int, "iterations": int,
                  "burn_in": int, "thinning": int, "chains": int, "holdout": int,
                  "horizon": int, "preliminary_iterations": int,
                  "preliminary_burn_in": int, "preliminary_thinning": int,
                  "forecast_replicates": int, "n_sites": int, "n_periods": int,
                  "n_vars_x": int,
                  "rank_threshold": float, "credible_level": float,
                  "ssvs": bool, "diagonal_state_noise": bool,
                  "anchors_y": list, "anchors_x": list}.get(key, str)
        kwargs[key] = _coerce(raw, target)
    if "seed" not in kwargs:
        raise SchemaError("config must set a seed")
    if "m" not in kwargs or "l" not in kwargs:
        raise SchemaError("config must set m and l")

    prior_fields = {f.name: f for f in dataclasses.fields(PriorConfig)}
    prior_kwargs = {}
    for key, raw in prior_values.items():
        if key not in prior_fields:
            raise SchemaError(f"unknown prior key {key!r}")
        target = bool if key == "mh_adapt" else float
        prior_kwargs[key] = _coerce(raw, target)
    kwargs["prior"] = PriorConfig(**prior_kwargs)

    # anchor overrides arrive as site/row index strings
    for key in ("anchors_y", "anchors_x"):
        if kwargs.get(key):
            kwargs[key] = [int(v) for v in kwargs[key]]
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as handle:
        return parse_config_text(handle.read())
