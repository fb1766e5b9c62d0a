"""Flat-key scenario configuration.

Grammar (one assignment per line):

    key = value            # trailing comments allowed
    # full-line comment

Keys are lowercase words joined by dots or underscores.  Values are parsed as
booleans (true/false), integers, floats, or comma-separated lists thereof;
anything else stays a string.  Duplicate keys are rejected.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

from .errors import ConfigError

SCENARIO_NAMES = ("figure2", "assumption_sweep", "sandwich", "vanishing_limit",
                  "gibbs", "transfer_toy")
REGULARISER_NAMES = ("none", "standard", "anchored", "quadratic_ab", "arc", "geodesic")

_KEY_RE = re.compile(r"^[a-z][a-z0-9_.]*$")


def _parse_scalar(token: str):
    token = token.strip()
    low = token.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    return token


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not _KEY_RE.match(key):
            raise ConfigError(f"line {lineno}: invalid key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if "," in value:
            out[key] = [_parse_scalar(tok) for tok in value.split(",") if tok.strip()]
        else:
            out[key] = _parse_scalar(value)
    return out


def canonical_text(raw: dict) -> str:
    lines = []
    for key in sorted(raw):
        value = raw[key]
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    output_dir: str
    seeds: tuple
    raw: dict = field(repr=False)

    @property
    def scenario_hash(self) -> str:
        return hashlib.sha256(canonical_text(self.raw).encode()).hexdigest()[:16]

    def get(self, key, default=None):
        return self.raw.get(key, default)

    def get_list(self, key, default=None):
        value = self.raw.get(key, default)
        if value is None:
            return None
        if not isinstance(value, list):
            return [value]
        return list(value)

    def get_floats(self, key, default=None):
        values = self.get_list(key, default)
        return None if values is None else [float(v) for v in values]


def load_config(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as handle:
        raw = parse_config_text(handle.read())
    return build_config(raw)


def build_config(raw: dict) -> ScenarioConfig:
    scenario = raw.get("scenario")
    if scenario not in SCENARIO_NAMES:
        raise ConfigError(f"scenario must be one of {SCENARIO_NAMES}, got {scenario!r}")
    output_dir = raw.get("output_dir")
    if not output_dir or not isinstance(output_dir, str):
        raise ConfigError("output_dir is required")
    seeds = raw.get("seeds", 0)
    if not isinstance(seeds, list):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    cfg = ScenarioConfig(scenario=scenario, output_dir=output_dir,
                         seeds=tuple(seeds), raw=dict(raw))
    _validate(cfg)
    return cfg


def _validate(cfg: ScenarioConfig):
    for key, value in cfg.raw.items():
        if "lambda" in key:
            values = value if isinstance(value, list) else [value]
            for v in values:
                if not isinstance(v, (int, float)) or v < 0:
                    raise ConfigError(f"{key} must be >= 0, got {v!r}")
    regs = cfg.get_list("regularisers")
    if regs is not None:
        if not regs:
            raise ConfigError("regularisers list must not be empty")
        for name in regs:
            if name not in REGULARISER_NAMES:
                raise ConfigError(f"unknown regulariser {name!r}; "
                                  f"choose from {REGULARISER_NAMES}")
    model = cfg.get("model")
    if model is not None and model not in ("bilinear", "linear", "mlp"):
        raise ConfigError(f"unknown model {model!r}")
    validator = _SCENARIO_VALIDATORS.get(cfg.scenario)
    if validator:
        validator(cfg)


def _require(cfg, *keys):
    for key in keys:
        if cfg.get(key) is None:
            raise ConfigError(f"scenario {cfg.scenario!r} requires key {key!r}")


def _validate_figure2(cfg):
    _require(cfg, "model", "regularisers")
    if cfg.get("model") not in ("bilinear", "linear"):
        raise ConfigError("figure2 runs on the two-parameter toys")


def _validate_sweep(cfg):
    _require(cfg, "widths")


def _validate_transfer(cfg):
    _require(cfg, "lambda_grid", "regularisers")


_SCENARIO_VALIDATORS = {
    "figure2": _validate_figure2,
    "assumption_sweep": _validate_sweep,
    "transfer_toy": _validate_transfer,
}
