"""Flat key=value run configuration with schema validation.

Precedence: built-in defaults, then a config file, then explicit overrides
(command-line flags). Every key is validated against the schema; unknown
keys are rejected so typos fail loudly instead of silently using defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, field

# key -> (type, default). Booleans accept true/false/1/0/yes/no/on/off in
# text form. s1_micro_batch = 0 means full-batch updates (no accumulation).
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "jobs": (int, 1),
    # polar grid and display geometry
    "n_radial": (int, 256),
    "n_angular": (int, 256),
    "refiner_size": (int, 64),
    "cart_side": (int, 384),
    # speckle simulation
    "psf_f0": (float, 0.25),
    "psf_sigma_axial": (float, 2.0),
    "psf_sigma_lateral": (float, 3.0),
    "dynamic_range_db": (float, 40.0),
    # per-class echogenicity (mean, relative spread)
    "echo_lumen_mean": (float, 0.05),
    "echo_lumen_spread": (float, 0.1),
    "echo_media_mean": (float, 0.35),
    "echo_media_spread": (float, 0.1),
    "echo_externa_mean": (float, 0.60),
    "echo_externa_spread": (float, 0.1),
    # dataset layout
    "image_dir": (str, "images"),
    "image_pattern": (str, "*.png"),
    "lumen_contour_pattern": (str, "contours/lum_{id}.txt"),
    "eel_contour_pattern": (str, "contours/eel_{id}.txt"),
    "patient_id_regex": (str, r"frame_(\d+)_"),
    # model architecture
    "g1_width": (int, 64),
    "g1_blocks": (int, 4),
    "d1_width": (int, 64),
    "d1_patch_output": (bool, False),
    "g2_width": (int, 64),
    "g2_blocks": (int, 4),
    "g2_norm": (bool, True),
    "d2_width": (int, 64),
    "d2_norm": (bool, True),
    # stage I training
    "s1_lr": (float, 0.001),
    "s1_epochs": (int, 20),
    "s1_batch": (int, 512),
    "s1_lambda": (float, 0.1),
    "s1_history_batches": (int, 50),
    "s1_micro_batch": (int, 0),
    # stage II training
    "s2_lr": (float, 0.0002),
    "s2_decay": (float, 0.5),
    "s2_decay_every": (int, 100),
    "s2_epochs": (int, 1200),
    "s2_batch": (int, 64),
    # evaluation
    "eval_n": (int, 30),
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_value(key: str, raw: str):
    """Convert a textual value to the schema type for `key`."""
    if key not in SCHEMA:
        raise ValueError(f"unknown config key: {key!r}")
    typ, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if typ is bool:
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(
            f"config key {key!r} expects {typ.__name__}, got {raw!r}"
        ) from None


def load_config_file(path: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment, blanks are skipped."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(
                    f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}"
                )
            key, raw = stripped.split("=", 1)
            values[key.strip()] = parse_value(key.strip(), raw)
    return values


@dataclass(frozen=True)
class RunConfig:
    """Effective configuration after precedence merging."""

    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        values = object.__getattribute__(self, "values")
        if key in values:
            return values[key]
        raise AttributeError(key)

    def __getitem__(self, key):
        return self.values[key]

    def echo_lines(self) -> list[str]:
        return [f"{k} = {self.values[k]}" for k in sorted(self.values)]


def build_config(
    file_values: dict | None = None, overrides: dict | None = None
) -> RunConfig:
    """defaults < config file < overrides, with unknown keys rejected."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for layer in (file_values or {}, overrides or {}):
        for key, val in layer.items():
            if key not in SCHEMA:
                raise ValueError(f"unknown config key: {key!r}")
            typ, _ = SCHEMA[key]
            if isinstance(val, str) and typ is not str:
                val = parse_value(key, val)
            if typ is float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if not isinstance(val, typ) or (typ is not bool and isinstance(val, bool)):
                raise ValueError(
                    f"config key {key!r} expects {typ.__name__}, "
                    f"got {type(val).__name__}"
                )
            values[key] = val
    return RunConfig(values)
