"""INI-style experiment configuration with sections [problem], [numerics] and [output]."""

from __future__ import annotations

import ast
import configparser

from .errors import ConfigError
from .lab import ExperimentConfig

SECTIONS = {
    "problem": ("case", "fields", "field_params", "a", "hurst", "t"),
    "numerics": ("n_paths", "n_steps", "seed", "sampler", "w_refine", "bandwidth", "n_boot", "level",
                 "kde_order", "grid_points", "radius_factor", "c2_min", "c2_max", "c2_count", "batch"),
    "output": ("out_dir", "format"),
}


def _value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw.strip()


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
            values[key] = _value(raw)
    if "a" in values:
        values["a"] = tuple(float(v) for v in (values["a"] if isinstance(values["a"], (list, tuple))
                                               else [values["a"]]))
    if "field_params" in values and not isinstance(values["field_params"], dict):
        raise ConfigError("field_params must be a dict literal")
    try:
        cfg = ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg, key)
            if value is None:
                continue
            lines.append(f"{key} = {value!r}" if not isinstance(value, str) else f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
