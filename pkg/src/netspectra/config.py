"""Run configuration: INI-style sections with a fixed, typed schema.

Every key has a type and a default; unknown sections or keys are errors.
Errors carry the line number of the offending entry.
"""

from __future__ import annotations

import configparser
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in re.split(r"[,\s]+", text.strip()) if t)


def _points(text: str) -> tuple[tuple[int, float], ...]:
    out = []
    for item in re.split(r"[,\s]+", text.strip()):
        if not item:
            continue
        epoch, lr = item.split(":")
        out.append((int(epoch), float(lr)))
    return tuple(out)


def _record(text: str):
    low = text.strip().lower()
    if low in ("none", ""):
        return None
    if low == "epoch":
        return "epoch"
    return int(low)


def _scope(text: str):
    low = text.strip().lower()
    if low in ("all", "last"):
        return low
    return int(low)


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(t for t in re.split(r"[,\s]+", text.strip()) if t)


def _budget(text: str):
    low = text.strip().lower()
    if low == "outliers":
        return low
    return float(low) if "." in low else int(low)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip().lower()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return value

    return parse


# section -> key -> (parser, default). ``None`` defaults mean "not set".
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "run": {
        "seed": (int, 0),
        "output_dir": (str, "out"),
    },
    "data": {
        "source": (_choice("synth", "idx"), "synth"),
        "train_images": (str, None),
        "train_labels": (str, None),
        "test_images": (str, None),
        "test_labels": (str, None),
        "classes": (int, 10),
        "dim": (int, 20),
        "per_class": (int, 100),
        "test_per_class": (int, 100),
        "separation": (float, 6.0),
        "offset": (float, 0.0),
        "train_limit": (int, 0),
    },
    "network": {
        "dims": (_int_list, None),
        "init": (_choice("uniform", "normal"), "uniform"),
    },
    "train": {
        "lr": (float, 0.01),
        "schedule": (_choice("constant", "geometric", "piecewise"), "constant"),
        "decay": (float, 1.0),
        "points": (_points, ()),
        "momentum": (float, 0.0),
        "weight_decay": (float, 0.0),
        "batch_size": (int, 32),
        "epochs": (int, 10),
        "record": (_record, "epoch"),
        "record_start_epoch": (int, 0),
        "trainable": (_scope, "all"),
    },
    "hessian": {
        "mode": (_choice("dense", "lanczos"), "dense"),
        "k": (int, 20),
        "max_iters": (int, 0),
        "subset": (int, 0),
        "cap": (int, 6000),
        "scope": (_scope, "all"),
    },
    "analysis": {
        "use": (_choice("weights", "velocities"), "weights"),
        "components": (int, 5),
        "window_lo": (int, 0),
        "window_hi": (int, 0),
        "drift_t0": (float, 0.0),
        "slice_count": (int, 5),
        "slice_half_width": (float, 1.0),
        "slice_points": (int, 41),
        "scaling_min": (float, 0.5),
        "scaling_max": (float, 2.0),
        "scaling_points": (int, 16),
        "mp_estimator": (_choice("mean-square", "centred", "mad"), "mean-square"),
        "k_neighbors": (int, 10),
        "density_width": (float, 1.0),
        "scope": (_scope, "all"),
        "ordering": (_choice("algebraic", "magnitude"), "magnitude"),
        "eval_limit": (int, 0),
    },
    "forget": {
        "task_a": (_int_list, (0, 1, 2, 3, 4)),
        "task_b": (_int_list, (5, 6, 7, 8, 9)),
        "methods": (_str_list, ("none", "hess-loss", "sv-loss", "hess-grad", "sv-grad")),
        "lambda_cf": (float, 1000.0),
        "gamma": (float, 1.0),
        "pretrain_epochs": (int, 30),
        "task1_epochs": (int, 10),
        "epochs": (int, 50),
        "lr": (float, 0.01),
        "lr_fraction": (float, 0.3),
        "hessian_budget": (_budget, 0.2),
        "singular_budget": (_budget, 5),
        "bias_fraction": (float, 0.2),
        "scope": (_scope, "last"),
    },
}

REQUIRED = {("network", "dims")}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    path: Path | None = None

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def echo(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in kv.items()} for s, kv in self.values.items()}


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    lines: dict[tuple[str, str], int] = {}
    section = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            lines[(section, "")] = number
            continue
        m = re.match(r"([^=:\s]+)\s*[=:]", line)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = number
    return lines


def parse_config(text: str, path: Path | None = None) -> RunConfig:
    where = str(path) if path else "<config>"
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    lines = _line_numbers(text)
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{where}:{lines.get((section, ''), '?')}: unknown section [{section}]")
        for key, raw in parser.items(section):
            line = lines.get((section, key), "?")
            if key not in SCHEMA[section]:
                raise ConfigError(f"{where}:{line}: unknown key '{key}' in [{section}]")
            conv, _ = SCHEMA[section][key]
            try:
                values[section][key] = conv(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{where}:{line}: bad value for {section}.{key}: {exc}") from None
    for section, key in REQUIRED:
        if values[section][key] is None:
            raise ConfigError(f"{where}: missing required key {section}.{key}")
    if values["data"]["source"] == "idx":
        for key in ("train_images", "train_labels"):
            if not values["data"][key]:
                raise ConfigError(f"{where}: data.source = idx requires data.{key}")
    return RunConfig(values, path)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path)


def derive_seed(seed: int, label: str) -> int:
    """Independent per-consumer seed from the run seed and a fixed label."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())])
    return int(ss.generate_state(1)[0])
