"""Plain-text ``key = value`` run configuration.

Keys are dotted ``section.field`` names, where section is one of ``model``,
``train``, ``synth`` or ``run``::

    # comments start with '#'
    train.lr = 5e-4
    train.loss_mask = GC,LRC,GR
    model.d_model = 64
    synth.n_images = 100

Values are read as Python literals when possible (numbers, booleans, None,
tuples, lists) and as bare strings otherwise. ``--set`` overrides on the
command line use the same syntax.
"""

from __future__ import annotations

import ast
import dataclasses
import hashlib
from pathlib import Path

from lexalign.data.synthetic import SynthConfig
from lexalign.errors import ConfigError
from lexalign.model import ModelConfig
from lexalign.train import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthConfig}


def parse_value(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if text.lower() in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_assignment(line: str) -> tuple[str, object]:
    if "=" not in line:
        raise ConfigError(f"expected KEY=VALUE, got {line!r}")
    key, value = line.split("=", 1)
    key = key.strip()
    if "." not in key:
        raise ConfigError(f"key {key!r} needs a section prefix (model., train., synth., run.)")
    section = key.split(".", 1)[0]
    if section not in (*SECTIONS, "run"):
        raise ConfigError(f"unknown config section {section!r}")
    return key, parse_value(value)


def read_config_file(path) -> dict[str, object]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, value = parse_assignment(line)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        out[key] = value
    return out


def section(flat: dict[str, object], name: str) -> dict[str, object]:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}


def build(flat: dict[str, object], name: str, **defaults):
    cls = SECTIONS[name]
    values = {**defaults, **section(flat, name)}
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def derive_seed(root: int, name: str) -> int:
    """Stable per-component seed from the root seed and a component name."""
    digest = hashlib.sha256(f"{root}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")
