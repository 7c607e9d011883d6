"""Flat key-value run configuration files.

Format: one "key = value" per line, '#' comments, a mandatory
"config_version" key. Dotted keys address the model/loss/train sections,
e.g. "model.n_blocks = 2". STRUCTURA_SEED in the environment overrides
both seeds after loading.
"""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

from structura.harness import RunConfig, TrainConfig, apply_seed_override
from structura.loss import LossConfig
from structura.model import ModelConfig

CONFIG_VERSION = 1


class ConfigFileError(ValueError):
    pass


def _coerce(raw: str, target_type):
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigFileError(f"expected a boolean, got {raw!r}")
    return target_type(raw)


def parse_config_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigFileError(f"line {line_no}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def build_run_config(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    version = pairs.pop("config_version", None)
    if version is None:
        raise ConfigFileError("missing config_version")
    if int(version) != CONFIG_VERSION:
        raise ConfigFileError(f"unsupported config_version {version}")

    sections = {"model": base.model, "loss": base.loss, "train": base.train}
    field_types = {
        name: {f.name: f.type for f in fields(type(obj))} for name, obj in sections.items()
    }
    updates: dict[str, dict] = {name: {} for name in sections}
    for key, raw in pairs.items():
        if key == "seed":  # shorthand: sets both model and train seeds
            updates["model"]["seed"] = int(raw)
            updates["train"]["seed"] = int(raw)
            continue
        if "." not in key:
            raise ConfigFileError(f"unknown key {key!r}")
        section, _, name = key.partition(".")
        if section not in sections or name not in field_types[section]:
            raise ConfigFileError(f"unknown key {key!r}")
        current = getattr(sections[section], name)
        updates[section][name] = _coerce(raw, type(current))
    return RunConfig(
        model=replace(base.model, **updates["model"]),
        loss=replace(base.loss, **updates["loss"]),
        train=replace(base.train, **updates["train"]),
    )


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    config = build_run_config(parse_config_text(Path(path).read_text(encoding="utf-8")), base)
    return apply_seed_override(config)


def default_config_text() -> str:
    """A documented config file with every key at its default."""
    run = RunConfig()
    lines = [f"config_version = {CONFIG_VERSION}", ""]
    for section_name, obj in (("model", run.model), ("loss", run.loss), ("train", run.train)):
        for f in fields(type(obj)):
            lines.append(f"{section_name}.{f.name} = {getattr(obj, f.name)}")
        lines.append("")
    return "\n".join(lines)
