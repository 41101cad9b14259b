"""Plain-text ``key=value`` run configuration with ``task.*``, ``model.*`` and ``train.*`` keys."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .model import VOCAB_SIZE
from .tasks import TaskConfig, required_max_positions
from .training import TrainConfig
from .transformer import ModelConfig

SECTIONS = {"task": TaskConfig, "model": ModelConfig, "train": TrainConfig}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig
    model: ModelConfig
    train: TrainConfig

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            for key, value in dataclasses.asdict(getattr(self, section)).items():
                lines.append(f"{section}.{key}={_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _field_kind(cls, name: str) -> str:
    annotation = str({f.name: f.type for f in dataclasses.fields(cls)}[name])
    for kind in ("bool", "int", "float", "str"):
        if kind in annotation:
            return kind
    return "str"


def _parse_value(kind: str, raw: str):
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, origin: str = "<config>") -> RunConfig:
    """Merge ``text`` over the defaults; unknown keys and bad values raise ConfigError."""
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value")
        key, raw = (p.strip() for p in line.split("=", 1))
        section, _, name = key.partition(".")
        cls = SECTIONS.get(section)
        if cls is None or name not in {f.name for f in dataclasses.fields(cls)}:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        try:
            values[section][name] = _parse_value(_field_kind(cls, name), raw)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from None

    try:
        task = TaskConfig(**values["task"])
        need = required_max_positions(task)
        model_values = {"max_positions": need, **values["model"]}
        if model_values["max_positions"] < need:
            raise ConfigError(f"{origin}: model.max_positions={model_values['max_positions']} is below the "
                              f"{need} positions task {task.task} can produce")
        model = ModelConfig(**model_values)
        if model.vocab_size != VOCAB_SIZE:
            raise ConfigError(f"{origin}: model.vocab_size must be {VOCAB_SIZE}")
        train = TrainConfig(**values["train"])
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    return RunConfig(task, model, train)


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return parse_config("")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))
