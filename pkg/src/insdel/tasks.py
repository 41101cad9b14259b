"""Synthetic character translation tasks and their TSV file format."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .model import LETTERS, check_letters

TASKS = ("alpha-shift", "caesar")

# (train, held-out) corpus sizes used for each task
STANDARD_REGIMES = {"alpha-shift": (1000, 100), "caesar": (100_000, 1000)}

_DEFAULTS = {"alpha-shift": (3, 10, 10), "caesar": (3, 25, 25)}


@dataclass(frozen=True)
class Example:
    source: str
    target: str

    def __post_init__(self):
        if not self.source or not self.target:
            raise ValueError("examples need a nonempty source and target")
        check_letters(self.source, "source")
        check_letters(self.target, "target")


@dataclass(frozen=True)
class TaskConfig:
    task: str = "alpha-shift"
    min_n: int | None = None
    max_n: int | None = None
    shift: int | None = None
    count: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        lo, hi, shift = _DEFAULTS[self.task]
        for name, default in (("min_n", lo), ("max_n", hi), ("shift", shift)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, default)
        if not 3 <= self.min_n < self.max_n:
            raise ValueError(f"need 3 <= min_n < max_n, got min_n={self.min_n} max_n={self.max_n}")
        if self.count < 0:
            raise ValueError("count must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def required_max_positions(config: TaskConfig) -> int:
    """Longest canvas the task can produce: source, a target up to twice its length, three markers."""
    n = config.max_n - 1
    return 3 * n + 3


def _shift_letter(c: str, shift: int) -> str:
    return LETTERS[(LETTERS.index(c) + shift) % 26]


def gen_alpha_shift(config: TaskConfig, rng: np.random.Generator) -> list[Example]:
    if 26 - (config.max_n - 1) - config.shift < 0:
        raise ValueError(f"alpha-shift with max_n={config.max_n} and shift={config.shift} does not fit the alphabet")
    out = []
    for _ in range(config.count):
        n = int(rng.integers(config.min_n, config.max_n))
        start = int(rng.integers(0, 26 - n - config.shift + 1))
        source = LETTERS[start:start + n]
        target = LETTERS[start + config.shift:start + config.shift + n]
        out.append(Example(source, target))
    return out


def caesar(source: str, shift: int) -> str:
    return "".join(_shift_letter(c, shift) for c in source)


def gen_caesar(config: TaskConfig, rng: np.random.Generator) -> list[Example]:
    out = []
    for _ in range(config.count):
        n = int(rng.integers(config.min_n, config.max_n))
        source = "".join(LETTERS[i] for i in rng.integers(0, 26, size=n))
        out.append(Example(source, caesar(source, config.shift)))
    return out


def generate(config: TaskConfig, rng: np.random.Generator) -> list[Example]:
    if config.task == "alpha-shift":
        return gen_alpha_shift(config, rng)
    return gen_caesar(config, rng)


def write_dataset(path: str | os.PathLike, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"{ex.source}\t{ex.target}\n")


class DatasetParseError(ValueError):
    pass


def read_dataset(path: str | os.PathLike) -> list[Example]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.endswith("\n"):
                raise DatasetParseError(f"{path}:{lineno}: line is not newline-terminated")
            parts = line[:-1].split("\t")
            if len(parts) != 2:
                raise DatasetParseError(f"{path}:{lineno}: expected 'source<TAB>target'")
            try:
                out.append(Example(*parts))
            except ValueError as exc:
                raise DatasetParseError(f"{path}:{lineno}: {exc}") from None
    return out
