"""INI-style lab configuration: one section per component, flags override keys."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .balancing import STRATEGIES, BalancingConfig
from .data import DataConfig
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

@dataclass(frozen=True)
class SweepConfig:
    strategies: tuple[str, ...] = STRATEGIES
    seeds: tuple[int, ...] = (0, 1, 2)
    betas: tuple[float, ...] = (0.1,)
    soup_lambdas: tuple[float, ...] = (0.3, 0.5, 0.7)

    def __post_init__(self):
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError("strategies", f"unknown strategy {s!r}")
        for b in self.betas:
            if not b > 0:
                raise ConfigError("betas", f"beta must be > 0, got {b}")
        for lam in self.soup_lambdas:
            if not 0.0 <= lam <= 1.0:
                raise ConfigError("soup_lambdas", f"lambda must be in [0, 1], got {lam}")


@dataclass(frozen=True)
class LabConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data_understanding: DataConfig = field(default_factory=lambda: DataConfig.understanding(rng_seed=0))
    data_generation: DataConfig = field(default_factory=lambda: DataConfig.generation(rng_seed=1))
    eval_pairs: int = 200
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    n_batches: int = 200

    def with_data_seed(self, seed: int) -> "LabConfig":
        return replace(
            self,
            data_understanding=replace(self.data_understanding, rng_seed=seed),
            data_generation=replace(self.data_generation, rng_seed=seed + 1),
        )

    def eval_configs(self) -> tuple[DataConfig, DataConfig]:
        """Held-out sets: same generators, disjoint seeds."""
        return (
            replace(self.data_understanding, pair_count=self.eval_pairs, rng_seed=self.data_understanding.rng_seed + 1000),
            replace(self.data_generation, pair_count=self.eval_pairs, rng_seed=self.data_generation.rng_seed + 1000),
        )


SECTIONS = {
    "model": "model",
    "data.understanding": "data_understanding",
    "data.generation": "data_generation",
    "train": "train",
    "balancing": "balancing",
    "sweep": "sweep",
    "lab": None,
}


def _coerce(name: str, raw: str, annotation):
    tp = annotation if not isinstance(annotation, str) else eval(annotation, vars(typing), {})
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            inner = typing.get_args(tp)[0]
            return tuple(_coerce(name, part.strip(), inner) for part in raw.split(",") if part.strip())
        if tp is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def _apply(obj, section: str, items: dict[str, str]):
    hints = typing.get_type_hints(type(obj))
    known = {f.name for f in fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in known or dataclasses.is_dataclass(getattr(obj, key)):
            raise ConfigError(f"{section}.{key}", "unknown configuration key")
        updates[key] = _coerce(f"{section}.{key}", raw, hints[key])
    try:
        return replace(obj, **updates)
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc.field}", str(exc).split(": ", 1)[-1]) from None


def load_config(path: str | Path | None = None, text: str | None = None) -> LabConfig:
    """Read an INI file (or string); absent sections and keys keep their defaults."""
    lab = LabConfig()
    if path is None and text is None:
        return lab
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        if text is not None:
            parser.read_string(text)
        else:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError("config", f"malformed configuration file: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown configuration section")
        items = dict(parser.items(section))
        if section == "lab":
            lab = _apply(lab, "lab", items)
        elif section == "balancing":
            lab = replace(lab, train=replace(lab.train, balancing=_apply(lab.train.balancing, "balancing", items)))
        else:
            attr = SECTIONS[section]
            lab = replace(lab, **{attr: _apply(getattr(lab, attr), section, items)})
    if lab.eval_pairs < 1:
        raise ConfigError("lab.eval_pairs", f"must be >= 1, got {lab.eval_pairs}")
    if lab.n_batches < 0:
        raise ConfigError("lab.n_batches", f"must be >= 0, got {lab.n_batches}")
    return lab


def config_to_dict(lab: LabConfig) -> dict:
    return dataclasses.asdict(lab)
