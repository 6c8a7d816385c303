"""Seeded synthetic preference pairs for the understanding and generation tasks.

Understanding pairs carry real signal: the chosen response follows a
context-keyed counting rule (corrupted with probability ``1 - kappa``), the
rejected one is uniform noise.  Generation pairs default to the
indistinguishable regime: chosen and rejected come from one shared process.

Code sequences are drawn from a per-sequence palette: each sequence picks
``code_palette`` distinct codebook entries and fills its positions uniformly
from them.  Every token is still marginally uniform over the codebook, but
tokens within one sequence are correlated, as the codes of one image are.
``code_palette = 0`` gives i.i.d. uniform tokens.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dpo import GENERATION, TASKS, UNDERSTANDING, PreferencePair
from .errors import ConfigError, DomainError, GenerationExhaustedError
from .model import CODE, TEXT, ModelConfig, TokenSequence

SAME_DISTRIBUTION = "same_distribution"
RULE_SEPARATED = "rule_separated"
GENERATION_MODES = (SAME_DISTRIBUTION, RULE_SEPARATED)

DATASET_FORMAT = "bdlab-pairs-v1"


@dataclass(frozen=True)
class DataConfig:
    task: str = UNDERSTANDING
    pair_count: int = 1300
    context_length: int = 16
    response_length_min: int = 30
    response_length_max: int = 100
    informativeness: float = 1.0
    margin_filter_threshold: float = 0.5
    mode: str = SAME_DISTRIBUTION
    code_palette: int = 16
    max_retries: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError("task", f"must be one of {TASKS}, got {self.task!r}")
        if self.pair_count < 1:
            raise ConfigError("pair_count", f"must be >= 1, got {self.pair_count}")
        if self.context_length < 1:
            raise ConfigError("context_length", f"must be >= 1, got {self.context_length}")
        if not 1 <= self.response_length_min <= self.response_length_max:
            raise ConfigError(
                "response_length_min",
                f"band [{self.response_length_min}, {self.response_length_max}] is empty or starts below 1",
            )
        if not 0.0 <= self.informativeness <= 1.0:
            raise ConfigError("informativeness", f"must be in [0, 1], got {self.informativeness}")
        if self.mode not in GENERATION_MODES:
            raise ConfigError("mode", f"must be one of {GENERATION_MODES}, got {self.mode!r}")
        if self.code_palette < 0:
            raise ConfigError("code_palette", f"must be >= 0, got {self.code_palette}")
        if self.max_retries < 1:
            raise ConfigError("max_retries", f"must be >= 1, got {self.max_retries}")

    @classmethod
    def understanding(cls, **kw) -> "DataConfig":
        return cls(**{"task": UNDERSTANDING, "pair_count": 1300, "informativeness": 1.0, **kw})

    @classmethod
    def generation(cls, **kw) -> "DataConfig":
        return cls(**{"task": GENERATION, "pair_count": 288, "informativeness": 0.0, **kw})

    @property
    def filter_bypassed(self) -> bool:
        return self.task == GENERATION and self.mode == SAME_DISTRIBUTION


def context_key(context: TokenSequence, vocab: int) -> int:
    """Deterministic key of a context: position-weighted token sum mod ``vocab``."""
    weights = np.arange(1, len(context) + 1, dtype=np.int64)
    return int((weights * context.tokens).sum() % vocab)


def rule_tokens(context: TokenSequence, length: int, vocab: int) -> np.ndarray:
    """The rule response: ``(key(context) + t) mod vocab`` for t = 1..length."""
    return (context_key(context, vocab) + np.arange(1, length + 1)) % vocab


def rule_match_fraction(context: TokenSequence, response: TokenSequence, vocab: int) -> float:
    return float(np.mean(response.tokens == rule_tokens(context, len(response), vocab)))


def _background(rng: np.random.Generator, length: int, vocab: int, palette: int) -> np.ndarray:
    if palette == 0 or palette >= vocab:
        return rng.integers(0, vocab, size=length)
    colours = rng.choice(vocab, size=palette, replace=False)
    return colours[rng.integers(0, palette, size=length)]


def _corrupt(rng, tokens: np.ndarray, keep_prob: float, replacement: np.ndarray) -> np.ndarray:
    out = tokens.copy()
    flip = rng.random(tokens.size) >= keep_prob
    out[flip] = replacement[flip]
    return out


def _make_pairs(cfg: DataConfig, model_cfg: ModelConfig, modality: str, draw_response) -> list[PreferencePair]:
    rng = np.random.default_rng(cfg.rng_seed)
    vocab = model_cfg.vocab(modality)
    pairs = []
    for _ in range(cfg.pair_count):
        for _attempt in range(cfg.max_retries):
            context = TokenSequence(TEXT, rng.integers(0, model_cfg.text_vocab, size=cfg.context_length))
            chosen, rejected = draw_response(rng, context)
            margin = rule_match_fraction(context, chosen, vocab) - rule_match_fraction(context, rejected, vocab)
            if cfg.filter_bypassed or margin >= cfg.margin_filter_threshold:
                break
        else:
            raise GenerationExhaustedError(
                f"{cfg.task}: no pair reached margin {cfg.margin_filter_threshold} in "
                f"{cfg.max_retries} attempts at informativeness {cfg.informativeness}"
            )
        pairs.append(PreferencePair(cfg.task, context, chosen, rejected, margin))
    return pairs


def generate_understanding_pairs(cfg: DataConfig, model_cfg: ModelConfig) -> list[PreferencePair]:
    if cfg.task != UNDERSTANDING:
        raise DomainError("generate_understanding_pairs needs an understanding DataConfig")
    v = model_cfg.text_vocab

    def draw(rng, context):
        n = int(rng.integers(cfg.response_length_min, cfg.response_length_max + 1))
        chosen = _corrupt(rng, rule_tokens(context, n, v), cfg.informativeness, rng.integers(0, v, size=n))
        rejected = rng.integers(0, v, size=n)
        return TokenSequence(TEXT, chosen), TokenSequence(TEXT, rejected)

    return _make_pairs(cfg, model_cfg, TEXT, draw)


def generate_generation_pairs(
    cfg: DataConfig, model_cfg: ModelConfig, mode: str | None = None
) -> list[PreferencePair]:
    if cfg.task != GENERATION:
        raise DomainError("generate_generation_pairs needs a generation DataConfig")
    if mode is not None and mode != cfg.mode:
        cfg = replace(cfg, mode=mode)
    v, n = model_cfg.code_vocab, model_cfg.gen_tokens

    def draw(rng, context):
        if cfg.mode == SAME_DISTRIBUTION:
            chosen = _background(rng, n, v, cfg.code_palette)
        else:
            noise = _background(rng, n, v, cfg.code_palette)
            chosen = _corrupt(rng, rule_tokens(context, n, v), cfg.informativeness, noise)
        rejected = _background(rng, n, v, cfg.code_palette)
        return TokenSequence(CODE, chosen), TokenSequence(CODE, rejected)

    return _make_pairs(cfg, model_cfg, CODE, draw)


def generate_pairs(cfg: DataConfig, model_cfg: ModelConfig) -> list[PreferencePair]:
    if cfg.task == UNDERSTANDING:
        return generate_understanding_pairs(cfg, model_cfg)
    return generate_generation_pairs(cfg, model_cfg)


def mean_response_length(pairs: Sequence[PreferencePair]) -> float:
    return float(np.mean([len(p.chosen) for p in pairs]))


# ---------------------------------------------------------------------------
# JSON-lines serialization
# ---------------------------------------------------------------------------


def pair_to_dict(pair: PreferencePair) -> dict:
    return {
        "task": pair.task,
        "context": pair.context.tokens.tolist(),
        "chosen": pair.chosen.tokens.tolist(),
        "rejected": pair.rejected.tokens.tolist(),
        "construction_margin": pair.construction_margin,
    }


def pair_from_dict(obj: dict) -> PreferencePair:
    modality = TEXT if obj["task"] == UNDERSTANDING else CODE
    return PreferencePair(
        obj["task"],
        TokenSequence(TEXT, obj["context"]),
        TokenSequence(modality, obj["chosen"]),
        TokenSequence(modality, obj["rejected"]),
        float(obj["construction_margin"]),
    )


def write_pairs(
    path: str | Path,
    pairs: Iterable[PreferencePair],
    configs: Sequence[DataConfig],
    model_cfg: ModelConfig,
) -> None:
    header = {
        "format": DATASET_FORMAT,
        "model": asdict(model_cfg),
        "configs": [dict(asdict(c), filter_bypassed=c.filter_bypassed) for c in configs],
        "seeds": [c.rng_seed for c in configs],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for pair in pairs:
            fh.write(json.dumps(pair_to_dict(pair), sort_keys=True) + "\n")


def read_pairs(path: str | Path) -> tuple[dict, list[PreferencePair]]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise DomainError(f"{path}: empty dataset file")
        header = json.loads(first)
        if header.get("format") != DATASET_FORMAT:
            raise DomainError(f"{path}: unknown dataset format {header.get('format')!r}")
        pairs = [pair_from_dict(json.loads(line)) for line in fh if line.strip()]
    return header, pairs


def data_config_from_dict(obj: dict) -> DataConfig:
    known = {f.name for f in fields(DataConfig)}
    return DataConfig(**{k: v for k, v in obj.items() if k in known})


def split_by_task(pairs: Iterable[PreferencePair]) -> dict[str, list[PreferencePair]]:
    out: dict[str, list[PreferencePair]] = {t: [] for t in TASKS}
    for p in pairs:
        out[p.task].append(p)
    return out
