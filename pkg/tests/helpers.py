"""Small models and pairs shared by the unit tests."""

from __future__ import annotations

import numpy as np

from bdlab.dpo import GENERATION, UNDERSTANDING, PreferencePair
from bdlab.model import ModelConfig, ModelState, TokenSequence, init_model, parameter_shapes


def tiny_config(seed: int = 0, **kw) -> ModelConfig:
    base = dict(hidden_dim=6, trunk_layers=2, text_vocab=7, code_vocab=9, adapter_rank=2, gen_tokens=5, rng_seed=seed)
    base.update(kw)
    return ModelConfig(**base)


def perturbed_state(cfg: ModelConfig, rng: np.random.Generator, all_trainable: bool = False, scale: float = 0.3) -> ModelState:
    """A state whose adapters (and optionally everything) moved away from the reference."""
    st = init_model(cfg)
    if all_trainable:
        st = ModelState(st.config, st.params, st.reference, tuple(parameter_shapes(cfg)))
    for name in st.trainable:
        st.params[name] = st.params[name] + scale * rng.standard_normal(st.params[name].shape)
    return st


def random_pair(cfg: ModelConfig, rng: np.random.Generator, task: str, context_len: int = 3, text_len: int | None = None) -> PreferencePair:
    ctx = TokenSequence("text", rng.integers(0, cfg.text_vocab, size=context_len))
    if task == UNDERSTANDING:
        n = text_len or int(rng.integers(2, 6))
        m = text_len or int(rng.integers(2, 6))
        return PreferencePair(
            task, ctx,
            TokenSequence("text", rng.integers(0, cfg.text_vocab, size=n)),
            TokenSequence("text", rng.integers(0, cfg.text_vocab, size=m)),
        )
    n = cfg.gen_tokens
    return PreferencePair(
        GENERATION, ctx,
        TokenSequence("code", rng.integers(0, cfg.code_vocab, size=n)),
        TokenSequence("code", rng.integers(0, cfg.code_vocab, size=n)),
    )


SMALL_LAB_INI = """
[model]
hidden_dim = 8
trunk_layers = 2
text_vocab = 16
code_vocab = 24
gen_tokens = 16

[data.understanding]
pair_count = 30
context_length = 4
response_length_min = 6
response_length_max = 10

[data.generation]
pair_count = 10
context_length = 4

[train]
steps = 20
lr = 0.005

[balancing]
recompute_interval = 5

[lab]
eval_pairs = 8
n_batches = 12
"""


def small_lab_file(directory) -> str:
    path = directory / "small.ini"
    path.write_text(SMALL_LAB_INI)
    return str(path)
