"""DPO loss, implicit reward margin, joint objective and KL to the reference policy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .model import CODE, TEXT, ModelState, TokenSequence, backward, forward, next_token_table
from .vectors import GradientVector

UNDERSTANDING = "understanding"
GENERATION = "generation"
TASKS = (UNDERSTANDING, GENERATION)
TASK_MODALITY = {UNDERSTANDING: TEXT, GENERATION: CODE}

LN2 = math.log(2.0)


@dataclass(frozen=True, eq=False)
class PreferencePair:
    task: str
    context: TokenSequence
    chosen: TokenSequence
    rejected: TokenSequence
    construction_margin: float = 0.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise DomainError(f"unknown task {self.task!r}")
        if self.context.modality != TEXT:
            raise DomainError("pair context must be text")
        want = TASK_MODALITY[self.task]
        if self.chosen.modality != want or self.rejected.modality != want:
            raise DomainError(f"{self.task} pair responses must be {want} sequences")
        if self.task == GENERATION and len(self.chosen) != len(self.rejected):
            raise DomainError("generation chosen/rejected lengths differ")


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1
    joint_alpha: float = 0.5

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("beta", f"must be > 0, got {self.beta}")
        if not 0.0 <= self.joint_alpha <= 1.0:
            raise ConfigError("joint_alpha", f"must be in [0, 1], got {self.joint_alpha}")


def neg_log_sigmoid(x: float) -> float:
    """-log(sigmoid(x)), stable for large |x|."""
    return max(-x, 0.0) + math.log1p(math.exp(-abs(x)))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def loss_from_margin(margin: float, beta: float) -> float:
    return neg_log_sigmoid(beta * margin)


def reference_logprobs(state: ModelState, pair: PreferencePair) -> tuple[float, float]:
    return (
        forward(state, pair.context, pair.chosen, use_reference=True).logprob,
        forward(state, pair.context, pair.rejected, use_reference=True).logprob,
    )


def implicit_margin(state: ModelState, pair: PreferencePair, ref: tuple[float, float] | None = None) -> float:
    """Chosen-minus-rejected difference of policy/reference log-likelihood ratios."""
    ref_w, ref_l = ref if ref is not None else reference_logprobs(state, pair)
    lp_w = forward(state, pair.context, pair.chosen).logprob
    lp_l = forward(state, pair.context, pair.rejected).logprob
    return (lp_w - ref_w) - (lp_l - ref_l)


def dpo_loss(state: ModelState, pair: PreferencePair, cfg: DpoConfig = DpoConfig()) -> float:
    return loss_from_margin(implicit_margin(state, pair), cfg.beta)


@dataclass(frozen=True)
class DpoEval:
    loss: float
    margin: float
    grad: GradientVector


def dpo_loss_and_grad(
    state: ModelState,
    pair: PreferencePair,
    cfg: DpoConfig = DpoConfig(),
    ref: tuple[float, float] | None = None,
) -> DpoEval:
    """Loss, margin and exact gradient over the state's trainable parameters.

    ``ref`` lets callers pass cached reference log-probabilities.
    """
    ref_w, ref_l = ref if ref is not None else reference_logprobs(state, pair)
    rec_w = forward(state, pair.context, pair.chosen, record=True)
    rec_l = forward(state, pair.context, pair.rejected, record=True)
    margin = (rec_w.logprob - ref_w) - (rec_l.logprob - ref_l)
    x = cfg.beta * margin
    # d/dmargin of -log sigmoid(beta * margin)
    dl = -cfg.beta * sigmoid(-x)
    grad = backward(state, [(rec_w, dl), (rec_l, -dl)])
    return DpoEval(neg_log_sigmoid(x), margin, grad)


def joint_loss(
    state: ModelState,
    pair_u: PreferencePair,
    pair_g: PreferencePair,
    cfg: DpoConfig = DpoConfig(),
) -> float:
    if pair_u.task != UNDERSTANDING or pair_g.task != GENERATION:
        raise DomainError("joint_loss expects (understanding pair, generation pair)")
    a = cfg.joint_alpha
    return a * dpo_loss(state, pair_u, cfg) + (1.0 - a) * dpo_loss(state, pair_g, cfg)


@dataclass(frozen=True)
class KlEstimate:
    per_sequence: float
    per_token: float
    stderr: float
    n: int
    mean_length: float


def _sample_chain(logp_table: np.ndarray, length: int, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(np.exp(logp_table), axis=1)
    cdf[:, -1] = np.inf
    v = logp_table.shape[1]
    out = np.empty(length, dtype=np.int64)
    prev = v  # sentinel row
    for t in range(length):
        prev = int(np.searchsorted(cdf[prev], u[t], side="right"))
        out[t] = prev
    return out


def sampled_log_ratios(
    state: ModelState,
    dataset: Sequence[PreferencePair],
    task: str,
    samples_per_context: int = 1,
    seed: int = 0,
    temperature: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample log(pi_theta / pi_ref) of ancestral samples from the live policy.

    Each sample has the length of its pair's chosen response.  Returns the
    ratios and the sample lengths.
    """
    if task not in TASKS:
        raise DomainError(f"unknown task {task!r}")
    pairs = [p for p in dataset if p.task == task]
    if not pairs:
        raise DomainError(f"no {task} pairs to estimate KL on")
    modality = TASK_MODALITY[task]
    rng = np.random.default_rng(seed)
    ratios, lengths = [], []
    for pair in pairs:
        live = next_token_table(state, pair.context, modality)
        ref = next_token_table(state, pair.context, modality, use_reference=True)
        sampler = live if temperature == 1.0 else _tempered(live, temperature)
        diff = live - ref
        n = len(pair.chosen)
        for _ in range(samples_per_context):
            y = _sample_chain(sampler, n, rng.random(n))
            prev = np.concatenate([[live.shape[1]], y[:-1]])
            ratios.append(float(diff[prev, y].sum()))
            lengths.append(n)
    return np.asarray(ratios), np.asarray(lengths, dtype=np.float64)


def _tempered(logp: np.ndarray, temperature: float) -> np.ndarray:
    z = logp / temperature
    z -= z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def kl_to_reference(
    state: ModelState,
    dataset: Sequence[PreferencePair],
    task: str,
    samples_per_context: int = 1,
    seed: int = 0,
    temperature: float = 1.0,
) -> KlEstimate:
    """Monte-Carlo KL(pi_theta || pi_ref) in nats per sequence and per token.

    The raw estimate is reported even when sampling noise makes it negative.
    """
    ratios, lengths = sampled_log_ratios(state, dataset, task, samples_per_context, seed, temperature)
    mean = float(ratios.mean())
    se = float(ratios.std(ddof=1) / math.sqrt(ratios.size)) if ratios.size > 1 else 0.0
    mean_len = float(lengths.mean())
    return KlEstimate(mean, mean / mean_len, se, int(ratios.size), mean_len)
