"""Ways of combining the understanding and generation gradients into one update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DegenerateInputError, DomainError
from .vectors import GradientVector, is_shared_segment

UNDERSTANDING_ONLY = "understanding_only"
GENERATION_ONLY = "generation_only"
NAIVE_JOINT = "naive_joint"
GRAD_WEIGHTED = "grad_weighted"
PCGRAD = "pcgrad"
LENGTH_NORMALIZED = "length_normalized"
FIXED_WEIGHT = "fixed_weight"

STRATEGIES = (
    UNDERSTANDING_ONLY,
    GENERATION_ONLY,
    NAIVE_JOINT,
    GRAD_WEIGHTED,
    PCGRAD,
    LENGTH_NORMALIZED,
    FIXED_WEIGHT,
)
SINGLE_TASK = (UNDERSTANDING_ONLY, GENERATION_ONLY)

NORM_WINDOW = "window"
NORM_CURRENT = "current"

_EPS = 1e-12


@dataclass
class WeightState:
    """Task weights plus the norm bookkeeping of the dynamic strategy.

    ``window_*`` accumulate shared-parameter norms since the last recompute.
    """

    w_u: float = 0.5
    w_g: float = 0.5
    last_recompute_step: int = 0
    norm_u: float = math.nan
    norm_g: float = math.nan
    window_sum_u: float = 0.0
    window_sum_g: float = 0.0
    window_count: int = 0


@dataclass(frozen=True)
class BalancingConfig:
    strategy: str = NAIVE_JOINT
    joint_alpha: float = 0.5
    fixed_w_u: float = 0.93
    fixed_w_g: float = 0.07
    recompute_interval: int = 50
    norm_source: str = NORM_WINDOW
    # sequence lengths used by length_normalized: N code tokens, mean text length T
    gen_tokens: float = 576.0
    text_tokens: float = 65.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"must be one of {', '.join(STRATEGIES)}; got {self.strategy!r}")
        if not 0.0 <= self.joint_alpha <= 1.0:
            raise ConfigError("joint_alpha", f"must be in [0, 1], got {self.joint_alpha}")
        if self.fixed_w_u < 0 or self.fixed_w_g < 0 or abs(self.fixed_w_u + self.fixed_w_g - 1.0) > 1e-12:
            raise ConfigError("fixed_w_u", "fixed weights must be nonnegative and sum to 1")
        if self.recompute_interval < 1:
            raise ConfigError("recompute_interval", f"must be >= 1, got {self.recompute_interval}")
        if self.norm_source not in (NORM_WINDOW, NORM_CURRENT):
            raise ConfigError("norm_source", f"must be 'window' or 'current', got {self.norm_source!r}")
        if self.gen_tokens < 1 or self.text_tokens < 1:
            raise ConfigError("gen_tokens", "token counts must be >= 1")

    @property
    def needs_understanding(self) -> bool:
        return self.strategy != GENERATION_ONLY

    @property
    def needs_generation(self) -> bool:
        return self.strategy != UNDERSTANDING_ONLY

    def initial_weights(self) -> WeightState:
        if self.strategy == UNDERSTANDING_ONLY:
            return WeightState(1.0, 0.0)
        if self.strategy == GENERATION_ONLY:
            return WeightState(0.0, 1.0)
        if self.strategy == FIXED_WEIGHT:
            return WeightState(self.fixed_w_u, self.fixed_w_g)
        if self.strategy == LENGTH_NORMALIZED:
            return WeightState(*length_normalized_weights(self.gen_tokens, self.text_tokens))
        if self.strategy == GRAD_WEIGHTED:
            return WeightState(0.5, 0.5)
        return WeightState(self.joint_alpha, 1.0 - self.joint_alpha)


def dynamic_weights(norm_u: float, norm_g: float) -> tuple[float, float]:
    """Weights that equalize ``w_u * norm_u`` and ``w_g * norm_g``."""
    if not (norm_u > 0 and norm_g > 0):
        raise DegenerateInputError(f"gradient norms must be positive, got ({norm_u}, {norm_g})")
    total = norm_u + norm_g
    return norm_g / total, norm_u / total


def length_normalized_weights(n: float, t: float) -> tuple[float, float]:
    if n < 1 or t < 1:
        raise DomainError(f"token counts must be >= 1, got N={n}, T={t}")
    return n / (n + t), t / (n + t)


def _project_out(g: np.ndarray, onto: np.ndarray) -> np.ndarray:
    return g - (g @ onto) / (onto @ onto) * onto


def pcgrad_combine(g_u: GradientVector, g_g: GradientVector) -> GradientVector:
    """Sum of the two gradients, each projected off the other when they conflict."""
    g_u.check_compatible(g_g)
    a, b = g_u.values, g_g.values
    if g_u.norm < _EPS or g_g.norm < _EPS or a @ b >= 0:
        return g_u + g_g
    return g_u.with_values(_project_out(a, b) + _project_out(b, a))


def _pcgrad_shared(g_u: GradientVector, g_g: GradientVector) -> GradientVector:
    """PCGrad over the adapter view only; other segments are summed unchanged."""
    su = g_u.restrict(is_shared_segment)
    sg = g_g.restrict(is_shared_segment)
    merged = pcgrad_combine(su, sg)
    total = (g_u + g_g).values.copy()
    for name in merged.segments:
        lo, hi = g_u.segments[name]
        total[lo:hi] = merged.segment(name)
    return g_u.with_values(total)


def _shared_norm(g: GradientVector | None) -> float:
    if g is None:
        return 0.0
    return g.restrict(is_shared_segment).norm


def combine(
    cfg: BalancingConfig,
    step: int,
    g_u: GradientVector | None,
    g_g: GradientVector | None,
    loss_u: float | None,
    loss_g: float | None,
    weights: WeightState | None = None,
) -> tuple[GradientVector, float, WeightState]:
    """Apply the configured strategy; returns (gradient, loss, new weight state).

    The input ``weights`` is not modified.
    """
    ws = replace(weights) if weights is not None else cfg.initial_weights()
    s = cfg.strategy
    if cfg.needs_understanding and (g_u is None or loss_u is None):
        raise DomainError(f"{s} needs the understanding gradient and loss")
    if cfg.needs_generation and (g_g is None or loss_g is None):
        raise DomainError(f"{s} needs the generation gradient and loss")

    if s == UNDERSTANDING_ONLY:
        return g_u, loss_u, ws
    if s == GENERATION_ONLY:
        return g_g, loss_g, ws

    if s == GRAD_WEIGHTED:
        nu, ng = _shared_norm(g_u), _shared_norm(g_g)
        ws.window_sum_u += nu
        ws.window_sum_g += ng
        ws.window_count += 1
        if step - ws.last_recompute_step >= cfg.recompute_interval:
            if cfg.norm_source == NORM_WINDOW:
                nu, ng = ws.window_sum_u / ws.window_count, ws.window_sum_g / ws.window_count
            if nu > _EPS and ng > _EPS:
                ws.w_u, ws.w_g = dynamic_weights(nu, ng)
                ws.norm_u, ws.norm_g = nu, ng
            # degenerate norms keep the previous weights
            ws.last_recompute_step = step
            ws.window_sum_u = ws.window_sum_g = 0.0
            ws.window_count = 0

    if s == PCGRAD:
        grad = _pcgrad_shared(g_u * ws.w_u, g_g * ws.w_g)
    else:
        grad = g_u * ws.w_u + g_g * ws.w_g
    return grad, ws.w_u * loss_u + ws.w_g * loss_g, ws
