"""Training loop: AdamW with cosine schedule and clipping, plus post-hoc adapter methods."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .balancing import BalancingConfig, WeightState, combine
from .diagnostics import cosine
from .dpo import (
    GENERATION,
    UNDERSTANDING,
    DpoConfig,
    PreferencePair,
    dpo_loss_and_grad,
    implicit_margin,
    loss_from_margin,
    reference_logprobs,
)
from .errors import ConfigError, DomainError, NonFiniteError
from .model import ModelState
from .vectors import GradientVector, is_shared_segment

log = logging.getLogger(__name__)

# step size typical of full-size models; recorded next to the toy default, never used
LARGE_MODEL_LR = 1e-6

TRAJECTORY_COLUMNS = ("step", "loss_u", "loss_g", "loss_combined", "cos_ug", "norm_u", "norm_g", "w_u", "w_g", "lr")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 1
    lr: float = 1.3e-4
    lr_min: float = 0.0
    large_model_lr: float = LARGE_MODEL_LR
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    beta: float = 0.1
    balancing: BalancingConfig = field(default_factory=BalancingConfig)
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # non-adapter parameters (the generation head) learn this much slower
    head_lr_scale: float = 0.02
    monitor_inactive: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps", f"must be >= 1, got {self.steps}")
        if self.batch_size != 1:
            raise ConfigError("batch_size", "only batch size 1 is supported")
        if not self.lr > 0:
            raise ConfigError("lr", f"must be > 0, got {self.lr}")
        if not 0 <= self.lr_min <= self.lr:
            raise ConfigError("lr_min", f"must be in [0, lr], got {self.lr_min}")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm", f"must be > 0, got {self.clip_norm}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", f"must be >= 0, got {self.weight_decay}")
        if not self.beta > 0:
            raise ConfigError("beta", f"must be > 0, got {self.beta}")
        if not self.head_lr_scale > 0:
            raise ConfigError("head_lr_scale", f"must be > 0, got {self.head_lr_scale}")

    @property
    def dpo(self) -> DpoConfig:
        return DpoConfig(self.beta, self.balancing.joint_alpha)


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total <= 0:
        return lr_max
    if not 0 <= step <= total:
        raise DomainError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


def clip_gradient(g: GradientVector, max_norm: float) -> GradientVector:
    if g.norm > max_norm:
        return g * (max_norm / g.norm)
    return g


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over one flat parameter vector."""

    size: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    t: int = field(default=0, init=False)

    def __post_init__(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient at optimizer step {self.t + 1}")
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - lr * self.weight_decay * params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adamw_step(state: ModelState, g: GradientVector, lr: float | np.ndarray, opt: AdamW) -> ModelState:
    """One in-place AdamW update of the state's trainable parameters.

    ``lr`` may be a per-coordinate array aligned with the flat trainable vector.
    """
    if g.segments != state.segments():
        raise DomainError("gradient segmentation does not match the state's trainable set")
    state.set_flat_trainable(opt.step(state.flat_trainable(), g.values, lr))
    return state


class PairCursor:
    """Shuffled cyclic iteration, reshuffled every epoch."""

    def __init__(self, pairs: Sequence[PreferencePair], rng: np.random.Generator):
        if not pairs:
            raise DomainError("cannot iterate an empty dataset")
        self.pairs = list(pairs)
        self.rng = rng
        self.order = rng.permutation(len(self.pairs))
        self.pos = 0
        self.epoch = 0

    def next(self) -> tuple[int, PreferencePair]:
        if self.pos == len(self.order):
            self.order = self.rng.permutation(len(self.pairs))
            self.pos = 0
            self.epoch += 1
        i = int(self.order[self.pos])
        self.pos += 1
        return i, self.pairs[i]


@dataclass
class TrajectoryPoint:
    step: int
    loss_u: float
    loss_g: float
    loss_combined: float
    cos_ug: float
    norm_u: float
    norm_g: float
    w_u: float
    w_g: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, c))) for c in TRAJECTORY_COLUMNS[1:]]


@dataclass
class TrainResult:
    state: ModelState
    trajectory: list[TrajectoryPoint]
    weights: WeightState
    completed: bool = True


class _RefCache:
    def __init__(self, state: ModelState):
        self.state = state
        self.cache: dict[tuple[str, int], tuple[float, float]] = {}

    def get(self, task: str, idx: int, pair: PreferencePair) -> tuple[float, float]:
        key = (task, idx)
        if key not in self.cache:
            self.cache[key] = reference_logprobs(self.state, pair)
        return self.cache[key]


def train(
    state: ModelState,
    datasets: Mapping[str, Sequence[PreferencePair]],
    cfg: TrainConfig,
) -> TrainResult:
    """Train ``state`` in place and return it with the per-step trajectory.

    Each step draws one pair per task the strategy needs (and, with
    ``monitor_inactive``, one pair of the other task for logging only).
    """
    bal = cfg.balancing
    dpo_cfg = cfg.dpo
    rng = np.random.default_rng(cfg.seed)
    # both seeds are always drawn so a task's data order does not depend on the strategy
    cursor_seeds = dict(zip((UNDERSTANDING, GENERATION), rng.integers(2**63, size=2)))
    cursors = {}
    for task in (UNDERSTANDING, GENERATION):
        pairs = datasets.get(task) or []
        needed = bal.needs_understanding if task == UNDERSTANDING else bal.needs_generation
        if needed and not pairs:
            raise DomainError(f"strategy {bal.strategy} needs {task} pairs")
        if pairs and (needed or cfg.monitor_inactive):
            cursors[task] = PairCursor(pairs, np.random.default_rng(cursor_seeds[task]))
    refs = _RefCache(state)
    opt = AdamW(state.flat_trainable().size, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    weights = bal.initial_weights()
    lr_scale = np.ones(opt.size)
    for name, (lo, hi) in state.segments().items():
        if not is_shared_segment(name):
            lr_scale[lo:hi] = cfg.head_lr_scale
    ref_digest = state.reference_digest()
    trajectory: list[TrajectoryPoint] = []
    for step in range(cfg.steps):
        evals = {}
        for task, cursor in cursors.items():
            idx, pair = cursor.next()
            evals[task] = dpo_loss_and_grad(state, pair, dpo_cfg, ref=refs.get(task, idx, pair))
        ev_u, ev_g = evals.get(UNDERSTANDING), evals.get(GENERATION)
        g_u = ev_u.grad if ev_u and bal.needs_understanding else None
        g_g = ev_g.grad if ev_g and bal.needs_generation else None
        grad, loss, weights = combine(
            bal, step, g_u, g_g,
            ev_u.loss if g_u is not None else None,
            ev_g.loss if g_g is not None else None,
            weights,
        )
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite combined loss at step {step}")
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)
        if grad.norm > 0:
            adamw_step(state, clip_gradient(grad, cfg.clip_norm), lr * lr_scale, opt)
        su = ev_u.grad.restrict(is_shared_segment) if ev_u else None
        sg = ev_g.grad.restrict(is_shared_segment) if ev_g else None
        trajectory.append(
            TrajectoryPoint(
                step=step,
                loss_u=ev_u.loss if ev_u else math.nan,
                loss_g=ev_g.loss if ev_g else math.nan,
                loss_combined=loss,
                cos_ug=cosine(su, sg)[0] if su is not None and sg is not None else math.nan,
                norm_u=su.norm if su is not None else math.nan,
                norm_g=sg.norm if sg is not None else math.nan,
                w_u=weights.w_u,
                w_g=weights.w_g,
                lr=lr,
            )
        )
    if state.reference_digest() != ref_digest:
        raise DomainError("reference snapshot changed during training")
    return TrainResult(state, trajectory, weights)


def write_trajectory(path: str | Path, trajectory: Sequence[TrajectoryPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for p in trajectory:
            w.writerow(p.row())


def read_trajectory(path: str | Path) -> list[TrajectoryPoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRAJECTORY_COLUMNS:
            raise DomainError(f"{path}: unexpected trajectory columns {reader.fieldnames}")
        return [
            TrajectoryPoint(int(r["step"]), *(float(r[c]) for c in TRAJECTORY_COLUMNS[1:]))
            for r in reader
        ]


# ---------------------------------------------------------------------------
# post-hoc methods and evaluation
# ---------------------------------------------------------------------------


def soup_interpolate(state_u: ModelState, state_g: ModelState, lam: float) -> ModelState:
    """Linear interpolation ``(1 - lam) * u + lam * g`` of the trainable parameters.

    Frozen parameters must match exactly and are taken from ``state_u``.
    """
    if state_u.config != state_g.config or state_u.trainable != state_g.trainable:
        raise DomainError("soup endpoints have different configurations or trainable sets")
    for name in state_u.params:
        if name not in state_u.trainable and not np.array_equal(state_u.params[name], state_g.params[name]):
            raise DomainError(f"soup endpoints differ in frozen parameter {name}")
    out = state_u.copy()
    if lam == 0.0:
        return out
    if lam == 1.0:
        out.set_flat_trainable(state_g.flat_trainable())
        return out
    out.set_flat_trainable((1.0 - lam) * state_u.flat_trainable() + lam * state_g.flat_trainable())
    return out


def evaluate(
    state: ModelState,
    eval_pairs: Sequence[PreferencePair],
    beta: float = 0.1,
    refs: Sequence[tuple[float, float]] | None = None,
) -> dict[str, list[float]]:
    """Per-pair held-out metrics, keyed ``<task prefix>_<metric>``.

    For each task present: implicit margin, DPO loss at ``beta`` and
    preference accuracy (margin > 0).  ``refs`` optionally supplies cached
    reference log-probabilities aligned with ``eval_pairs``.
    """
    if refs is not None and len(refs) != len(eval_pairs):
        raise DomainError("refs must align with eval_pairs")
    out: dict[str, list[float]] = {}
    for i, pair in enumerate(eval_pairs):
        prefix = "u" if pair.task == UNDERSTANDING else "g"
        m = implicit_margin(state, pair, None if refs is None else refs[i])
        out.setdefault(f"{prefix}_margin", []).append(m)
        out.setdefault(f"{prefix}_loss", []).append(loss_from_margin(m, beta))
        out.setdefault(f"{prefix}_accuracy", []).append(1.0 if m > 0 else 0.0)
    return out


@dataclass
class CompositeMetrics:
    """Metrics of the two-adapter composite; requires knowing each input's task."""

    metrics: dict[str, list[float]]
    label: str = "separate_adapters (non-deployable composite)"
    deployable: bool = False


def separate_adapter_eval(
    state_u: ModelState,
    state_g: ModelState,
    eval_pairs: Sequence[PreferencePair],
    beta: float = 0.1,
    refs: Sequence[tuple[float, float]] | None = None,
) -> CompositeMetrics:
    """Each task's metrics from its own adapter; not a single deployable model."""
    idx_u = [i for i, p in enumerate(eval_pairs) if p.task == UNDERSTANDING]
    idx_g = [i for i, p in enumerate(eval_pairs) if p.task == GENERATION]

    def pick(idx):
        return None if refs is None else [refs[i] for i in idx]

    metrics = {}
    metrics.update(evaluate(state_u, [eval_pairs[i] for i in idx_u], beta, pick(idx_u)))
    metrics.update(evaluate(state_g, [eval_pairs[i] for i in idx_g], beta, pick(idx_g)))
    return CompositeMetrics(metrics)


def config_echo(cfg: TrainConfig) -> dict:
    return asdict(cfg)
