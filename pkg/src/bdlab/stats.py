"""Welch and one-sample t-tests, Cohen's d, normal-approximation intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import betainc

from .errors import DegenerateInputError, DomainError

Z95 = 1.96


@dataclass(frozen=True)
class SampleSummary:
    n: int
    mean: float
    std: float
    se: float
    ci95_low: float
    ci95_high: float

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "mean": self.mean,
            "std": self.std,
            "se": self.se,
            "ci95": [self.ci95_low, self.ci95_high],
        }


@dataclass(frozen=True)
class TTest:
    t: float
    df: float
    p: float


def summarize(samples: Sequence[float]) -> SampleSummary:
    a = np.asarray(samples, dtype=np.float64)
    if a.size < 1:
        raise DomainError("cannot summarize an empty sample")
    mean = float(a.mean())
    std = float(a.std(ddof=1)) if a.size > 1 else 0.0
    se = std / math.sqrt(a.size)
    return SampleSummary(int(a.size), mean, std, se, mean - Z95 * se, mean + Z95 * se)


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise DomainError(f"degrees of freedom must be positive, got {df}")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return float(min(1.0, max(0.0, betainc(df / 2.0, 0.5, x))))


def _sample(a, name: str, min_n: int = 2) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64).ravel()
    if arr.size < min_n:
        raise DomainError(f"{name} needs at least {min_n} samples, got {arr.size}")
    return arr


def welch_t(a: Sequence[float], b: Sequence[float]) -> TTest:
    x, y = _sample(a, "a"), _sample(b, "b")
    vx, vy = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    if vx + vy == 0:
        raise DegenerateInputError("both groups have zero variance")
    t = (x.mean() - y.mean()) / math.sqrt(vx + vy)
    df = (vx + vy) ** 2 / (vx**2 / (x.size - 1) + vy**2 / (y.size - 1))
    return TTest(float(t), float(df), t_sf_two_sided(t, df))


def one_sample_t(a: Sequence[float], mu0: float = 0.0) -> TTest:
    x = _sample(a, "a")
    s = x.std(ddof=1)
    if s == 0:
        raise DegenerateInputError("sample has zero variance")
    t = (x.mean() - mu0) / (s / math.sqrt(x.size))
    df = x.size - 1
    return TTest(float(t), float(df), t_sf_two_sided(t, df))


def pooled_std(a: Sequence[float], b: Sequence[float]) -> float:
    x, y = _sample(a, "a"), _sample(b, "b")
    num = (x.size - 1) * x.var(ddof=1) + (y.size - 1) * y.var(ddof=1)
    return math.sqrt(num / (x.size + y.size - 2))


def cohens_d(a: Sequence[float], b: Sequence[float]) -> float:
    """Mean difference over the classical pooled standard deviation; 0 when both are constant and equal."""
    x, y = _sample(a, "a"), _sample(b, "b")
    diff = float(x.mean() - y.mean())
    sp = pooled_std(x, y)
    if sp == 0:
        if diff == 0:
            return 0.0
        raise DegenerateInputError("pooled standard deviation is zero")
    return diff / sp


def bonferroni_threshold(alpha: float, comparisons: int) -> float:
    return alpha / max(1, comparisons)
