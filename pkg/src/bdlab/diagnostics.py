"""Gradient-interference measurements between the two tasks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dpo import DpoConfig, PreferencePair, dpo_loss_and_grad
from .errors import DegenerateInputError, DomainError
from .model import ModelState
from .stats import TTest, cohens_d, one_sample_t, summarize, welch_t
from .vectors import GradientVector, is_shared_segment

EPS = 1e-12


def cosine(a: GradientVector, b: GradientVector, eps: float = EPS) -> tuple[float, bool]:
    """Cosine similarity and a zero-norm flag (cosine reported as 0 when flagged)."""
    a.check_compatible(b)
    if a.norm < eps or b.norm < eps:
        return 0.0, True
    c = float(a.values @ b.values) / (a.norm * b.norm)
    return max(-1.0, min(1.0, c)), False


def cosine_value(a: GradientVector, b: GradientVector, eps: float = EPS) -> float:
    return cosine(a, b, eps)[0]


@dataclass(frozen=True)
class NormCheck:
    exact_relative_increase: float
    quadratic_approx: float
    angle_deviation_rad: float

    @property
    def angle_deviation_deg(self) -> float:
        return math.degrees(self.angle_deviation_rad)


def combined_norm_check(rho: float, cos: float) -> NormCheck:
    """How much a gradient ``rho`` times smaller changes the larger one when added.

    Norms are relative to the larger gradient; ``quadratic_approx`` is the
    orthogonal small-ratio approximation ``rho**2 / 2``.
    """
    if not rho > 0:
        raise DomainError(f"rho must be > 0, got {rho}")
    cos = max(-1.0, min(1.0, cos))
    x = 2.0 * rho * cos + rho * rho
    # sqrt(1 + x) - 1 without cancellation for small x
    exact = x / (math.sqrt(1.0 + x) + 1.0)
    theta = math.acos(cos)
    angle = math.atan2(rho * math.sin(theta), 1.0 + rho * cos)
    return NormCheck(exact, rho * rho / 2.0, angle)


@dataclass
class DiagnosticsRecord:
    batch: int
    cos: float
    norm_u: float
    norm_g: float
    rho: float
    layer_cos: dict[str, float] = field(default_factory=dict)
    layer_zero: dict[str, bool] = field(default_factory=dict)

    @property
    def zero_norm(self) -> bool:
        return self.norm_u < EPS or self.norm_g < EPS


def make_record(batch: int, g_u: GradientVector, g_g: GradientVector) -> DiagnosticsRecord:
    c, _ = cosine(g_u, g_g)
    layer_cos, layer_zero = {}, {}
    for name in g_u.segments:
        lu = GradientVector.from_parts([(name, g_u.segment(name))])
        lg = GradientVector.from_parts([(name, g_g.segment(name))])
        layer_cos[name], layer_zero[name] = cosine(lu, lg)
    rho = g_u.norm / g_g.norm if g_g.norm > EPS else math.nan
    return DiagnosticsRecord(batch, c, g_u.norm, g_g.norm, rho, layer_cos, layer_zero)


@dataclass
class DiagnosticsRun:
    records: list[DiagnosticsRecord]
    intra_u: list[float]
    intra_g: list[float]


def _view(g: GradientVector, include_heads: bool) -> GradientVector:
    return g if include_heads else g.restrict(is_shared_segment)


def collect_batch_diagnostics(
    state: ModelState,
    dataset_u: Sequence[PreferencePair],
    dataset_g: Sequence[PreferencePair],
    n_batches: int,
    seed: int = 0,
    dpo_cfg: DpoConfig = DpoConfig(),
    include_heads: bool = False,
) -> DiagnosticsRun:
    """Per-batch (single pair per task) interference records plus consecutive-batch intra-task cosines.

    Pairs are drawn without replacement per task when the dataset is large
    enough, otherwise cyclically over a seeded permutation.
    """
    if n_batches < 0:
        raise DomainError("n_batches must be >= 0")
    if n_batches == 0:
        return DiagnosticsRun([], [], [])
    if not dataset_u or not dataset_g:
        raise DomainError("both datasets must be nonempty")
    rng = np.random.default_rng(seed)
    order_u = rng.permutation(len(dataset_u))
    order_g = rng.permutation(len(dataset_g))
    records, intra_u, intra_g = [], [], []
    prev_u = prev_g = None
    for b in range(n_batches):
        pu = dataset_u[int(order_u[b % len(order_u)])]
        pg = dataset_g[int(order_g[b % len(order_g)])]
        g_u = _view(dpo_loss_and_grad(state, pu, dpo_cfg).grad, include_heads)
        g_g = _view(dpo_loss_and_grad(state, pg, dpo_cfg).grad, include_heads)
        records.append(make_record(b, g_u, g_g))
        if prev_u is not None:
            intra_u.append(cosine_value(prev_u, g_u))
            intra_g.append(cosine_value(prev_g, g_g))
        prev_u, prev_g = g_u, g_g
    return DiagnosticsRun(records, intra_u, intra_g)


def synthetic_vectors(
    n_batches: int,
    dim: int = 4096,
    rho: float = 0.1,
    cos: float = 0.0,
    seed: int = 0,
    n_layers: int = 4,
) -> list[tuple[GradientVector, GradientVector]]:
    """Constructed gradient pairs with an exact cosine and norm ratio ``|g_u| / |g_g| = rho``.

    The generation vector is standard normal; the understanding vector mixes
    its direction with a Gram-Schmidt-orthogonalized random direction.
    """
    if not -1.0 <= cos <= 1.0:
        raise DomainError(f"cos must be in [-1, 1], got {cos}")
    if not rho > 0:
        raise DomainError(f"rho must be > 0, got {rho}")
    if dim % n_layers:
        raise DomainError("dim must be divisible by n_layers")
    rng = np.random.default_rng(seed)
    seg = dim // n_layers
    segments = {f"synthetic.{i}": (i * seg, (i + 1) * seg) for i in range(n_layers)}
    out = []
    for _ in range(n_batches):
        gg = rng.standard_normal(dim)
        unit_g = gg / np.linalg.norm(gg)
        r = rng.standard_normal(dim)
        r -= (r @ unit_g) * unit_g
        r -= (r @ unit_g) * unit_g
        unit_r = r / np.linalg.norm(r)
        gu = rho * np.linalg.norm(gg) * (cos * unit_g + math.sqrt(1.0 - cos * cos) * unit_r)
        out.append((GradientVector(gu, segments), GradientVector(gg, segments)))
    return out


def synthetic_diagnostics(
    n_batches: int, dim: int = 4096, rho: float = 0.1, cos: float = 0.0, seed: int = 0
) -> DiagnosticsRun:
    pairs = synthetic_vectors(n_batches, dim, rho, cos, seed)
    records = [make_record(b, gu, gg) for b, (gu, gg) in enumerate(pairs)]
    intra_u = [cosine_value(pairs[i][0], pairs[i + 1][0]) for i in range(len(pairs) - 1)]
    intra_g = [cosine_value(pairs[i][1], pairs[i + 1][1]) for i in range(len(pairs) - 1)]
    return DiagnosticsRun(records, intra_u, intra_g)


# ---------------------------------------------------------------------------
# null calibration
# ---------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    inter: dict
    intra_u: dict
    intra_g: dict
    inter_vs_zero: TTest
    intra_u_vs_inter: TTest
    intra_g_vs_inter: TTest
    d_intra_u: float
    d_intra_g: float

    def as_dict(self) -> dict:
        def tt(x: TTest) -> dict:
            return {"t": x.t, "df": x.df, "p": x.p}

        return {
            "inter_task": self.inter,
            "intra_understanding": self.intra_u,
            "intra_generation": self.intra_g,
            "tests": {
                "inter_vs_zero": tt(self.inter_vs_zero),
                "intra_understanding_vs_inter": dict(tt(self.intra_u_vs_inter), cohens_d=self.d_intra_u),
                "intra_generation_vs_inter": dict(tt(self.intra_g_vs_inter), cohens_d=self.d_intra_g),
            },
        }


def _group(values: Sequence[float]) -> dict:
    s = summarize(values)
    return {"mean": s.mean, "std": s.std, "n": s.n}


def _one_sample(values: Sequence[float]) -> TTest:
    try:
        return one_sample_t(values, 0.0)
    except DegenerateInputError:
        mean = float(np.mean(values))
        if mean == 0.0:
            return TTest(0.0, float(len(values) - 1), 1.0)
        return TTest(math.copysign(math.inf, mean), float(len(values) - 1), 0.0)


def _welch(a: Sequence[float], b: Sequence[float]) -> TTest:
    try:
        return welch_t(a, b)
    except DegenerateInputError:
        diff = float(np.mean(a) - np.mean(b))
        df = float(len(a) + len(b) - 2)
        if diff == 0.0:
            return TTest(0.0, df, 1.0)
        return TTest(math.copysign(math.inf, diff), df, 0.0)


def null_calibration(
    records: Sequence[DiagnosticsRecord],
    intra_u: Sequence[float],
    intra_g: Sequence[float],
) -> CalibrationReport:
    """Compare inter-task cosines against zero and against consecutive-batch intra-task cosines."""
    inter = [r.cos for r in records if not r.zero_norm]
    for name, group in (("inter-task", inter), ("intra-understanding", intra_u), ("intra-generation", intra_g)):
        if len(group) < 2:
            raise DomainError(f"{name} group needs at least 2 samples, got {len(group)}")

    def d(a, b):
        try:
            return cohens_d(a, b)
        except DegenerateInputError:
            return math.copysign(math.inf, float(np.mean(a) - np.mean(b)))

    return CalibrationReport(
        inter=_group(inter),
        intra_u=_group(intra_u),
        intra_g=_group(intra_g),
        inter_vs_zero=_one_sample(inter),
        intra_u_vs_inter=_welch(intra_u, inter),
        intra_g_vs_inter=_welch(intra_g, inter),
        d_intra_u=d(intra_u, inter),
        d_intra_g=d(intra_g, inter),
    )


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_records_csv(path: str | Path, records: Sequence[DiagnosticsRecord]) -> None:
    layers = list(records[0].layer_cos) if records else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["index", "cos", "norm_u", "norm_g", "rho", "norm_increase_exact", "norm_increase_quadratic", "angle_deg"]
            + [f"cos[{n}]" for n in layers]
            + [f"zero[{n}]" for n in layers]
        )
        for r in records:
            if r.zero_norm:
                check = ["nan", "nan", "nan"]
            else:
                nc = combined_norm_check(r.rho, r.cos)
                check = [repr(nc.exact_relative_increase), repr(nc.quadratic_approx), repr(nc.angle_deviation_deg)]
            w.writerow(
                [r.batch, repr(r.cos), repr(r.norm_u), repr(r.norm_g), repr(r.rho)]
                + check
                + [repr(r.layer_cos[n]) for n in layers]
                + [int(r.layer_zero[n]) for n in layers]
            )


def summarize_records(records: Sequence[DiagnosticsRecord]) -> dict:
    valid = [r for r in records if not r.zero_norm]
    out: dict = {"n_batches": len(records), "n_valid": len(valid)}
    if not valid:
        return out
    rho = np.array([r.rho for r in valid])
    cos = np.array([r.cos for r in valid])
    out.update(
        cos_mean=float(cos.mean()),
        cos_std=float(cos.std(ddof=1)) if cos.size > 1 else 0.0,
        frac_negative=float(np.mean(cos < 0)),
        rho_mean=float(rho.mean()),
        rho_std=float(rho.std(ddof=1)) if rho.size > 1 else 0.0,
        inv_rho_of_mean=float(np.mean([r.norm_g for r in valid]) / np.mean([r.norm_u for r in valid])),
        norm_u_mean=float(np.mean([r.norm_u for r in valid])),
        norm_g_mean=float(np.mean([r.norm_g for r in valid])),
    )
    layers = list(valid[0].layer_cos)
    per_layer = {}
    for name in layers:
        vals = [r.layer_cos[name] for r in valid if not r.layer_zero[name]]
        per_layer[name] = {
            "mean": float(np.mean(vals)) if vals else 0.0,
            "n": len(vals),
            "zero_norm_batches": sum(r.layer_zero[name] for r in valid),
        }
    out["per_layer"] = per_layer
    check = combined_norm_check(out["rho_mean"], 0.0)
    out["combined_norm_at_mean_rho"] = {
        "exact_relative_increase": check.exact_relative_increase,
        "quadratic_approx": check.quadratic_approx,
        "angle_deviation_deg": check.angle_deviation_deg,
    }
    return out


def write_summary_json(path: str | Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
