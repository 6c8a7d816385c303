"""Method-vs-base comparison tables over pooled multi-seed samples."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateInputError
from .stats import TTest, bonferroni_threshold, cohens_d, summarize, welch_t

SampleSet = Mapping[str, Sequence[float]]


@dataclass
class ReportDocument:
    data: dict
    text: str

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"


def _clean(x: float):
    """JSON-safe float: infinities become strings, NaN becomes null."""
    if isinstance(x, float):
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
    return x


def _compare(method: np.ndarray, base: np.ndarray) -> tuple[TTest, float]:
    try:
        tt = welch_t(method, base)
    except DegenerateInputError:
        diff = float(method.mean() - base.mean())
        df = float(method.size + base.size - 2)
        tt = TTest(0.0, df, 1.0) if diff == 0 else TTest(math.copysign(math.inf, diff), df, 0.0)
    try:
        d = cohens_d(method, base)
    except DegenerateInputError:
        d = math.copysign(math.inf, float(method.mean() - base.mean()))
    return tt, d


def pool_seeds(per_seed: Sequence[SampleSet]) -> dict[str, np.ndarray]:
    """Concatenate per-seed samples metric by metric."""
    metrics: dict[str, list[float]] = {}
    for run in per_seed:
        for name, values in run.items():
            metrics.setdefault(name, []).extend(values)
    return {k: np.asarray(v, dtype=np.float64) for k, v in metrics.items()}


def build_report(
    runs: Mapping[str, Sequence[SampleSet]],
    base: SampleSet,
    config_echo: dict | None = None,
    non_deployable: Sequence[str] = (),
    alpha: float = 0.05,
) -> ReportDocument:
    """Per method and metric: pooled mean/std/n/CI, delta vs base, Welch t and p, Cohen's d.

    ``runs`` maps a method name to its per-seed sample sets.  Methods listed
    in ``non_deployable`` are tagged as such.
    """
    base_arr = {k: np.asarray(v, dtype=np.float64) for k, v in base.items()}
    metric_names = sorted(base_arr)
    n_comparisons = len(runs) * len(metric_names)
    baseline = {}
    for m in metric_names:
        s = summarize(base_arr[m])
        baseline[m] = {"mean": s.mean, "std": s.std, "n": s.n, "ci95": [s.ci95_low, s.ci95_high]}
    methods = []
    for name in sorted(runs):
        pooled = pool_seeds(runs[name])
        entry: dict = {"name": name, "seeds": len(runs[name]), "non_deployable": name in non_deployable, "metrics": {}}
        for m in metric_names:
            if m not in pooled or pooled[m].size == 0:
                continue
            arr = pooled[m]
            s = summarize(arr)
            seed_means = [float(np.mean(r[m])) for r in runs[name] if m in r and len(r[m])]
            tt, d = _compare(arr, base_arr[m])
            entry["metrics"][m] = {
                "mean": s.mean,
                "std": s.std,
                "seed_std": float(np.std(seed_means, ddof=1)) if len(seed_means) > 1 else 0.0,
                "n": s.n,
                "ci95": [s.ci95_low, s.ci95_high],
                "delta": s.mean - baseline[m]["mean"],
                "t": _clean(tt.t),
                "df": tt.df,
                "p": tt.p,
                "d": _clean(d),
            }
        methods.append(entry)
    data = {
        "baseline": baseline,
        "methods": methods,
        "alpha": alpha,
        "bonferroni_threshold": bonferroni_threshold(alpha, n_comparisons),
        "n_comparisons": n_comparisons,
        "config_echo": config_echo or {},
    }
    return ReportDocument(data, render_table(data))


def render_table(data: dict) -> str:
    metrics = sorted(data["baseline"])
    head = f"{'method':<34}" + "".join(f"{m:>26}" for m in metrics)
    lines = [head, "-" * len(head)]
    base_cells = "".join(
        f"{data['baseline'][m]['mean']:+.4f} ±{data['baseline'][m]['std']:.4f}".rjust(26) for m in metrics
    )
    lines.append(f"{'base (unaligned)':<34}" + base_cells)
    thr = data["bonferroni_threshold"]
    for entry in data["methods"]:
        label = entry["name"] + (" [non-deployable]" if entry["non_deployable"] else "")
        cells = []
        for m in metrics:
            c = entry["metrics"].get(m)
            if c is None:
                cells.append(f"{'-':>26}")
                continue
            mark = "**" if c["p"] < thr else ("*" if c["p"] < data["alpha"] else "")
            cells.append(f"{c['mean']:>+9.4f} ({c['delta']:+.4f}){mark:<2}".rjust(26))
        lines.append(f"{label:<34}" + "".join(cells))
    lines.append("")
    lines.append(
        f"Mean (delta vs base). * p < {data['alpha']:g} (Welch, uncorrected); "
        f"** also below the Bonferroni threshold {thr:.2e} over {data['n_comparisons']} comparisons."
    )
    return "\n".join(lines) + "\n"
