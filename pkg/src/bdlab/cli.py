"""Command-line entry point: ``bdlab <subcommand> [flags]``.

Output goes under ``--out`` (or ``$BDLAB_OUT``, else ``./bdlab-out``).  A
sweep root looks like::

    data/pairs.jsonl, data/eval.jsonl     training and held-out pairs
    runs/<run id>/                        manifest, checkpoint, trajectory, summary, SVGs
    posthoc/<id>/summary.json             soups and the separate-adapter composite
    base/summary.json                     the untrained model on the held-out pairs
    report.json, report.txt
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .balancing import STRATEGIES
from .config import LabConfig, config_to_dict, load_config
from .data import (
    generate_pairs,
    mean_response_length,
    read_pairs,
    split_by_task,
    write_pairs,
)
from .diagnostics import (
    collect_batch_diagnostics,
    combined_norm_check,
    null_calibration,
    summarize_records,
    synthetic_diagnostics,
    write_records_csv,
    write_summary_json,
)
from .dpo import GENERATION, UNDERSTANDING, DpoConfig, PreferencePair, kl_to_reference, reference_logprobs
from .errors import BdlabError, ConfigError, DomainError
from .model import ModelState, init_model, load_checkpoint, reseed_adapters, save_checkpoint
from .plotting import write_trajectory_charts
from .report import build_report
from .trainer import (
    evaluate,
    read_trajectory,
    separate_adapter_eval,
    soup_interpolate,
    train,
    write_trajectory,
)

DEFAULT_OUT = "bdlab-out"
KL_CONTEXTS = 200


class CliError(BdlabError):
    pass


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get("BDLAB_OUT") or DEFAULT_OUT)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_list(raw: str, kind, flag: str) -> tuple:
    try:
        items = tuple(kind(x.strip()) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(flag, f"cannot parse {raw!r}") from None
    if not items:
        raise ConfigError(flag, "empty list")
    return items


def _lab(args) -> LabConfig:
    lab = load_config(args.config) if getattr(args, "config", None) else LabConfig()
    beta = getattr(args, "beta", None)
    if beta is not None:
        betas = _parse_list(beta, float, "--beta")
        lab = replace(lab, sweep=replace(lab.sweep, betas=betas), train=replace(lab.train, beta=betas[0]))
    strategy = getattr(args, "strategy", None)
    if strategy is not None:
        names = _parse_list(strategy, str, "--strategy")
        for n in names:
            if n not in STRATEGIES:
                raise ConfigError("--strategy", f"unknown strategy {n!r}; choose from {', '.join(STRATEGIES)}")
        lab = replace(
            lab,
            sweep=replace(lab.sweep, strategies=names),
            train=replace(lab.train, balancing=replace(lab.train.balancing, strategy=names[0])),
        )
    if getattr(args, "n_batches", None) is not None:
        if args.n_batches < 0:
            raise ConfigError("--n-batches", f"must be >= 0, got {args.n_batches}")
        lab = replace(lab, n_batches=args.n_batches)
    return lab


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _training_pairs(lab: LabConfig) -> list[PreferencePair]:
    return generate_pairs(lab.data_understanding, lab.model) + generate_pairs(lab.data_generation, lab.model)


def _eval_pairs(lab: LabConfig) -> list[PreferencePair]:
    cu, cg = lab.eval_configs()
    return generate_pairs(cu, lab.model) + generate_pairs(cg, lab.model)


def _write_datasets(lab: LabConfig, data_dir: Path) -> tuple[Path, Path]:
    data_dir.mkdir(parents=True, exist_ok=True)
    train_path, eval_path = data_dir / "pairs.jsonl", data_dir / "eval.jsonl"
    write_pairs(train_path, _training_pairs(lab), [lab.data_understanding, lab.data_generation], lab.model)
    write_pairs(eval_path, _eval_pairs(lab), list(lab.eval_configs()), lab.model)
    return train_path, eval_path


def _load_pairs(path: Path) -> list[PreferencePair]:
    if not path.exists():
        raise CliError(f"{path}: dataset file not found")
    return read_pairs(path)[1]


# ---------------------------------------------------------------------------
# one training run
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    root: str
    run_id: str
    method: str
    strategy: str
    beta: float
    seed: int
    lab: LabConfig


def run_id(strategy: str, beta: float, seed: int) -> str:
    return f"{strategy}-beta{beta:g}-seed{seed}"


_REF_CACHE: dict[str, list[tuple[float, float]]] = {}


def _eval_refs(key: str, base: ModelState, pairs: Sequence[PreferencePair]) -> list[tuple[float, float]]:
    if key not in _REF_CACHE:
        _REF_CACHE[key] = [reference_logprobs(base, p) for p in pairs]
    return _REF_CACHE[key]


def _kl_block(state: ModelState, pairs: Sequence[PreferencePair], task: str, seed: int) -> dict:
    subset = [p for p in pairs if p.task == task][:KL_CONTEXTS]
    if not subset:
        return {}
    k = kl_to_reference(state, subset, task, seed=seed)
    return {"per_sequence": k.per_sequence, "per_token": k.per_token, "stderr": k.stderr, "n": k.n, "mean_length": k.mean_length}


def _tail_mean(values: Sequence[float], count: int) -> float | None:
    tail = [v for v in values[-count:] if math.isfinite(v)]
    return float(np.mean(tail)) if tail else None


def execute_run(spec: RunSpec) -> str:
    """Train one (strategy, beta, seed) cell and write its artifacts; returns the run id."""
    root = Path(spec.root)
    run_dir = root / "runs" / spec.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    lab = spec.lab
    manifest = {
        "run_id": spec.run_id,
        "method": spec.method,
        "strategy": spec.strategy,
        "beta": spec.beta,
        "seed": spec.seed,
        "status": "incomplete",
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": config_to_dict(lab),
        "artifacts": {"dataset": "data/pairs.jsonl", "eval_dataset": "data/eval.jsonl"},
    }
    _write_json(run_dir / "manifest.json", manifest)

    pairs = split_by_task(_load_pairs(root / "data" / "pairs.jsonl"))
    eval_pairs = _load_pairs(root / "data" / "eval.jsonl")
    base = init_model(lab.model)
    state = reseed_adapters(base, spec.seed)
    bal = replace(
        lab.train.balancing,
        strategy=spec.strategy,
        gen_tokens=float(lab.model.gen_tokens),
        text_tokens=mean_response_length(pairs[UNDERSTANDING]) if pairs[UNDERSTANDING] else lab.train.balancing.text_tokens,
    )
    cfg = replace(lab.train, beta=spec.beta, seed=spec.seed, balancing=bal)
    result = train(state, pairs, cfg)

    save_checkpoint(state, run_dir / "checkpoint.bin")
    write_trajectory(run_dir / "trajectory.csv", result.trajectory)
    svgs = write_trajectory_charts(run_dir, result.trajectory, spec.run_id)
    refs = _eval_refs(str(root / "data" / "eval.jsonl"), base, eval_pairs)
    traj = result.trajectory
    summary = {
        "run_id": spec.run_id,
        "method": spec.method,
        "strategy": spec.strategy,
        "beta": spec.beta,
        "seed": spec.seed,
        "non_deployable": False,
        "final": {
            "loss_u_last100": _tail_mean([p.loss_u for p in traj], 100),
            "loss_g_last100": _tail_mean([p.loss_g for p in traj], 100),
            "loss_combined_last100": _tail_mean([p.loss_combined for p in traj], 100),
            "w_u": result.weights.w_u,
            "w_g": result.weights.w_g,
        },
        "kl": {
            UNDERSTANDING: _kl_block(state, eval_pairs, UNDERSTANDING, spec.seed),
            GENERATION: _kl_block(state, eval_pairs, GENERATION, spec.seed),
        },
        "eval": evaluate(state, eval_pairs, spec.beta, refs),
        "train_config": asdict(cfg),
    }
    _write_json(run_dir / "summary.json", summary)
    manifest["artifacts"].update(
        checkpoint="checkpoint.bin",
        trajectory="trajectory.csv",
        summary="summary.json",
        plots=[p.name for p in svgs],
    )
    manifest["status"] = "complete"
    _write_json(run_dir / "manifest.json", manifest)
    return spec.run_id


def _method_name(strategy: str, beta: float, default_beta: float) -> str:
    return strategy if beta == default_beta else f"{strategy} (beta={beta:g})"


def _run_all(specs: Sequence[RunSpec], jobs: int) -> None:
    if jobs <= 1 or len(specs) <= 1:
        for s in specs:
            print(f"run {s.run_id}", flush=True)
            execute_run(s)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for rid in pool.map(execute_run, specs):
            print(f"run {rid}", flush=True)


# ---------------------------------------------------------------------------
# post-hoc methods and the untrained baseline
# ---------------------------------------------------------------------------


def _posthoc_summary(root: Path, pid: str, method: str, beta: float, seed: int, metrics: dict, non_deployable: bool) -> None:
    _write_json(
        root / "posthoc" / pid / "summary.json",
        {"run_id": pid, "method": method, "beta": beta, "seed": seed, "non_deployable": non_deployable, "eval": metrics},
    )


def write_posthoc(root: Path, lab: LabConfig) -> int:
    """Soups and the separate-adapter composite for every (beta, seed) with both single-task runs."""
    eval_pairs = _load_pairs(root / "data" / "eval.jsonl")
    base = init_model(lab.model)
    refs = _eval_refs(str(root / "data" / "eval.jsonl"), base, eval_pairs)
    written = 0
    for beta in lab.sweep.betas:
        suffix = "" if beta == lab.train.beta else f" (beta={beta:g})"
        for seed in lab.sweep.seeds:
            paths = [root / "runs" / run_id(s, beta, seed) / "checkpoint.bin" for s in ("understanding_only", "generation_only")]
            if not all(p.exists() for p in paths):
                continue
            state_u, state_g = (load_checkpoint(p) for p in paths)
            for lam in lab.sweep.soup_lambdas:
                soup = soup_interpolate(state_u, state_g, lam)
                _posthoc_summary(
                    root, f"soup{lam:g}-beta{beta:g}-seed{seed}", f"soup (lambda={lam:g}){suffix}", beta, seed,
                    evaluate(soup, eval_pairs, beta, refs), False,
                )
                written += 1
            comp = separate_adapter_eval(state_u, state_g, eval_pairs, beta, refs)
            _posthoc_summary(
                root, f"separate_adapters-beta{beta:g}-seed{seed}", f"separate_adapters{suffix}", beta, seed,
                comp.metrics, True,
            )
            written += 1
    return written


def write_base(root: Path, lab: LabConfig) -> None:
    eval_pairs = _load_pairs(root / "data" / "eval.jsonl")
    base = init_model(lab.model)
    refs = _eval_refs(str(root / "data" / "eval.jsonl"), base, eval_pairs)
    _write_json(
        root / "base" / "summary.json",
        {"method": "base", "beta": lab.train.beta, "eval": evaluate(base, eval_pairs, lab.train.beta, refs)},
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    lab = _lab(args)
    if args.seed is not None:
        lab = lab.with_data_seed(args.seed)
    out = Path(args.out) if args.out else out_root(None) / "data" / "pairs.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    pairs = _training_pairs(lab)
    write_pairs(out, pairs, [lab.data_understanding, lab.data_generation], lab.model)
    counts = split_by_task(pairs)
    print(f"wrote {out}: {len(counts[UNDERSTANDING])} understanding + {len(counts[GENERATION])} generation pairs")
    return 0


def _diagnostics(args, calibrate: bool) -> int:
    lab = _lab(args)
    out = out_root(args.out) / ("calibration" if calibrate else "diagnostics")
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    n = lab.n_batches
    if args.synthetic_vectors:
        run = synthetic_diagnostics(n, dim=args.dim, rho=args.rho, cos=args.cos, seed=seed)
        check = combined_norm_check(args.rho, args.cos)
        meta = {
            "mode": "synthetic",
            "rho": args.rho,
            "cos": args.cos,
            "analytic": {
                "exact_relative_increase": check.exact_relative_increase,
                "quadratic_approx": check.quadratic_approx,
                "angle_deviation_deg": check.angle_deviation_deg,
            },
        }
    else:
        state = load_checkpoint(args.checkpoint) if args.checkpoint else init_model(lab.model)
        pairs = split_by_task(_load_pairs(Path(args.data)) if args.data else _training_pairs(lab))
        run = collect_batch_diagnostics(
            state, pairs[UNDERSTANDING], pairs[GENERATION], n, seed,
            DpoConfig(lab.train.beta, lab.train.balancing.joint_alpha), args.include_heads,
        )
        meta = {"mode": "model", "checkpoint": args.checkpoint, "include_heads": args.include_heads}
    write_records_csv(out / "diagnostics.csv", run.records)
    summary = dict(summarize_records(run.records), seed=seed, **meta)
    write_summary_json(out / "summary.json", summary)
    print(f"wrote {out / 'diagnostics.csv'} ({len(run.records)} batches, {summary['n_valid']} with nonzero norms)")
    if calibrate:
        try:
            report = null_calibration(run.records, run.intra_u, run.intra_g)
        except DomainError as exc:
            raise CliError(f"calibration: {exc}") from None
        write_summary_json(out / "calibration.json", dict(report.as_dict(), seed=seed, **meta))
        print(f"wrote {out / 'calibration.json'}")
    return 0


def cmd_diagnose(args) -> int:
    return _diagnostics(args, calibrate=False)


def cmd_calibrate(args) -> int:
    return _diagnostics(args, calibrate=True)


def _prepare_root(root: Path, lab: LabConfig) -> None:
    root.mkdir(parents=True, exist_ok=True)
    _write_datasets(lab, root / "data")
    _write_json(root / "sweep.json", {"config": config_to_dict(lab), "tool_version": __version__})


def cmd_train(args) -> int:
    lab = _lab(args)
    root = out_root(args.out)
    seed = args.seed if args.seed is not None else lab.train.seed
    _prepare_root(root, lab)
    strategy, beta = lab.train.balancing.strategy, lab.train.beta
    rid = execute_run(RunSpec(str(root), run_id(strategy, beta, seed), strategy, strategy, beta, seed, lab))
    print(f"wrote {root / 'runs' / rid}")
    return 0


def cmd_sweep(args) -> int:
    lab = _lab(args)
    if args.seed is not None:
        lab = replace(lab, sweep=replace(lab.sweep, seeds=_parse_list(args.seed, int, "--seed")))
    if args.jobs < 1:
        raise ConfigError("--jobs", f"must be >= 1, got {args.jobs}")
    root = out_root(args.out)
    _prepare_root(root, lab)
    default_beta = lab.train.beta
    specs = [
        RunSpec(str(root), run_id(s, b, seed), _method_name(s, b, default_beta), s, b, seed, lab)
        for b in lab.sweep.betas
        for s in lab.sweep.strategies
        for seed in lab.sweep.seeds
    ]
    _run_all(specs, args.jobs)
    write_base(root, lab)
    n_post = write_posthoc(root, lab)
    print(f"wrote {len(specs)} runs and {n_post} post-hoc summaries under {root}")
    return 0


def _complete_summaries(root: Path) -> tuple[list[dict], int]:
    found, skipped = [], 0
    for summary_path in sorted(root.glob("runs/*/summary.json")):
        manifest = summary_path.parent / "manifest.json"
        if not manifest.exists() or json.loads(manifest.read_text(encoding="utf-8")).get("status") != "complete":
            skipped += 1
            continue
        found.append(json.loads(summary_path.read_text(encoding="utf-8")))
    for summary_path in sorted(root.glob("posthoc/*/summary.json")):
        found.append(json.loads(summary_path.read_text(encoding="utf-8")))
    return found, skipped


def cmd_report(args) -> int:
    root = Path(args.run_dir)
    summaries, skipped = _complete_summaries(root) if root.is_dir() else ([], 0)
    if not summaries:
        raise CliError(f"{root}: no runs found")
    base_path = root / "base" / "summary.json"
    if not base_path.exists():
        raise CliError(f"{base_path}: baseline summary not found")
    base = json.loads(base_path.read_text(encoding="utf-8"))
    runs: dict[str, list[dict]] = {}
    non_deployable = set()
    for s in sorted(summaries, key=lambda s: (s["method"], s["seed"])):
        runs.setdefault(s["method"], []).append(s["eval"])
        if s.get("non_deployable"):
            non_deployable.add(s["method"])
    sweep_path = root / "sweep.json"
    echo = json.loads(sweep_path.read_text(encoding="utf-8"))["config"] if sweep_path.exists() else {}
    doc = build_report(runs, base["eval"], echo, sorted(non_deployable))
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(doc.to_json(), encoding="utf-8", newline="\n")
    (out / "report.txt").write_text(doc.text, encoding="utf-8", newline="\n")
    if skipped:
        print(f"skipped {skipped} incomplete run(s)", file=sys.stderr)
    print(doc.text, end="")
    return 0


def cmd_plot(args) -> int:
    root = Path(args.run_dir)
    paths = sorted(root.glob("**/trajectory.csv")) if root.is_dir() else []
    if not paths:
        raise CliError(f"{root}: no runs found")
    for p in paths:
        write_trajectory_charts(p.parent, read_trajectory(p), p.parent.name)
    print(f"wrote charts for {len(paths)} run(s)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file; flags override it")
    common.add_argument("--out", help="output root (default: $BDLAB_OUT or ./bdlab-out)")

    parser = argparse.ArgumentParser(prog="bdlab", description="Multi-task DPO gradient-interference laboratory.")
    parser.add_argument("--version", action="version", version=f"bdlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the training preference pairs as JSON lines")
    p.add_argument("--seed", type=int, help="data seed (generation pairs use seed + 1)")
    p.set_defaults(func=cmd_gen_data)

    for name, func, text in (
        ("diagnose", cmd_diagnose, "per-batch gradient interference measurements"),
        ("calibrate", cmd_calibrate, "diagnostics plus the intra- vs inter-task null calibration"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--seed", type=int, help="batch sampling seed")
        p.add_argument("--n-batches", type=int, dest="n_batches")
        p.add_argument("--beta", help="DPO temperature")
        p.add_argument("--checkpoint", help="model checkpoint (default: fresh initialization)")
        p.add_argument("--data", help="pairs file (default: generated from the configuration)")
        p.add_argument("--include-heads", action="store_true", help="measure over adapters and heads")
        p.add_argument("--synthetic-vectors", action="store_true", help="use constructed vectors instead of the model")
        p.add_argument("--rho", type=float, default=0.1, help="synthetic norm ratio")
        p.add_argument("--cos", type=float, default=0.0, help="synthetic cosine")
        p.add_argument("--dim", type=int, default=4096, help="synthetic dimension")
        p.set_defaults(func=func)

    p = sub.add_parser("train", parents=[common], help="train one run")
    p.add_argument("--seed", type=int, help="run seed (adapter init and data order)")
    p.add_argument("--strategy", help="balancing strategy")
    p.add_argument("--beta", help="DPO temperature")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", parents=[common], help="train strategies x seeds x betas, then post-hoc methods")
    p.add_argument("--seed", help="comma-separated run seeds")
    p.add_argument("--strategy", help="comma-separated strategies")
    p.add_argument("--beta", help="comma-separated DPO temperatures")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="comparison table against the untrained model")
    p.add_argument("run_dir", help="sweep root")
    p.add_argument("--out", help="where to write report.json and report.txt (default: run_dir)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="redraw SVG charts for every run under a directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "beta", None) is not None and args.command in ("diagnose", "calibrate", "train"):
        if "," in args.beta:
            print(f"error: --beta: {args.command} takes a single value", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (BdlabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
