"""Command-line front end.

Every command prints one JSON report to stdout: command name, tool version,
an input digest (path, row count, content hash) where a file is read, the
full effective configuration including the seed, and the results payload.
Reports contain no timestamps, so rerunning a command with identical inputs
and flags produces byte-identical output.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, allocation, dataset, geometry, inference
from .errors import DataError, NumericError, UsageError
from .fitter import (
    ChinchillaParams,
    FitConfig,
    FitResult,
    JointParams,
    fit_chinchilla,
    fit_joint,
    predict_loss,
)
from .geometry import FlopsConvention, Injection, ModelShape, TrainingRecipe


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes."""

    def error(self, message):
        raise UsageError(message)


def _float_list(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"not a comma-separated number list: {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"not a comma-separated integer list: {text!r}") from None


def _partition(text: str) -> tuple[int, int, int]:
    parts = _int_list(text)
    if len(parts) != 3:
        raise UsageError(f"partition must be n_prelude,n_recur,n_coda, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _phi_mode(text: str):
    if text.strip().lower() == "free":
        return "free"
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"--phi must be 'free' or a number, got {text!r}") from None


def _digest(path: str) -> dict:
    data = Path(path).read_bytes()
    text = data.decode("utf-8", errors="replace")
    n_rows = max(0, sum(1 for line in text.splitlines() if line.strip()) - 1)
    return {
        "path": str(path),
        "rows": n_rows,
        "sha256": hashlib.sha256(data).hexdigest(),
    }


def _emit(report: dict) -> None:
    sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _write_table(path: str, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _detect_format(path: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    return "json" if str(path).endswith(".json") else "csv"


# ---------------------------------------------------------------------------
# Shared argument groups


def _add_shape_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--r", type=int, required=True, help="recurrence count (1 = non-looped)")
    p.add_argument("--s", type=int, required=True, help="width scale factor (d_model = 64 s)")
    p.add_argument("--l-eff", type=int, default=geometry.DEFAULT_L_EFF, help="effective depth")
    p.add_argument("--n-prelude", type=int, default=geometry.DEFAULT_N_PRELUDE)
    p.add_argument("--n-coda", type=int, default=geometry.DEFAULT_N_CODA)
    p.add_argument(
        "--injection",
        default=None,
        help="none | linear | hyper:<K> (default: none at r=1, linear otherwise)",
    )
    p.add_argument("--vocab", type=int, default=geometry.DEFAULT_VOCAB)
    p.add_argument("--seq-len", type=int, default=geometry.DEFAULT_SEQ_LEN)


def _add_recipe_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bptt", choices=("full", "trunc"), default="full")
    p.add_argument(
        "--r-bwd", type=int, default=None, help="truncated gradient window (default ceil(r/2))"
    )


def _add_fitconfig_args(p: argparse.ArgumentParser, restarts_default: int = 500) -> None:
    p.add_argument("--restarts", type=int, default=restarts_default)
    p.add_argument("--max-iter", type=int, default=10_000)
    p.add_argument("--delta", type=float, default=1e-3, help="Huber threshold")
    p.add_argument("--grad-tol", type=float, default=1e-9)
    p.add_argument("--step-tol", type=float, default=1e-12)
    p.add_argument("--seed", type=int, required=True, help="64-bit RNG seed (required)")


def _shape_from_args(args) -> ModelShape:
    injection = None if args.injection is None else Injection.parse(args.injection)
    return ModelShape(
        r=args.r,
        s=args.s,
        l_eff=args.l_eff,
        n_prelude=args.n_prelude,
        n_coda=args.n_coda,
        injection=injection,
        vocab=args.vocab,
        seq_len=args.seq_len,
    )


def _recipe_from_args(args) -> TrainingRecipe:
    if args.bptt == "full":
        if args.r_bwd is not None:
            raise UsageError("--r-bwd requires --bptt trunc")
        return geometry.FULL_BPTT
    return TrainingRecipe("trunc", args.r_bwd)


def _config_from_args(args) -> FitConfig:
    return FitConfig(
        seed=args.seed,
        restarts=args.restarts,
        max_iter=args.max_iter,
        huber_delta=args.delta,
        grad_tol=args.grad_tol,
        step_tol=args.step_tol,
    )


def _config_echo(config: FitConfig) -> dict:
    return {
        "seed": config.seed,
        "restarts": config.restarts,
        "max_iter": config.max_iter,
        "huber_delta": config.huber_delta,
        "grad_tol": config.grad_tol,
        "step_tol": config.step_tol,
    }


def _params_payload(params: ChinchillaParams) -> dict:
    payload = {
        "A": params.amp_params,
        "alpha": params.alpha,
        "B": params.amp_data,
        "beta": params.beta,
        "E": params.irreducible,
        "log_A": params.a,
        "log_B": params.b,
        "log_E": params.e,
    }
    if isinstance(params, JointParams):
        payload["phi"] = params.phi
    return payload


def _fit_payload(result: FitResult) -> dict:
    objectives = result.restart_objectives
    finite = objectives[np.isfinite(objectives)]
    return {
        "params": _params_payload(result.params),
        "objective_sum": result.objective,
        "objective_mean": result.objective_mean,
        "r_squared": result.r2,
        "n_runs": result.n_runs,
        "status": result.status,
        "restarts": {
            "count": int(objectives.size),
            "failed": int(objectives.size - finite.size),
            "best": float(finite.min()),
            "median": float(np.median(finite)),
            "worst": float(finite.max()),
            "near_best": int((finite <= finite.min() + 1e-9).sum()),
            "winning_index": result.winning_restart_index,
        },
    }


def _params_from_args(args) -> ChinchillaParams:
    natural = (args.A, args.alpha, args.B, args.beta, args.E)
    if any(v is None for v in natural):
        raise UsageError("allocation needs --A --alpha --B --beta --E (natural scale)")
    if args.phi is None:
        return ChinchillaParams.from_natural(args.A, args.alpha, args.B, args.beta, args.E)
    return JointParams.from_natural(args.A, args.alpha, args.B, args.beta, args.E, phi=args.phi)


# ---------------------------------------------------------------------------
# Commands


def _cmd_flops(args) -> dict:
    shape = _shape_from_args(args)
    recipe = _recipe_from_args(args)
    n_once, n_rec = geometry.param_split(shape)
    results = {
        "d_model": shape.d_model,
        "n_recur": shape.n_recur,
        "unique_params": geometry.unique_params(shape),
        "realized_params": geometry.realized_params(shape),
        "n_once": n_once,
        "n_rec": n_rec,
        "injection_overhead": geometry.injection_overhead(shape),
        "forward_flops_per_token": {
            conv.value: geometry.forward_flops_per_token(shape, conv) for conv in FlopsConvention
        },
        "train_flops_per_token": {
            conv.value: geometry.train_flops_per_token(shape, recipe, conv)
            for conv in FlopsConvention
        },
    }
    if recipe.truncated:
        full = {
            conv.value: geometry.train_flops_per_token(shape, geometry.FULL_BPTT, conv)
            for conv in FlopsConvention
        }
        results["r_bwd"] = recipe.resolve_r_bwd(shape.r)
        results["trunc_over_full_tokens"] = {
            conv.value: full[conv.value] / results["train_flops_per_token"][conv.value]
            for conv in FlopsConvention
        }
    if args.budget is not None:
        results["tokens_for_budget"] = {
            conv.value: geometry.tokens_for_budget(args.budget, shape, recipe, conv)
            for conv in FlopsConvention
        }
    config = {
        "r": shape.r, "s": shape.s, "l_eff": shape.l_eff,
        "n_prelude": shape.n_prelude, "n_coda": shape.n_coda,
        "injection": str(shape.injection), "bptt": recipe.bptt,
        "vocab": shape.vocab, "seq_len": shape.seq_len, "budget": args.budget,
    }
    return {"command": "flops", "version": __version__, "input": None,
            "config": config, "results": results}


def _plan_grid_from_args(args) -> list[dataset.GridCell]:
    recipe = _recipe_from_args(args)
    convention = FlopsConvention.parse(args.convention)
    injection = Injection.parse(args.injection) if args.injection else geometry.LINEAR_INJECTION
    token_range = None
    if args.token_min is not None or args.token_max is not None:
        token_range = (args.token_min or 0.0, args.token_max or float("inf"))
    return dataset.plan_grid(
        budgets=args.budgets,
        scales=args.scales,
        r_values=args.r_values,
        recipe=recipe,
        convention=convention,
        injection=injection,
        l_eff=args.l_eff,
        n_prelude=args.n_prelude,
        n_coda=args.n_coda,
        vocab=args.vocab,
        seq_len=args.seq_len,
        token_range=token_range,
    )


def _grid_config(args) -> dict:
    return {
        "budgets": args.budgets, "scales": args.scales, "r_values": args.r_values,
        "bptt": args.bptt, "r_bwd": args.r_bwd, "convention": args.convention,
        "injection": args.injection or "linear", "l_eff": args.l_eff,
        "n_prelude": args.n_prelude, "n_coda": args.n_coda,
        "vocab": args.vocab, "seq_len": args.seq_len,
        "token_min": args.token_min, "token_max": args.token_max,
    }


def _cell_row(cell: dataset.GridCell) -> dict:
    return {
        "r": cell.shape.r,
        "s": cell.shape.s,
        "l_eff": cell.shape.l_eff,
        "n_prelude": cell.shape.n_prelude,
        "n_coda": cell.shape.n_coda,
        "injection": str(cell.shape.injection),
        "bptt": cell.recipe.bptt,
        "r_bwd": cell.recipe.resolve_r_bwd(cell.shape.r) if cell.recipe.truncated else "",
        "budget_flops": cell.budget,
        "n_unique": cell.n_unique,
        "tokens": cell.tokens,
    }


def _cmd_grid(args) -> dict:
    cells = _plan_grid_from_args(args)
    rows = [_cell_row(cell) for cell in cells]
    if args.table_out:
        _write_table(args.table_out, list(rows[0].keys()) if rows else
                     ["r", "s", "budget_flops", "n_unique", "tokens"], rows)
    return {"command": "grid", "version": __version__, "input": None,
            "config": _grid_config(args), "results": {"n_cells": len(cells), "cells": rows}}


def _cmd_synth(args) -> dict:
    cells = _plan_grid_from_args(args)
    truth = JointParams.from_natural(
        args.truth_A, args.truth_alpha, args.truth_B, args.truth_beta,
        args.truth_E, phi=args.truth_phi,
    )
    spec = dataset.SyntheticSpec(truth=truth, noise_sigma=args.noise_sigma, seed=args.seed)
    records = dataset.synthesize_runs(cells, spec)
    fmt = _detect_format(args.out, args.format)
    dataset.write_runs(records, args.out, fmt=fmt)
    config = _grid_config(args)
    config.update({
        "truth_A": args.truth_A, "truth_alpha": args.truth_alpha,
        "truth_B": args.truth_B, "truth_beta": args.truth_beta,
        "truth_E": args.truth_E, "truth_phi": args.truth_phi,
        "noise_sigma": args.noise_sigma, "seed": args.seed,
        "out": args.out, "format": fmt,
    })
    return {"command": "synth", "version": __version__, "input": None, "config": config,
            "results": {"n_runs": len(records), "out": args.out}}


def _load_runs_arg(path: str, fmt: str | None) -> list[dataset.RunRecord]:
    return dataset.load_runs(path, fmt=_detect_format(path, fmt))


def _cmd_fit(args) -> dict:
    runs = _load_runs_arg(args.runs, args.format)
    config = _config_from_args(args)
    if args.law == "chinchilla":
        result = fit_chinchilla(runs, config)
    else:
        result = fit_joint(runs, config, phi=args.phi)
    if args.table_out:
        rows = []
        for run in runs:
            n_once, n_rec = geometry.param_split(run.shape)
            pred = predict_loss(result.params, n_once, n_rec, run.shape.r, run.tokens)
            rows.append({
                "r": run.shape.r, "s": run.shape.s, "budget_flops": run.budget,
                "n_unique": n_once + n_rec, "tokens": run.tokens,
                "val_loss": run.val_loss, "predicted_loss": pred,
                "residual": run.val_loss - pred,
            })
        _write_table(args.table_out, list(rows[0].keys()), rows)
    config_echo = _config_echo(config)
    config_echo.update({"law": args.law, "phi": args.phi, "runs": args.runs})
    return {"command": "fit", "version": __version__, "input": _digest(args.runs),
            "config": config_echo, "results": _fit_payload(result)}


def _cmd_bootstrap(args) -> dict:
    runs = _load_runs_arg(args.runs, args.format)
    config = _config_from_args(args)
    result = inference.block_bootstrap_phi(
        runs,
        n_resamples=args.resamples,
        fit_config=config,
        seed=args.seed,
        resample_restarts=args.bootstrap_restarts,
    )
    if args.table_out:
        _write_table(
            args.table_out,
            ["sample_index", "phi"],
            [{"sample_index": i, "phi": float(v)} for i, v in enumerate(result.phi_samples)],
        )
    config_echo = _config_echo(config)
    config_echo.update({
        "resamples": args.resamples, "bootstrap_restarts": args.bootstrap_restarts,
        "bootstrap_seed": args.seed, "runs": args.runs,
    })
    return {
        "command": "bootstrap", "version": __version__, "input": _digest(args.runs),
        "config": config_echo,
        "results": {
            "phi_point": result.phi_point,
            "ci_low": result.ci_low,
            "ci_high": result.ci_high,
            "n_resamples": result.n_resamples,
            "n_redraws": result.n_redraws,
            "phi_samples_mean": float(result.phi_samples.mean()),
            "phi_samples_std": float(result.phi_samples.std()),
            "point_fit": _fit_payload(result.point_fit),
        },
    }


def _cmd_compare(args) -> dict:
    baseline = _load_runs_arg(args.baseline, args.format)
    probe = _load_runs_arg(args.probe, args.format)
    config = _config_from_args(args)
    report = inference.delta_phi(baseline, probe, config)
    config_echo = _config_echo(config)
    config_echo.update({"baseline": args.baseline, "probe": args.probe})
    return {
        "command": "compare", "version": __version__,
        "input": {"baseline": _digest(args.baseline), "probe": _digest(args.probe)},
        "config": config_echo,
        "results": {
            "phi_base": report.phi_base,
            "phi_probe": report.phi_probe,
            "delta_phi": report.delta,
            "shared_r1_runs": report.shared_r1_runs,
            "base_fit": _fit_payload(report.base_fit),
            "probe_fit": _fit_payload(report.probe_fit),
        },
    }


def _cmd_allocate(args) -> dict:
    params = _params_from_args(args)
    recipe = _recipe_from_args(args)
    convention = FlopsConvention.parse(args.convention)
    injection = Injection.parse(args.injection) if args.injection else None
    if len(args.budgets) >= 2:
        front = allocation.frontier(
            params, args.r, args.partition, convention, recipe, args.budgets,
            injection=injection, vocab=args.vocab, seq_len=args.seq_len,
        )
        points, n_exponent = front.points, front.n_exponent
    else:
        points = [
            allocation.optimal_allocation(
                params, args.r, args.partition, convention, recipe, args.budgets[0],
                injection=injection, vocab=args.vocab, seq_len=args.seq_len,
            )
        ]
        n_exponent = None
    rows = [
        {"budget": p.budget, "n_star": p.n_star, "d_star": p.d_star,
         "loss_star": p.loss_star, "width_star": p.width_star}
        for p in points
    ]
    if args.table_out:
        _write_table(args.table_out, list(rows[0].keys()), rows)
    config = {
        "A": args.A, "alpha": args.alpha, "B": args.B, "beta": args.beta, "E": args.E,
        "phi": args.phi, "r": args.r, "partition": list(args.partition),
        "convention": args.convention, "bptt": args.bptt, "r_bwd": args.r_bwd,
        "injection": args.injection, "budgets": args.budgets,
        "vocab": args.vocab, "seq_len": args.seq_len,
    }
    results = {
        "points": rows,
        "n_star_exponent": n_exponent,
        "data_scaling_exponent": allocation.data_scaling_exponent(args.alpha, args.beta),
    }
    return {"command": "allocate", "version": __version__, "input": None,
            "config": config, "results": results}


def _cmd_equiv(args) -> dict:
    sizes = allocation.equivalent_sizes(args.r, args.partition, args.phi)
    config = {"r": args.r, "partition": list(args.partition), "phi": args.phi}
    return {
        "command": "equiv", "version": __version__, "input": None, "config": config,
        "results": {
            "unique_ratio": sizes.unique_ratio,
            "effective_ratio": sizes.effective_ratio,
        },
    }


# ---------------------------------------------------------------------------
# Parser assembly


def build_parser() -> _Parser:
    parser = _Parser(prog="loopfit", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flops", help="parameter counts and per-token FLOPs for one shape")
    _add_shape_args(p)
    _add_recipe_args(p)
    p.add_argument("--budget", type=float, default=None, help="also report tokens at this budget")
    p.set_defaults(handler=_cmd_flops)

    def add_grid_flags(p):
        p.add_argument("--budgets", type=_float_list, required=True)
        p.add_argument("--scales", type=_int_list, required=True)
        p.add_argument("--r-values", type=_int_list, required=True)
        _add_recipe_args(p)
        p.add_argument("--convention", default="empirical",
                       choices=("empirical", "parameter_only"))
        p.add_argument("--injection", default=None,
                       help="injection for looped cells (default linear)")
        p.add_argument("--l-eff", type=int, default=geometry.DEFAULT_L_EFF)
        p.add_argument("--n-prelude", type=int, default=geometry.DEFAULT_N_PRELUDE)
        p.add_argument("--n-coda", type=int, default=geometry.DEFAULT_N_CODA)
        p.add_argument("--vocab", type=int, default=geometry.DEFAULT_VOCAB)
        p.add_argument("--seq-len", type=int, default=geometry.DEFAULT_SEQ_LEN)
        p.add_argument("--token-min", type=float, default=None)
        p.add_argument("--token-max", type=float, default=None)

    p = sub.add_parser("grid", help="plan an iso-compute grid of (shape, budget) cells")
    add_grid_flags(p)
    p.add_argument("--table-out", default=None,
                   help="CSV, one row per cell: r,s,...,budget_flops,n_unique,tokens")
    p.set_defaults(handler=_cmd_grid)

    p = sub.add_parser("synth", help="generate synthetic runs from a ground-truth law")
    add_grid_flags(p)
    p.add_argument("--truth-A", type=float, required=True)
    p.add_argument("--truth-alpha", type=float, required=True)
    p.add_argument("--truth-B", type=float, required=True)
    p.add_argument("--truth-beta", type=float, required=True)
    p.add_argument("--truth-E", type=float, required=True)
    p.add_argument("--truth-phi", type=float, required=True)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default=None)
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("fit", help="fit the Chinchilla or joint law to a run file")
    p.add_argument("--runs", required=True)
    p.add_argument("--format", choices=("csv", "json"), default=None)
    p.add_argument("--law", choices=("chinchilla", "joint"), default="joint")
    p.add_argument("--phi", type=_phi_mode, default="free",
                   help="'free' or a fixed value (joint law only)")
    _add_fitconfig_args(p)
    p.add_argument("--table-out", default=None,
                   help="CSV, one row per run with predicted loss and residual")
    p.set_defaults(handler=_cmd_fit)

    p = sub.add_parser("bootstrap", help="block bootstrap CI for the recurrence exponent")
    p.add_argument("--runs", required=True)
    p.add_argument("--format", choices=("csv", "json"), default=None)
    p.add_argument("--resamples", type=int, default=inference.DEFAULT_RESAMPLES)
    p.add_argument("--bootstrap-restarts", type=int,
                   default=inference.DEFAULT_RESAMPLE_RESTARTS,
                   help="restarts per resample refit")
    _add_fitconfig_args(p)
    p.add_argument("--table-out", default=None, help="CSV of resample phi values")
    p.set_defaults(handler=_cmd_bootstrap)

    p = sub.add_parser("compare", help="delta-phi between a baseline and a probe run file")
    p.add_argument("--baseline", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--format", choices=("csv", "json"), default=None)
    _add_fitconfig_args(p)
    p.set_defaults(handler=_cmd_compare)

    p = sub.add_parser("allocate", help="compute-optimal allocation at given budgets")
    p.add_argument("--A", type=float, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--B", type=float, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--E", type=float, required=True)
    p.add_argument("--phi", type=float, default=None)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--partition", type=_partition, required=True,
                   help="n_prelude,n_recur,n_coda")
    p.add_argument("--budgets", type=_float_list, required=True)
    _add_recipe_args(p)
    p.add_argument("--convention", default="parameter_only",
                   choices=("empirical", "parameter_only"))
    p.add_argument("--injection", default=None)
    p.add_argument("--vocab", type=int, default=geometry.DEFAULT_VOCAB)
    p.add_argument("--seq-len", type=int, default=geometry.DEFAULT_SEQ_LEN)
    p.add_argument("--table-out", default=None, help="CSV, one row per allocation point")
    p.set_defaults(handler=_cmd_allocate)

    p = sub.add_parser("equiv", help="unique/effective size ratios vs the non-looped model")
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--partition", type=_partition, required=True)
    p.add_argument("--phi", type=float, required=True)
    p.set_defaults(handler=_cmd_equiv)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        report = args.handler(args)
        _emit(report)
        return 0
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
