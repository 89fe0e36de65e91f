"""Uncertainty and comparison for the recurrence-equivalence exponent.

The block bootstrap resamples (budget, r) cells with replacement, refits
the joint law on each resample, and reports percentile confidence
intervals; budget-half splits and two-dataset refits (delta of the fitted
exponent) reuse the same fitting protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dataset import RunRecord, _round_sig, group_cells
from .errors import NumericError, UsageError
from .fitter import (
    FitConfig,
    FitResult,
    RunData,
    _check_identifiable,
    fit_joint,
    fit_joint_free_weighted,
)

DEFAULT_RESAMPLES = 200
DEFAULT_RESAMPLE_RESTARTS = 50
_MAX_REDRAWS = 1000


@dataclass(frozen=True)
class BootstrapResult:
    """Block-bootstrap summary for the recurrence exponent."""

    phi_point: float
    phi_samples: np.ndarray
    ci_low: float
    ci_high: float
    n_resamples: int
    seed: int
    n_redraws: int
    point_fit: FitResult


@dataclass(frozen=True)
class DeltaPhiReport:
    """Joint-law refits of a baseline and a probe run set under identical
    configuration; ``delta = phi_probe - phi_base``."""

    phi_base: float
    phi_probe: float
    delta: float
    base_fit: FitResult
    probe_fit: FitResult
    shared_r1_runs: bool


def _identifiable(runs: Sequence[RunRecord]) -> bool:
    try:
        _check_identifiable(RunData.from_runs(runs), min_runs=6, need_r=True)
    except UsageError:
        return False
    return True


def _identifiable_weighted(data: RunData, weights: np.ndarray) -> bool:
    """Identifiability of a weighted (resampled) view of the run table:
    multiplicity does not affect which values are distinct, only the run
    count."""
    mask = weights > 0
    if weights.sum() < 6:
        return False
    return (
        np.unique(data.n_unique[mask]).size > 1
        and np.unique(data.tokens[mask]).size > 1
        and np.unique(data.r[mask]).size > 1
    )


def block_bootstrap_phi(
    runs: Sequence[RunRecord],
    n_resamples: int = DEFAULT_RESAMPLES,
    fit_config: FitConfig | None = None,
    seed: int = 0,
    resample_restarts: int = DEFAULT_RESAMPLE_RESTARTS,
) -> BootstrapResult:
    """Bootstrap the joint-law exponent over (budget, r) cells.

    Each resample draws as many cells as there are non-empty cells, with
    replacement, concatenates their runs and refits the free-phi joint law.
    A resample that loses phi identifiability (for example, one that drops
    every r > 1 cell) is redrawn, with the redraw count reported; the
    procedure is deterministic given ``seed``.

    Resample fits use ``resample_restarts`` restarts instead of the full
    ``fit_config.restarts`` to keep the resample loop affordable; the
    full-data point fit uses the complete configuration.  A resample that
    repeats a cell k times is fitted as a k-weighted view of the shared run
    table (identical objective), which lets every resample's restarts run
    in one batched minimizer call.
    """
    if fit_config is None:
        raise UsageError("block_bootstrap_phi requires an explicit fit configuration")
    if n_resamples < 1:
        raise UsageError("n_resamples must be >= 1")
    grouped = group_cells(runs)
    if len(grouped) < 2:
        raise UsageError(f"bootstrap needs at least 2 (budget, r) cells, got {len(grouped)}")
    if not _identifiable(runs):
        raise UsageError("phi is not identifiable on the full data")

    point_fit = fit_joint(runs, fit_config, phi="free")

    data = RunData.from_runs(runs)
    keys = list(grouped.keys())
    cell_index = {key: i for i, key in enumerate(keys)}
    cell_of_run = np.array(
        [cell_index[(_round_sig(run.budget), run.shape.r)] for run in runs]
    )

    # One generator drives the cell draws; per-resample fit seeds come from
    # the same seed sequence so resample fits may run in any order.
    draw_rng = np.random.default_rng(np.random.SeedSequence(seed))
    fit_seeds = np.random.SeedSequence(seed).generate_state(n_resamples + 1, dtype=np.uint64)[1:]

    n_cells = len(keys)
    weights = np.empty((n_resamples, len(runs)))
    n_redraws = 0
    for b in range(n_resamples):
        for _attempt in range(_MAX_REDRAWS + 1):
            idx = draw_rng.integers(0, n_cells, size=n_cells)
            counts = np.bincount(idx, minlength=n_cells).astype(float)
            weights[b] = counts[cell_of_run]
            if _identifiable_weighted(data, weights[b]):
                break
            n_redraws += 1
        else:
            raise NumericError(
                f"resample {b}: no phi-identifiable draw within {_MAX_REDRAWS} redraws"
            )

    resample_config = replace(fit_config, restarts=resample_restarts)
    samples, _ = fit_joint_free_weighted(
        data, weights, [int(s) for s in fit_seeds], resample_config
    )

    ci_low, ci_high = np.percentile(samples, [2.5, 97.5])  # linear interpolation
    return BootstrapResult(
        phi_point=point_fit.params.phi,
        phi_samples=samples,
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        n_resamples=n_resamples,
        seed=seed,
        n_redraws=n_redraws,
        point_fit=point_fit,
    )


def split_stability(
    runs: Sequence[RunRecord],
    budget_threshold: float,
    fit_config: FitConfig,
) -> tuple[float, float]:
    """Fitted phi on the low-budget half (C <= threshold) and the
    high-budget half (C > threshold), each by an independent free-phi fit."""
    low = [run for run in runs if run.budget <= budget_threshold]
    high = [run for run in runs if run.budget > budget_threshold]
    if not low or not high:
        raise UsageError(
            f"budget threshold {budget_threshold:g} leaves an empty half "
            f"(low={len(low)}, high={len(high)})"
        )
    phi_low = fit_joint(low, fit_config, phi="free").params.phi
    phi_high = fit_joint(high, fit_config, phi="free").params.phi
    return phi_low, phi_high


def _r1_signature(runs: Sequence[RunRecord]) -> list[tuple]:
    return sorted(
        (run.shape.s, run.budget, run.tokens, run.val_loss)
        for run in runs
        if run.shape.r == 1
    )


def delta_phi(
    baseline_runs: Sequence[RunRecord],
    probe_runs: Sequence[RunRecord],
    fit_config: FitConfig,
) -> DeltaPhiReport:
    """Compare a probe run set against a baseline via their fitted phis.

    Both sets are fitted with the identical configuration; the report also
    records whether the two sets share their r = 1 runs (the usual probe
    design keeps the non-looped baseline runs unchanged).
    """
    base_fit = fit_joint(baseline_runs, fit_config, phi="free")
    probe_fit = fit_joint(probe_runs, fit_config, phi="free")
    return DeltaPhiReport(
        phi_base=base_fit.params.phi,
        phi_probe=probe_fit.params.phi,
        delta=probe_fit.params.phi - base_fit.params.phi,
        base_fit=base_fit,
        probe_fit=probe_fit,
        shared_r1_runs=_r1_signature(baseline_runs) == _r1_signature(probe_runs),
    )
