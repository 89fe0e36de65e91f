"""Compute-optimal analysis: iso-FLOPs parabola optima, continuous
allocation of parameters versus tokens at a budget, loss frontiers, and the
architectural equivalence ratios implied by a recurrence exponent."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import geometry
from .errors import NumericError, UsageError
from .fitter import ChinchillaParams, predict_loss
from .geometry import FlopsConvention, Injection, ModelShape, TrainingRecipe

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class IsoflopsOptimum:
    """Vertex of a per-(budget, r) parabola of loss against log N.

    ``extrapolated`` marks the degenerate case (non-convex quadratic), where
    the best empirical run is returned instead of a vertex.
    """

    n_star: float
    loss_star: float
    extrapolated: bool


@dataclass(frozen=True)
class AllocationPoint:
    """Compute-optimal allocation at one budget for one architecture."""

    budget: float
    n_star: float
    d_star: float
    loss_star: float
    width_star: float


@dataclass(frozen=True)
class Frontier:
    points: list[AllocationPoint]
    n_exponent: float  # log-log slope of N*(C)


@dataclass(frozen=True)
class EquivalentSizes:
    """Size of a looped model relative to the non-looped baseline at the
    same width and effective depth: unique parameters, and effective
    parameters under a recurrence exponent (small injection term dropped)."""

    unique_ratio: float
    effective_ratio: float


def isoflops_parabola(cell_runs: Sequence) -> IsoflopsOptimum:
    """Least-squares quadratic of loss against log N for one cell's runs."""
    n_values = np.array([geometry.unique_params(run.shape) for run in cell_runs], dtype=float)
    losses = np.array([run.val_loss for run in cell_runs], dtype=float)
    if np.unique(n_values).size < 3:
        raise UsageError(
            f"parabola fit needs at least 3 distinct parameter counts, "
            f"got {np.unique(n_values).size}"
        )
    log_n = np.log(n_values)
    c2, c1, c0 = np.polyfit(log_n, losses, 2)
    if c2 <= 0:  # no interior minimum: fall back to the best observed run
        best = int(np.argmin(losses))
        return IsoflopsOptimum(
            n_star=float(n_values[best]), loss_star=float(losses[best]), extrapolated=True
        )
    vertex = -c1 / (2.0 * c2)
    return IsoflopsOptimum(
        n_star=float(np.exp(vertex)),
        loss_star=float(c0 - c1 * c1 / (4.0 * c2)),
        extrapolated=False,
    )


def _golden_section_min(
    fun: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10, max_iter: int = 200
) -> float:
    """Golden-section minimum of a unimodal scalar function on [lo, hi]."""
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = fun(x1), fun(x2)
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = fun(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = fun(x2)
    return 0.5 * (lo + hi)


def optimal_allocation(
    params: ChinchillaParams,
    r: int,
    partition: tuple[int, int, int],
    convention: FlopsConvention,
    recipe: TrainingRecipe,
    budget: float,
    *,
    injection: Injection | None = None,
    vocab: int = geometry.DEFAULT_VOCAB,
    seq_len: int = geometry.DEFAULT_SEQ_LEN,
    width_range: tuple[float, float] = (4.0, 1e7),
    scan_points: int = 257,
) -> AllocationPoint:
    """Minimize predicted loss over continuous width at a fixed budget.

    The trained token count is tied to the width through the architecture's
    per-token training FLOPs, ``D = C / F_train(d)``.  The profile is
    bracketed on a coarse grid in log width and refined by golden-section
    search; a profile whose minimum sits at the scan boundary (no interior
    bracket) raises ``NumericError``.
    """
    if budget <= 0:
        raise UsageError(f"budget={budget} must be positive")
    if params.alpha <= 0 or params.beta <= 0:
        raise UsageError("allocation needs alpha > 0 and beta > 0")
    if injection is None:
        injection = geometry.NO_INJECTION if r == 1 else geometry.LINEAR_INJECTION

    def loss_at_log_width(lw: float) -> float:
        d = math.exp(lw)
        n_once, n_rec = geometry.params_at_width(d, r, partition, injection)
        flops = geometry.train_flops_at_width(
            d, r, partition, injection, recipe, convention, seq_len, vocab
        )
        return float(predict_loss(params, n_once, n_rec, r, budget / flops))

    lo, hi = (math.log(w) for w in width_range)
    grid = np.linspace(lo, hi, scan_points)
    values = np.array([loss_at_log_width(lw) for lw in grid])
    if not np.all(np.isfinite(values)):
        raise NumericError("allocation profile is non-finite over the width scan")
    k = int(np.argmin(values))
    if k == 0 or k == scan_points - 1:
        raise NumericError(
            f"no interior optimum bracket at budget {budget:g}: scan minimum at the "
            f"{'lower' if k == 0 else 'upper'} width bound "
            f"({math.exp(grid[k]):.3g}); widen width_range"
        )
    lw_star = _golden_section_min(loss_at_log_width, grid[k - 1], grid[k + 1])

    width = math.exp(lw_star)
    n_once, n_rec = geometry.params_at_width(width, r, partition, injection)
    flops = geometry.train_flops_at_width(
        width, r, partition, injection, recipe, convention, seq_len, vocab
    )
    tokens = budget / flops
    return AllocationPoint(
        budget=budget,
        n_star=n_once + n_rec,
        d_star=tokens,
        loss_star=float(predict_loss(params, n_once, n_rec, r, tokens)),
        width_star=width,
    )


def frontier(
    params: ChinchillaParams,
    r: int,
    partition: tuple[int, int, int],
    convention: FlopsConvention,
    recipe: TrainingRecipe,
    budgets: Sequence[float],
    **kwargs,
) -> Frontier:
    """Allocation points across budgets plus the fitted power-law exponent
    of the optimal parameter count against compute."""
    if len(budgets) < 2:
        raise UsageError("frontier needs at least 2 budgets")
    points = [
        optimal_allocation(params, r, partition, convention, recipe, c, **kwargs)
        for c in budgets
    ]
    slope = np.polyfit(
        np.log([p.budget for p in points]), np.log([p.n_star for p in points]), 1
    )[0]
    return Frontier(points=points, n_exponent=float(slope))


def closed_form_n_star(params: ChinchillaParams, budget: float) -> float:
    """Stationary point of ``A N^-alpha + B (C / 6N)^-beta`` over N:
    ``N* = [alpha A / (beta B) * (C/6)^beta]^(1/(alpha+beta))``.

    Valid under the parameter-only convention at r = 1, where the training
    FLOPs are exactly 6 N per token; used as an independent oracle for the
    numeric allocation search.
    """
    if params.alpha <= 0 or params.beta <= 0:
        raise UsageError("closed form needs alpha > 0 and beta > 0")
    log_n = (
        math.log(params.alpha) + params.a - math.log(params.beta) - params.b
        + params.beta * math.log(budget / 6.0)
    ) / (params.alpha + params.beta)
    return math.exp(log_n)


def data_scaling_exponent(alpha: float, beta: float) -> float:
    """Compute-optimal data exponent ``beta / (alpha + beta)``: the log-log
    slope of optimal tokens against compute."""
    if alpha + beta <= 0:
        raise ValueError(f"alpha + beta = {alpha + beta} must be positive")
    return beta / (alpha + beta)


def effective_param_ratio(shape: ModelShape, phi: float) -> float:
    """Capacity gain factor ``g_r = (N_once + r^phi N_rec) / N``."""
    n_once, n_rec = geometry.param_split(shape)
    return (n_once + shape.r**phi * n_rec) / (n_once + n_rec)


def effective_amplitude(amp_params: float, alpha: float, ratio: float) -> float:
    """Effective parameter amplitude ``A g_r^-alpha`` after absorbing the
    recurrence gain into the amplitude at fixed r."""
    if ratio <= 0:
        raise ValueError(f"capacity ratio g_r={ratio} must be positive")
    return amp_params * ratio ** (-alpha)


def equivalent_sizes(r: int, partition: tuple[int, int, int], phi: float) -> EquivalentSizes:
    """Unique- and effective-parameter ratios of a looped model against the
    non-looped model of the same width and effective depth.

    With blocks (n_prelude, n_recur, n_coda) and the small injection term
    dropped, the unique ratio is ``(n_prelude + n_recur + n_coda) / l_eff``
    and the effective ratio ``(n_prelude + n_coda + r^phi n_recur) / l_eff``.
    Both equal 1 at r = 1 for any phi.
    """
    if r < 1:
        raise ValueError(f"recurrence count r={r} must be >= 1")
    n_prelude, n_recur, n_coda = partition
    if min(partition) < 0 or n_recur < 1:
        raise ValueError(f"invalid partition {partition}")
    l_eff = n_prelude + r * n_recur + n_coda
    return EquivalentSizes(
        unique_ratio=(n_prelude + n_recur + n_coda) / l_eff,
        effective_ratio=(n_prelude + n_coda + r**phi * n_recur) / l_eff,
    )
