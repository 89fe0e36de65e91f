"""Law evaluation and robust fitting.

The loss laws fitted here are

* the Chinchilla form ``L(N, D) = E + A N^-alpha + B D^-beta``, and
* the joint recurrence form
  ``L = E + A (N_once + r^phi N_rec)^-alpha + B D^-beta``,

parameterised in log space (``a = log A``, ``b = log B``, ``e = log E``) and
fitted by minimising a Huber penalty on the log-loss residual

    sum_i Huber_delta( LSE(a - alpha log N_i, b - beta log D_i, e) - log L_i )

with analytic gradients, over a box of admissible parameters, taking the
best of many random restarts of a projected limited-memory quasi-Newton
minimizer.  All stochastic choices flow from one explicit 64-bit seed
through numpy's PCG64 generator, so fits are reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np

from . import geometry
from .errors import NumericError, UsageError

_C1_ARMIJO = 1e-4
_MAX_BACKTRACKS = 60
_MAX_STALL = 40


# ---------------------------------------------------------------------------
# Parameter containers


@dataclass(frozen=True)
class ChinchillaParams:
    """Chinchilla law coefficients in log space.

    ``a = log A`` and ``b = log B`` may be ``-inf`` to disable a term
    entirely (amplitude exactly zero); the fitter itself always works
    inside the finite box.
    """

    a: float
    alpha: float
    b: float
    beta: float
    e: float

    @property
    def amp_params(self) -> float:
        """Natural parameter amplitude A."""
        return math.exp(self.a)

    @property
    def amp_data(self) -> float:
        """Natural data amplitude B."""
        return math.exp(self.b)

    @property
    def irreducible(self) -> float:
        """Natural irreducible loss E."""
        return math.exp(self.e)

    @classmethod
    def from_natural(
        cls, amp_params: float, alpha: float, amp_data: float, beta: float, irreducible: float
    ) -> "ChinchillaParams":
        """Build from natural-scale (A, alpha, B, beta, E); A or B may be 0."""
        if amp_params < 0 or amp_data < 0 or irreducible <= 0:
            raise ValueError("amplitudes must be >= 0 and irreducible loss > 0")
        a = -math.inf if amp_params == 0 else math.log(amp_params)
        b = -math.inf if amp_data == 0 else math.log(amp_data)
        return cls(a=a, alpha=alpha, b=b, beta=beta, e=math.log(irreducible))


@dataclass(frozen=True)
class JointParams(ChinchillaParams):
    """Chinchilla coefficients plus the recurrence-equivalence exponent phi."""

    phi: float = 1.0

    @classmethod
    def from_natural(
        cls,
        amp_params: float,
        alpha: float,
        amp_data: float,
        beta: float,
        irreducible: float,
        phi: float = 1.0,
    ) -> "JointParams":
        base = ChinchillaParams.from_natural(amp_params, alpha, amp_data, beta, irreducible)
        return cls(a=base.a, alpha=base.alpha, b=base.b, beta=base.beta, e=base.e, phi=phi)

    def effective_params(self, n_once, n_rec, r):
        """Effective parameter count ``N_once + r^phi N_rec``."""
        n_once = np.asarray(n_once, dtype=float)
        n_rec = np.asarray(n_rec, dtype=float)
        r = np.asarray(r, dtype=float)
        return n_once + np.power(r, self.phi) * n_rec


@dataclass(frozen=True)
class FitBounds:
    """Box constraints per coordinate, (lower, upper)."""

    a: tuple[float, float] = (-5.0, 35.0)
    alpha: tuple[float, float] = (0.0, 2.5)
    b: tuple[float, float] = (-5.0, 35.0)
    beta: tuple[float, float] = (0.0, 2.5)
    e: tuple[float, float] = (-3.0, 2.0)
    phi: tuple[float, float] = (-3.0, 3.0)

    def __post_init__(self) -> None:
        for name in ("a", "alpha", "b", "beta", "e", "phi"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"bound {name}: lower {lo} must be < upper {hi}")

    def arrays(self, include_phi: bool) -> tuple[np.ndarray, np.ndarray]:
        coords = [self.a, self.alpha, self.b, self.beta, self.e]
        if include_phi:
            coords.append(self.phi)
        arr = np.array(coords, dtype=float)
        return arr[:, 0].copy(), arr[:, 1].copy()


@dataclass(frozen=True)
class FitConfig:
    """Fitting protocol knobs.

    ``restarts`` random starts are drawn uniformly in the box from a PCG64
    generator seeded with ``seed``; each runs the bounded minimizer for at
    most ``max_iter`` iterations, stopping early when the projected-gradient
    infinity norm falls below ``grad_tol`` or the relative parameter change
    below ``step_tol``.
    """

    seed: int
    restarts: int = 500
    max_iter: int = 10_000
    huber_delta: float = 1e-3
    grad_tol: float = 1e-9
    step_tol: float = 1e-12

    def __post_init__(self) -> None:
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be > 0")
        if self.grad_tol <= 0 or self.step_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class FitResult:
    """Outcome of a multi-restart fit.

    ``objective`` is the Huber objective (sum over runs, per the law's
    definition); ``objective_mean`` divides by the run count.  The restart
    diagnostics keep every restart's final objective so ties and basin
    structure stay inspectable.
    """

    params: ChinchillaParams
    objective: float
    r2: float
    n_runs: int
    restart_objectives: np.ndarray
    winning_restart_index: int
    status: str

    @property
    def objective_mean(self) -> float:
        return self.objective / self.n_runs


# ---------------------------------------------------------------------------
# Run-data extraction


@dataclass(frozen=True)
class RunData:
    """Per-run design arrays extracted from run records.

    Log transforms and the unique-recurrence encoding are precomputed once;
    the objective is evaluated many thousands of times per fit.
    """

    n_once: np.ndarray
    n_rec: np.ndarray
    r: np.ndarray
    tokens: np.ndarray
    loss: np.ndarray
    log_tokens: np.ndarray
    log_loss: np.ndarray
    log_r_unique: np.ndarray
    r_code: np.ndarray  # index of each run's r within log_r_unique

    @classmethod
    def from_runs(cls, runs: Sequence) -> "RunData":
        if len(runs) == 0:
            raise UsageError("no runs supplied")
        n_once = np.empty(len(runs))
        n_rec = np.empty(len(runs))
        r = np.empty(len(runs))
        tokens = np.empty(len(runs))
        loss = np.empty(len(runs))
        for i, run in enumerate(runs):
            n_once[i], n_rec[i] = geometry.param_split(run.shape)
            r[i] = run.shape.r
            tokens[i] = run.tokens
            loss[i] = run.val_loss
        r_unique, r_code = np.unique(r, return_inverse=True)
        return cls(
            n_once=n_once,
            n_rec=n_rec,
            r=r,
            tokens=tokens,
            loss=loss,
            log_tokens=np.log(tokens),
            log_loss=np.log(loss),
            log_r_unique=np.log(r_unique),
            r_code=r_code,
        )

    @property
    def n_unique(self) -> np.ndarray:
        return self.n_once + self.n_rec

    def __len__(self) -> int:
        return len(self.loss)


# ---------------------------------------------------------------------------
# Law evaluation


def predict_loss(params: ChinchillaParams, n_once, n_rec, r, tokens):
    """Predicted loss in nats: ``E + A N_eff^-alpha + B D^-beta``.

    For plain ``ChinchillaParams`` the capacity term uses
    ``N = N_once + N_rec``; for ``JointParams`` it uses
    ``N_eff = N_once + r^phi N_rec``.  Scalar inputs give a scalar.
    """
    n_once_a = np.asarray(n_once, dtype=float)
    n_rec_a = np.asarray(n_rec, dtype=float)
    r_a = np.asarray(r, dtype=float)
    tokens_a = np.asarray(tokens, dtype=float)
    if np.any(n_once_a < 0) or np.any(n_rec_a < 0):
        raise ValueError("parameter counts must be >= 0")
    if np.any(n_once_a + n_rec_a <= 0):
        raise ValueError("N_once + N_rec must be > 0")
    if np.any(tokens_a <= 0):
        raise ValueError("token count must be > 0")
    if np.any(r_a < 1):
        raise ValueError("recurrence count must be >= 1")
    if isinstance(params, JointParams):
        n_eff = n_once_a + np.power(r_a, params.phi) * n_rec_a
    else:
        n_eff = n_once_a + n_rec_a
    # a or b may be -inf (term disabled); exp(-inf) = 0 does the right thing.
    with np.errstate(over="raise"):
        pred = (
            math.exp(params.e)
            + np.exp(params.a - params.alpha * np.log(n_eff))
            + np.exp(params.b - params.beta * np.log(tokens_a))
        )
    if np.isscalar(n_once) and np.isscalar(tokens) and np.ndim(pred) == 0:
        return float(pred)
    return pred


def huber(residual, delta: float):
    """Huber penalty and its derivative.

    ``value = r^2/2`` for ``|r| <= delta``, else ``delta (|r| - delta/2)``;
    the derivative is ``clip(r, -delta, delta)``.  Both branches agree at
    the boundary.  Accepts scalars or arrays.
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    res = np.asarray(residual, dtype=float)
    abs_r = np.abs(res)
    value = np.where(abs_r <= delta, 0.5 * res * res, delta * (abs_r - 0.5 * delta))
    deriv = np.clip(res, -delta, delta)
    if np.isscalar(residual):
        return float(value), float(deriv)
    return value, deriv


class _ObjectiveWorkspace:
    """Preallocated evaluation buffers for one fit's objective.

    The fit loop evaluates the objective thousands of times on batches of
    parameter vectors; reusing one set of scratch arrays (chunked so a
    chunk's buffers stay cache-resident) keeps the evaluation from being
    dominated by temporary allocation.

    When ``weights`` (one weight vector per row group) and ``row_group``
    (mapping parameter rows to weight rows) are given, each run's Huber
    term is multiplied by its weight.  An integer-weighted objective equals
    the objective over the correspondingly repeated runs, which is how
    bootstrap resamples share one data matrix.
    """

    CHUNK = 64

    def __init__(
        self,
        data: RunData,
        free_phi: bool,
        log_neff_fixed: np.ndarray | None,
        weights: np.ndarray | None = None,
        row_group: np.ndarray | None = None,
    ):
        self.data = data
        self.free_phi = free_phi
        self.log_neff_fixed = log_neff_fixed
        self.weights = weights
        self.row_group = row_group
        n = len(data)
        shape = (self.CHUNK, n)
        # Scratch matrices, reused across calls.
        names = ["x", "neff", "dx", "rpow", "t1", "t2", "m", "e1", "e2", "e3", "total", "u", "tmp", "w"]
        self._buf = {name: np.empty(shape) for name in names}
        self._rpow_small = np.empty((self.CHUNK, data.log_r_unique.size))
        self._log_r_full = data.log_r_unique[data.r_code]
        self._lr_nrec = self._log_r_full * data.n_rec  # log r * N_rec, reused

    def __call__(
        self, theta: np.ndarray, delta: float, rows_index: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        theta = np.atleast_2d(theta)
        rows = theta.shape[0]
        if self.weights is not None and rows_index is None:
            rows_index = np.arange(rows)
        f = np.empty(rows)
        g = np.empty_like(theta)
        for start in range(0, rows, self.CHUNK):
            stop = min(start + self.CHUNK, rows)
            rows_slice = None if rows_index is None else rows_index[start:stop]
            self._eval_chunk(theta[start:stop], delta, f[start:stop], g[start:stop], rows_slice)
        return f, g

    def _eval_chunk(
        self,
        theta: np.ndarray,
        delta: float,
        f: np.ndarray,
        g: np.ndarray,
        rows_slice: np.ndarray | None,
    ) -> None:
        data = self.data
        k = theta.shape[0]
        a = theta[:, 0:1]
        alpha = theta[:, 1:2]
        b = theta[:, 2:3]
        beta = theta[:, 3:4]
        e = theta[:, 4:5]
        log_d = data.log_tokens
        buf = {name: arr[:k] for name, arr in self._buf.items()}

        w = None
        if self.weights is not None:
            w = np.take(self.weights, self.row_group[rows_slice], axis=0, out=buf["w"])

        if self.free_phi:
            phi = theta[:, 5:6]
            # r takes a handful of distinct values; exponentiate those only.
            rp_small = self._rpow_small[:k]
            np.multiply(phi, data.log_r_unique[None, :], out=rp_small)
            np.exp(rp_small, out=rp_small)
            r_pow = np.take(rp_small, data.r_code, axis=1, out=buf["rpow"])
            neff = buf["neff"]
            np.multiply(r_pow, data.n_rec[None, :], out=neff)
            neff += data.n_once[None, :]
            dx = buf["dx"]
            np.multiply(r_pow, self._lr_nrec[None, :], out=dx)
            dx /= neff
            x = buf["x"]
            np.log(neff, out=x)
        else:
            x = self.log_neff_fixed[None, :]
            dx = None

        t1, t2, m = buf["t1"], buf["t2"], buf["m"]
        np.multiply(alpha, x, out=t1)
        np.subtract(a, t1, out=t1)
        np.multiply(beta, log_d[None, :], out=t2)
        np.subtract(b, t2, out=t2)
        np.maximum(t1, t2, out=m)
        np.maximum(m, e, out=m)

        e1, e2, e3, total = buf["e1"], buf["e2"], buf["e3"], buf["total"]
        np.subtract(t1, m, out=e1)
        np.exp(e1, out=e1)
        np.subtract(t2, m, out=e2)
        np.exp(e2, out=e2)
        np.subtract(e, m, out=e3)
        np.exp(e3, out=e3)
        np.add(e1, e2, out=total)
        total += e3

        u = buf["u"]
        np.log(total, out=u)
        u += m
        u -= data.log_loss[None, :]

        # Branchless Huber: with h = min(|u|, delta), both branches equal
        # h * (|u| - h/2), and the derivative is clip(u, -delta, delta).
        # t1/t2/m are free by now and serve as extra scratch.
        tmp = buf["tmp"]
        np.abs(u, out=tmp)
        np.minimum(tmp, delta, out=t1)  # h
        np.multiply(t1, 0.5, out=t2)
        np.subtract(tmp, t2, out=tmp)
        tmp *= t1
        if w is not None:
            tmp *= w
        np.sum(tmp, axis=1, out=f)

        hp = np.clip(u, -delta, delta, out=u)  # u no longer needed
        if w is not None:
            hp *= w
        np.divide(hp, total, out=hp)  # hp / (e1 + e2 + e3), shared by all weights
        np.multiply(hp, e1, out=e1)  # hw1
        np.multiply(hp, e2, out=e2)  # hw2
        np.multiply(hp, e3, out=e3)  # hw3
        np.sum(e1, axis=1, out=g[:, 0])
        np.multiply(e1, x, out=tmp)
        g[:, 1] = -np.sum(tmp, axis=1)
        np.sum(e2, axis=1, out=g[:, 2])
        np.multiply(e2, log_d[None, :], out=tmp)
        g[:, 3] = -np.sum(tmp, axis=1)
        np.sum(e3, axis=1, out=g[:, 4])
        if self.free_phi:
            np.multiply(e1, dx, out=tmp)
            g[:, 5] = -alpha[:, 0] * np.sum(tmp, axis=1)


def _objective_batch(
    theta: np.ndarray,
    data: RunData,
    delta: float,
    free_phi: bool,
    log_neff_fixed: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Objective and gradient for a batch of parameter vectors.

    ``theta`` has shape (K, 5) for fixed-capacity fits (Chinchilla, or joint
    with pinned phi, using the precomputed ``log_neff_fixed``) or (K, 6)
    with phi as the trailing coordinate.
    """
    ws = _ObjectiveWorkspace(data, free_phi, log_neff_fixed)
    return ws(np.atleast_2d(theta), delta)


def objective(
    params: ChinchillaParams, runs: Sequence, delta: float = 1e-3
) -> tuple[float, np.ndarray]:
    """Huber-on-log objective and its analytic gradient at ``params``.

    The gradient is ordered (a, alpha, b, beta, e) for Chinchilla
    parameters and (a, alpha, b, beta, e, phi) for joint parameters.
    """
    data = RunData.from_runs(runs)
    if isinstance(params, JointParams):
        theta = np.array([[params.a, params.alpha, params.b, params.beta, params.e, params.phi]])
        f, g = _objective_batch(theta, data, delta, free_phi=True, log_neff_fixed=None)
    else:
        theta = np.array([[params.a, params.alpha, params.b, params.beta, params.e]])
        log_neff = np.log(data.n_unique)
        f, g = _objective_batch(theta, data, delta, free_phi=False, log_neff_fixed=log_neff)
    return float(f[0]), g[0]


def r_squared(params: ChinchillaParams, runs: Sequence) -> float:
    """Coefficient of determination on raw nats (not log)."""
    data = RunData.from_runs(runs)
    if np.unique(data.loss).size < 2:
        raise UsageError("r_squared undefined: all losses identical (zero variance)")
    pred = predict_loss(params, data.n_once, data.n_rec, data.r, data.tokens)
    ss_res = float(np.sum((data.loss - pred) ** 2))
    ss_tot = float(np.sum((data.loss - data.loss.mean()) ** 2))
    return 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------------------
# Bounded minimization: projected limited-memory quasi-Newton
#
# Directions come from the standard L-BFGS two-loop recursion (memory depth
# 10); iterates stay inside the box via gradient projection with a
# backtracking Armijo line search on the projected path.  The whole restart
# batch is advanced in lockstep so the per-iteration numpy cost is shared
# across restarts.


@dataclass(frozen=True)
class MinimizeOutcome:
    x: np.ndarray
    fun: float
    status: str  # gradient | step | max_iter
    n_iter: int


def _projected_grad_norm(x: np.ndarray, g: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    step = np.clip(x - g, lo, hi) - x
    return np.abs(step).max(axis=-1)


def _minimize_batch(
    fun_batch: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]],
    x0: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    max_iter: int,
    grad_tol: float,
    step_tol: float,
    memory: int = 10,
) -> tuple[np.ndarray, np.ndarray, list[str], np.ndarray]:
    """Minimize a batch of independent problems sharing one objective family.

    ``fun_batch(xs, rows)`` evaluates parameter vectors ``xs`` belonging to
    the original batch rows ``rows`` (so weighted objectives can look up
    per-row data).  Returns (x, f, status, n_iter) per batch row.  Rows are
    advanced in lockstep and frozen once converged; every update is
    row-local, so results are identical to running each row separately.
    """
    x = np.clip(np.asarray(x0, dtype=float), lo, hi).copy()
    n_prob, dim = x.shape
    all_rows = np.arange(n_prob)
    f, g = fun_batch(x, all_rows)
    if not np.all(np.isfinite(f)):
        raise NumericError("objective returned a non-finite value at a start point")

    status = np.zeros(n_prob, dtype=np.int8)  # 0 max_iter, 1 gradient, 2 step
    n_iter = np.zeros(n_prob, dtype=int)
    s_buf = np.zeros((memory, n_prob, dim))
    y_buf = np.zeros((memory, n_prob, dim))
    rho = np.zeros((memory, n_prob))
    gamma = np.ones(n_prob)
    stall = np.zeros(n_prob, dtype=int)  # consecutive iterations without progress

    active = _projected_grad_norm(x, g, lo, hi) >= grad_tol
    status[~active] = 1

    for it in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa, fa, ga = x[idx], f[idx], g[idx]

        # Two-loop recursion over the shared circular history (one gather of
        # the whole history per iteration; slot access is then a view).
        depth = min(it, memory)
        q = ga.copy()
        alphas = np.empty((depth, idx.size))
        slots = [(it - 1 - j) % memory for j in range(depth)]
        if depth:
            s_hist = s_buf[:, idx]
            y_hist = y_buf[:, idx]
            rho_hist = rho[:, idx]
        for j, slot in enumerate(slots):
            al = rho_hist[slot] * np.einsum("kp,kp->k", s_hist[slot], q)
            alphas[j] = al
            q -= al[:, None] * y_hist[slot]
        z = gamma[idx, None] * q
        for j in range(depth - 1, -1, -1):
            slot = slots[j]
            be = rho_hist[slot] * np.einsum("kp,kp->k", y_hist[slot], z)
            z += s_hist[slot] * (alphas[j] - be)[:, None]
        d = -z

        # Fall back to steepest descent where the direction is not a descent
        # direction (stale curvature).
        descent = np.einsum("kp,kp->k", ga, d)
        bad = ~(descent < 0)
        if bad.any():
            d[bad] = -ga[bad]
            descent[bad] = -np.einsum("kp,kp->k", ga[bad], ga[bad])

        # Backtracking Armijo search along the projected path, shrinking by
        # quadratic interpolation of the 1-d profile (safeguarded to
        # [0.1 t, 0.5 t]).
        if it == 0:
            t = 1.0 / np.maximum(1.0, np.abs(ga).max(axis=1))
        else:
            t = np.ones(idx.size)
        accepted = np.zeros(idx.size, dtype=bool)
        x_new = xa.copy()
        f_new = fa.copy()
        g_new = ga.copy()
        for _ in range(_MAX_BACKTRACKS):
            trial = np.flatnonzero(~accepted)
            if trial.size == 0:
                break
            xc = np.clip(xa[trial] + t[trial, None] * d[trial], lo, hi)
            fc, gc = fun_batch(xc, idx[trial])
            gain = np.einsum("kp,kp->k", ga[trial], xc - xa[trial])
            ok = np.isfinite(fc) & (fc <= fa[trial] + _C1_ARMIJO * gain)
            hit = trial[ok]
            x_new[hit] = xc[ok]
            f_new[hit] = fc[ok]
            g_new[hit] = gc[ok]
            accepted[hit] = True
            miss = trial[~ok]
            if miss.size:
                slope = descent[miss] * t[miss]
                denom = fc[~ok] - fa[miss] - slope
                with np.errstate(invalid="ignore", divide="ignore"):
                    t_quad = -0.5 * slope * t[miss] / denom
                shrink = np.where(
                    np.isfinite(t_quad), np.clip(t_quad, 0.1 * t[miss], 0.5 * t[miss]),
                    0.5 * t[miss],
                )
                t[miss] = shrink

        stalled = ~accepted  # no acceptable step: treat as a vanishing step

        # Curvature pairs (skip when s.y is not safely positive).
        s_step = x_new - xa
        y_step = g_new - ga
        sy = np.einsum("kp,kp->k", s_step, y_step)
        ss = np.einsum("kp,kp->k", s_step, s_step)
        yy = np.einsum("kp,kp->k", y_step, y_step)
        valid = accepted & (sy > 1e-12 * np.sqrt(ss * yy) + 0.0) & (sy > 0)
        slot = it % memory
        s_buf[slot, idx] = np.where(valid[:, None], s_step, 0.0)
        y_buf[slot, idx] = np.where(valid[:, None], y_step, 0.0)
        rho[slot, idx] = np.where(valid, 1.0 / np.where(valid, sy, 1.0), 0.0)
        gamma[idx] = np.where(valid, sy / np.where(yy > 0, yy, 1.0), gamma[idx])

        progress = (fa - f_new) > step_tol * np.maximum(1.0, np.abs(f_new))
        stall[idx] = np.where(progress, 0, stall[idx] + 1)

        x[idx], f[idx], g[idx] = x_new, f_new, g_new
        n_iter[idx] = it + 1

        # Termination per row.  Objective progress stalling at the step_tol
        # scale for many consecutive iterations counts as a vanishing step.
        pg = _projected_grad_norm(x_new, g_new, lo, hi)
        rel_step = np.abs(s_step).max(axis=1) / np.maximum(1.0, np.abs(x_new).max(axis=1))
        done_grad = pg < grad_tol
        done_step = stalled | (rel_step < step_tol) | (stall[idx] >= _MAX_STALL)
        status[idx[done_step & ~done_grad]] = 2
        status[idx[done_grad]] = 1
        active[idx[done_grad | done_step]] = False

    labels = ("max_iter", "gradient", "step")
    return x, f, [labels[code] for code in status], n_iter


def minimize_bounded(
    fun_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    bounds: tuple[np.ndarray, np.ndarray],
    x0: np.ndarray,
    config: FitConfig,
) -> MinimizeOutcome:
    """Minimize a single objective-with-gradient inside a box.

    ``fun_and_grad`` maps a parameter vector to ``(value, gradient)``.
    Raises ``UsageError`` when ``x0`` lies outside the box and
    ``NumericError`` when the objective is non-finite at ``x0``.  The
    returned status reports which stopping rule fired (``gradient``,
    ``step`` or ``max_iter``); the result never exceeds the start value.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    x0 = np.asarray(x0, dtype=float)
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise UsageError("start point lies outside the bound box")

    def batch(xs: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        fs = np.empty(xs.shape[0])
        gs = np.empty_like(xs)
        for i, xi in enumerate(xs):
            fi, gi = fun_and_grad(xi)
            fs[i] = fi
            gs[i] = np.asarray(gi, dtype=float)
        return fs, gs

    f0, _ = fun_and_grad(x0)
    if not np.isfinite(f0):
        raise NumericError("objective is non-finite at the start point")
    xs, fs, statuses, iters = _minimize_batch(
        batch, x0[None, :], lo, hi, config.max_iter, config.grad_tol, config.step_tol
    )
    if fs[0] > f0:  # defensive; the line search never accepts an increase
        return MinimizeOutcome(x=x0, fun=float(f0), status=statuses[0], n_iter=int(iters[0]))
    return MinimizeOutcome(x=xs[0], fun=float(fs[0]), status=statuses[0], n_iter=int(iters[0]))


# ---------------------------------------------------------------------------
# Multi-restart fits


def _check_identifiable(data: RunData, min_runs: int, need_r: bool) -> None:
    if len(data) < min_runs:
        raise UsageError(f"need at least {min_runs} runs, got {len(data)}")
    if np.unique(data.n_unique).size < 2:
        raise UsageError("runs must span more than one distinct parameter count")
    if np.unique(data.tokens).size < 2:
        raise UsageError("runs must span more than one distinct token count")
    if need_r and np.unique(data.r).size < 2:
        raise UsageError(
            "free-phi fit needs runs spanning more than one recurrence count "
            "(r^phi is constant otherwise)"
        )


def _run_restarts(
    data: RunData,
    config: FitConfig,
    bounds: FitBounds,
    free_phi: bool,
    log_neff_fixed: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    lo, hi = bounds.arrays(include_phi=free_phi)
    rng = np.random.default_rng(config.seed)
    starts = rng.uniform(lo, hi, size=(config.restarts, lo.size))

    workspace = _ObjectiveWorkspace(data, free_phi, log_neff_fixed)

    def batch(xs: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return workspace(xs, config.huber_delta)

    xs, fs, statuses, _ = _minimize_batch(
        batch, starts, lo, hi, config.max_iter, config.grad_tol, config.step_tol
    )
    return xs, fs, statuses


def _pick_winner(fs: np.ndarray) -> int:
    fs = np.where(np.isfinite(fs), fs, np.inf)
    if not np.isfinite(fs).any():
        raise NumericError("every restart failed to produce a finite objective")
    return int(np.argmin(fs))  # argmin takes the lowest index on exact ties


def fit_chinchilla(runs: Sequence, config: FitConfig, bounds: FitBounds | None = None) -> FitResult:
    """Fit the Chinchilla law by the multi-restart protocol.

    Requires at least 6 runs spanning more than one distinct N and D.
    Deterministic given the run order and ``config.seed``; the restart with
    the lowest objective wins, ties broken by lowest restart index.
    """
    bounds = bounds or FitBounds()
    data = RunData.from_runs(runs)
    _check_identifiable(data, min_runs=6, need_r=False)
    log_neff = np.log(data.n_unique)
    xs, fs, statuses = _run_restarts(data, config, bounds, free_phi=False, log_neff_fixed=log_neff)
    win = _pick_winner(fs)
    params = ChinchillaParams(*(float(v) for v in xs[win]))
    return FitResult(
        params=params,
        objective=float(fs[win]),
        r2=r_squared(params, runs),
        n_runs=len(data),
        restart_objectives=fs,
        winning_restart_index=win,
        status=statuses[win],
    )


def fit_joint_free_weighted(
    data: RunData,
    weights: np.ndarray,
    seeds: Sequence[int],
    config: FitConfig,
    bounds: FitBounds | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Free-phi joint fits of many weighted views of one run table.

    Each row of ``weights`` defines one fit whose objective multiplies run
    i's Huber term by ``weights[b, i]``; with integer weights this equals a
    fit on the correspondingly repeated runs, which is exactly a bootstrap
    resample.  All fits advance in one lockstep minimizer batch, so the
    resample loop costs little more than one large fit.  Group b's restarts
    are drawn from a generator seeded with ``seeds[b]``, identical to what
    a standalone fit with that seed would draw; winners follow the usual
    lowest-objective, lowest-index rule.

    Returns per-group arrays (phi, objective).
    """
    bounds = bounds or FitBounds()
    lo, hi = bounds.arrays(include_phi=True)
    n_groups = weights.shape[0]
    if len(seeds) != n_groups:
        raise UsageError("need exactly one seed per weight row")
    restarts = config.restarts
    starts = np.empty((n_groups * restarts, lo.size))
    for b, seed in enumerate(seeds):
        rng = np.random.default_rng(int(seed))
        starts[b * restarts : (b + 1) * restarts] = rng.uniform(lo, hi, (restarts, lo.size))
    row_group = np.repeat(np.arange(n_groups), restarts)
    workspace = _ObjectiveWorkspace(
        data, free_phi=True, log_neff_fixed=None, weights=weights, row_group=row_group
    )

    def batch(xs: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return workspace(xs, config.huber_delta, rows)

    xs, fs, _, _ = _minimize_batch(
        batch, starts, lo, hi, config.max_iter, config.grad_tol, config.step_tol
    )
    fs = np.where(np.isfinite(fs), fs, np.inf)
    phis = np.empty(n_groups)
    objs = np.empty(n_groups)
    for b in range(n_groups):
        segment = fs[b * restarts : (b + 1) * restarts]
        if not np.isfinite(segment).any():
            raise NumericError(f"weighted fit group {b}: every restart failed")
        win = int(np.argmin(segment))
        phis[b] = xs[b * restarts + win, 5]
        objs[b] = segment[win]
    return phis, objs


def fit_joint(
    runs: Sequence,
    config: FitConfig,
    phi: Literal["free"] | float = "free",
    bounds: FitBounds | None = None,
) -> FitResult:
    """Fit the joint recurrence law.

    ``phi="free"`` optimizes all six coordinates and requires runs spanning
    more than one distinct recurrence count; a numeric ``phi`` pins the
    exponent and optimizes the remaining five.
    """
    bounds = bounds or FitBounds()
    data = RunData.from_runs(runs)
    if phi == "free":
        _check_identifiable(data, min_runs=6, need_r=True)
        xs, fs, statuses = _run_restarts(data, config, bounds, free_phi=True, log_neff_fixed=None)
        win = _pick_winner(fs)
        params = JointParams(*(float(v) for v in xs[win]))
    else:
        phi_value = float(phi)
        if not math.isfinite(phi_value):
            raise UsageError(f"fixed phi must be finite, got {phi!r}")
        _check_identifiable(data, min_runs=6, need_r=False)
        log_neff = np.log(data.n_once + np.power(data.r, phi_value) * data.n_rec)
        xs, fs, statuses = _run_restarts(
            data, config, bounds, free_phi=False, log_neff_fixed=log_neff
        )
        win = _pick_winner(fs)
        a, alpha, b, beta, e = (float(v) for v in xs[win])
        params = JointParams(a=a, alpha=alpha, b=b, beta=beta, e=e, phi=phi_value)
    return FitResult(
        params=params,
        objective=float(fs[win]),
        r2=r_squared(params, runs),
        n_runs=len(data),
        restart_objectives=fs,
        winning_restart_index=win,
        status=statuses[win],
    )
