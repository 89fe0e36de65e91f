"""Parameter and FLOPs accounting for prelude-recur-coda transformers.

A looped model executes ``n_prelude`` entry layers once, a shared block of
``n_recur`` layers ``r`` times (each pass preceded by an injection step),
and ``n_coda`` exit layers once, for an effective depth
``l_eff = n_prelude + r * n_recur + n_coda``.  All counting here is in terms
of the per-block projection parameters ``n_b = 12 d^2`` (four d x d attention
projections plus the d -> 4d -> d MLP) and the linear-injection parameters
``n_i = 2 d^2``.

Two FLOPs conventions are supported:

* ``PARAMETER_ONLY``: the standard 2N forward / 6N training rule over the
  executed non-embedding parameters.
* ``EMPIRICAL``: additionally counts attention-score FLOPs (``4 T d`` per
  executed transformer layer at full context length ``T``) and the
  unembedding matmul (``2 d V``), with the embedding lookup excluded.  This
  calibrated convention reproduces the token budgets used by the reference
  iso-depth sweep at the anchor cells (955M / 973M tokens at 1e18 FLOPs,
  width 640) and is the convention meant whenever "empirical per-token
  FLOPs" are mentioned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .errors import ShapeError

WIDTH_PER_SCALE = 64
DEFAULT_L_EFF = 20
DEFAULT_N_PRELUDE = 2
DEFAULT_N_CODA = 2
DEFAULT_VOCAB = 32064
DEFAULT_SEQ_LEN = 2048


class FlopsConvention(Enum):
    """Per-token FLOPs accounting mode."""

    PARAMETER_ONLY = "parameter_only"
    EMPIRICAL = "empirical"

    @classmethod
    def parse(cls, text: str) -> "FlopsConvention":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ShapeError(
                f"unknown FLOPs convention {text!r}; expected "
                f"'parameter_only' or 'empirical'"
            ) from None


@dataclass(frozen=True)
class Injection:
    """How the recurrent state is combined with the prelude output.

    ``kind`` is one of ``none`` (r=1 baseline), ``linear`` (a d x 2d map,
    2 d^2 parameters per model) or ``hyper`` (``lanes`` parallel residual
    lanes mixed by r * (K^2 + 2K) learned scalars).
    """

    kind: str
    lanes: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "linear", "hyper"):
            raise ShapeError(f"unknown injection kind {self.kind!r}")
        if self.kind == "hyper" and self.lanes < 1:
            raise ShapeError("hyperconnection injection requires lanes >= 1")
        if self.kind != "hyper" and self.lanes:
            raise ShapeError(f"injection {self.kind!r} takes no lane count")

    @classmethod
    def parse(cls, text: str) -> "Injection":
        """Parse the run-file encoding: ``none``, ``linear`` or ``hyper:<K>``."""
        text = text.strip().lower()
        if text in ("none", "linear"):
            return cls(text)
        if text.startswith("hyper:"):
            try:
                return cls("hyper", int(text.split(":", 1)[1]))
            except ValueError:
                raise ShapeError(f"bad hyperconnection lane count in {text!r}") from None
        raise ShapeError(f"unknown injection {text!r}; expected none, linear or hyper:<K>")

    def __str__(self) -> str:
        return f"hyper:{self.lanes}" if self.kind == "hyper" else self.kind


NO_INJECTION = Injection("none")
LINEAR_INJECTION = Injection("linear")


@dataclass(frozen=True)
class TrainingRecipe:
    """Backpropagation schedule: full BPTT, or truncated to the last
    ``r_bwd`` recurrences (earlier iterations run forward-only).

    ``r_bwd=None`` on a truncated recipe means the default window
    ``ceil(r / 2)``, resolved against the shape it is applied to.
    """

    bptt: str = "full"
    r_bwd: int | None = None

    def __post_init__(self) -> None:
        if self.bptt not in ("full", "trunc"):
            raise ShapeError(f"unknown bptt mode {self.bptt!r}; expected 'full' or 'trunc'")
        if self.bptt == "full" and self.r_bwd is not None:
            raise ShapeError("full BPTT takes no r_bwd")
        if self.bptt == "trunc" and self.r_bwd is not None and self.r_bwd < 1:
            raise ShapeError("truncated BPTT requires r_bwd >= 1")

    @property
    def truncated(self) -> bool:
        return self.bptt == "trunc"

    def resolve_r_bwd(self, r: int) -> int:
        """Gradient-window size for recurrence count ``r`` (default ceil(r/2))."""
        r_bwd = self.r_bwd if self.r_bwd is not None else -(-r // 2)
        if not 1 <= r_bwd <= r:
            raise ShapeError(f"r_bwd={r_bwd} outside [1, r={r}]")
        return r_bwd


FULL_BPTT = TrainingRecipe("full")


def truncated_bptt(r_bwd: int | None = None) -> TrainingRecipe:
    return TrainingRecipe("trunc", r_bwd)


@dataclass(frozen=True)
class ModelShape:
    """Architecture geometry of one prelude-recur-coda model.

    Width is parameterised as ``d_model = 64 * s`` for an integer scale
    factor ``s``.  For ``r > 1`` the shared block has
    ``(l_eff - n_prelude - n_coda) / r`` layers, which must divide evenly;
    ``r = 1`` is the non-looped baseline and carries no injection.
    """

    r: int
    s: int
    l_eff: int = DEFAULT_L_EFF
    n_prelude: int = DEFAULT_N_PRELUDE
    n_coda: int = DEFAULT_N_CODA
    injection: Injection = field(default=None)  # type: ignore[assignment]
    vocab: int = DEFAULT_VOCAB
    seq_len: int = DEFAULT_SEQ_LEN

    def __post_init__(self) -> None:
        if self.injection is None:
            object.__setattr__(
                self, "injection", NO_INJECTION if self.r == 1 else LINEAR_INJECTION
            )
        if self.r < 1:
            raise ShapeError(f"recurrence count r={self.r} must be >= 1")
        if self.s < 1:
            raise ShapeError(f"width scale s={self.s} must be >= 1")
        if self.n_prelude < 0 or self.n_coda < 0:
            raise ShapeError("prelude/coda layer counts must be >= 0")
        body = self.l_eff - self.n_prelude - self.n_coda
        if body < 1:
            raise ShapeError(
                f"l_eff={self.l_eff} leaves no recurrent layers after "
                f"prelude={self.n_prelude} and coda={self.n_coda}"
            )
        if self.r > 1 and body % self.r != 0:
            raise ShapeError(
                f"(l_eff - n_prelude - n_coda) = {body} not divisible by r = {self.r}"
            )
        if self.r == 1 and self.injection.kind != "none":
            raise ShapeError("r = 1 implies no injection layer")
        if self.r > 1 and self.injection.kind == "none":
            raise ShapeError("r > 1 requires an injection variant (linear or hyper:<K>)")
        if self.vocab < 1 or self.seq_len < 1:
            raise ShapeError("vocab and seq_len must be positive")

    @property
    def d_model(self) -> int:
        return WIDTH_PER_SCALE * self.s

    @property
    def n_recur(self) -> int:
        body = self.l_eff - self.n_prelude - self.n_coda
        return body // self.r if self.r > 1 else body

    @property
    def partition(self) -> tuple[int, int, int]:
        return (self.n_prelude, self.n_recur, self.n_coda)

    @property
    def unique_blocks(self) -> int:
        return self.n_prelude + self.n_recur + self.n_coda


def block_params(d_model: float) -> float:
    """Non-embedding parameters of one transformer block: ``12 d^2``."""
    if d_model <= 0:
        raise ValueError(f"d_model={d_model} must be positive")
    return 12 * d_model * d_model


def injection_params(d_model: float) -> float:
    """Parameters of the linear input-injection layer: ``2 d^2``."""
    if d_model <= 0:
        raise ValueError(f"d_model={d_model} must be positive")
    return 2 * d_model * d_model


def mixing_params(r: int, lanes: int) -> int:
    """Hyperconnection mixing scalars across all iterations: ``r (K^2 + 2K)``."""
    return r * (lanes * lanes + 2 * lanes)


def _injection_unique_params(d: float, r: int, injection: Injection) -> float:
    if injection.kind == "linear":
        return injection_params(d)
    if injection.kind == "hyper":
        return mixing_params(r, injection.lanes)
    return 0.0


def params_at_width(
    d: float, r: int, partition: tuple[int, int, int], injection: Injection
) -> tuple[float, float]:
    """(N_once, N_rec) at an arbitrary (possibly non-integer) width ``d``.

    ``N_once = (n_prelude + n_coda) n_b`` covers the once-executed layers;
    ``N_rec = n_recur n_b`` plus the injection's unique parameters covers the
    shared block.  At r = 1 there is no injection and the split is simply
    once-executed entry/exit layers versus the remaining body.
    """
    n_prelude, n_recur, n_coda = partition
    nb = block_params(d)
    n_once = (n_prelude + n_coda) * nb
    n_rec = n_recur * nb
    if r > 1:
        n_rec += _injection_unique_params(d, r, injection)
    return n_once, n_rec


def unique_params(shape: ModelShape) -> float:
    """Unique non-embedding parameter count N.

    ``N = (n_prelude + n_recur + n_coda) n_b + n_i`` for looped shapes (the
    shared block is counted once regardless of reuse); ``N = l_eff * n_b``
    for the r = 1 baseline.  Hyperconnection shapes carry ``r (K^2 + 2K)``
    mixing scalars in place of the injection matrix.
    """
    n_once, n_rec = params_at_width(shape.d_model, shape.r, shape.partition, shape.injection)
    return n_once + n_rec


def param_split(shape: ModelShape) -> tuple[float, float]:
    """Split N into (N_once, N_rec); always sums to ``unique_params(shape)``."""
    return params_at_width(shape.d_model, shape.r, shape.partition, shape.injection)


def norm_scale_params(shape: ModelShape) -> float:
    """Learnable RMSNorm scale parameters.

    Two per unique block (pre-attention and pre-MLP) plus the model-level
    norms on the residual stream: one after the token embedding, one before
    the unembedding, and, for looped shapes, one shared norm closing each
    recurrence iteration.
    """
    d = shape.d_model
    model_level = 2 if shape.r == 1 else 3
    return (2 * shape.unique_blocks + model_level) * d


def realized_params(shape: ModelShape) -> float:
    """Unique parameter count as realized by an actual instantiation,
    i.e. ``unique_params`` plus the learnable norm scales.  This is the
    count that parameter tables logged from real models report; the norm
    term is below 0.06% of N everywhere on the reference grid but moves
    the last printed digit at large widths.
    """
    return unique_params(shape) + norm_scale_params(shape)


def _injection_forward_flops(d: float, r: int, injection: Injection) -> float:
    # Linear injection is a dense matmul (2 FLOPs per weight); hyperconnection
    # mixing costs r (K^2 + 2K) d per token in total.
    if injection.kind == "linear":
        return 2 * r * injection_params(d)
    if injection.kind == "hyper":
        return mixing_params(r, injection.lanes) * d
    return 0.0


def forward_flops_at_width(
    d: float,
    r: int,
    partition: tuple[int, int, int],
    injection: Injection,
    convention: FlopsConvention,
    seq_len: int = DEFAULT_SEQ_LEN,
    vocab: int = DEFAULT_VOCAB,
) -> float:
    """Per-token forward FLOPs at an arbitrary width."""
    n_prelude, n_recur, n_coda = partition
    l_eff = n_prelude + r * n_recur + n_coda if r > 1 else n_prelude + n_recur + n_coda
    flops = 2 * l_eff * block_params(d)
    if r > 1:
        flops += _injection_forward_flops(d, r, injection)
    if convention is FlopsConvention.EMPIRICAL:
        flops += 4 * seq_len * d * l_eff  # attention scores + mixing, full context
        flops += 2 * d * vocab  # unembedding matmul
    return flops


def forward_flops_per_token(shape: ModelShape, convention: FlopsConvention) -> float:
    """Per-token forward FLOPs.

    Parameter-only: ``2 [l_eff n_b + r n_i]`` (no injection term at r = 1),
    so all recurrence counts match up to an injection overhead of ``r/120``
    at the default 20-layer partition.  Empirical additionally counts
    attention scores and the unembedding (see module docstring).
    """
    return forward_flops_at_width(
        shape.d_model,
        shape.r,
        shape.partition,
        shape.injection,
        convention,
        shape.seq_len,
        shape.vocab,
    )


def injection_overhead(shape: ModelShape) -> float:
    """Relative forward-FLOPs overhead of the injection under the
    parameter-only convention (``r/120`` for linear injection at the
    default partition); 0 for the r = 1 baseline."""
    base = 2 * shape.l_eff * block_params(shape.d_model)
    extra = _injection_forward_flops(shape.d_model, shape.r, shape.injection) if shape.r > 1 else 0.0
    return extra / base


def _recurrent_iteration_forward_flops(
    d: float,
    r: int,
    partition: tuple[int, int, int],
    injection: Injection,
    convention: FlopsConvention,
    seq_len: int,
) -> float:
    """Forward cost of one recurrent iteration: its injection step plus its
    ``n_recur`` layers (including their attention under the empirical
    convention)."""
    n_recur = partition[1]
    flops = 2 * n_recur * block_params(d) + _injection_forward_flops(d, 1, injection)
    if convention is FlopsConvention.EMPIRICAL:
        flops += 4 * seq_len * d * n_recur
    return flops


def train_flops_at_width(
    d: float,
    r: int,
    partition: tuple[int, int, int],
    injection: Injection,
    recipe: TrainingRecipe,
    convention: FlopsConvention,
    seq_len: int = DEFAULT_SEQ_LEN,
    vocab: int = DEFAULT_VOCAB,
) -> float:
    """Per-token training FLOPs at an arbitrary width."""
    fwd = forward_flops_at_width(d, r, partition, injection, convention, seq_len, vocab)
    if not recipe.truncated:
        return 3 * fwd
    if r == 1:
        raise ShapeError("truncated BPTT requires r > 1")
    r_bwd = recipe.resolve_r_bwd(r)
    # Detached iterations pay forward cost only: subtract their backward
    # share (2x forward) from the full 3x-forward training cost.  In the
    # parameter-only convention this reduces to
    #   (2 (r - r_bwd) + 6 r_bwd) (n_recur n_b + n_i) + 6 (n_prelude + n_coda) n_b.
    per_iter = _recurrent_iteration_forward_flops(d, r, partition, injection, convention, seq_len)
    return 3 * fwd - 2 * per_iter * (r - r_bwd)


def train_flops_per_token(
    shape: ModelShape, recipe: TrainingRecipe, convention: FlopsConvention
) -> float:
    """Per-token training FLOPs: ``3 F_fwd`` under full BPTT, reduced by the
    skipped backward passes under truncation."""
    return train_flops_at_width(
        shape.d_model,
        shape.r,
        shape.partition,
        shape.injection,
        recipe,
        convention,
        shape.seq_len,
        shape.vocab,
    )


def tokens_for_budget(
    budget: float,
    shape: ModelShape,
    recipe: TrainingRecipe = FULL_BPTT,
    convention: FlopsConvention = FlopsConvention.EMPIRICAL,
) -> float:
    """Training tokens D = C / F_train affordable at compute budget C.

    Returned as a real number of tokens; callers may round to steps.
    """
    if budget <= 0:
        raise ValueError(f"budget={budget} must be positive")
    return budget / train_flops_per_token(shape, recipe, convention)


def width_from_unique_params(
    n_params: float,
    r: int,
    partition: tuple[int, int, int],
    injection: Injection | None = None,
) -> float:
    """Positive real width d solving ``unique_params = N`` for the given
    partition (inverse of the counting formula, used by the continuous
    allocation search).  Round-trips with ``params_at_width`` exactly at
    integer widths.
    """
    if n_params <= 0:
        raise ValueError(f"parameter count N={n_params} must be positive")
    if injection is None:
        injection = NO_INJECTION if r == 1 else LINEAR_INJECTION
    n_prelude, n_recur, n_coda = partition
    blocks = n_prelude + n_recur + n_coda
    quad = 12.0 * blocks  # coefficient of d^2 from the block projections
    if r > 1 and injection.kind == "linear":
        quad += 2.0
    if r > 1 and injection.kind == "hyper":
        n_params = n_params - mixing_params(r, injection.lanes)
        if n_params <= 0:
            raise ValueError("parameter count below the hyperconnection mixing scalars")
    return math.sqrt(n_params / quad)
