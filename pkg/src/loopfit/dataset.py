"""Run-record ingestion, iso-compute grid planning and synthetic-run generation.

Run files are comma-separated with a mandatory header row::

    r,s,l_eff,n_prelude,n_coda,injection,bptt,r_bwd,budget_flops,tokens,val_loss,variant

``injection`` is ``none``, ``linear`` or ``hyper:<K>``; ``bptt`` is ``full``
or ``trunc`` (``r_bwd`` empty for full, optionally empty for trunc meaning
the default window ceil(r/2)).  An equivalent JSON form, a list of objects
using the same field names (optionally wrapped as ``{"runs": [...]}``), is
accepted as the structured format.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from . import geometry
from .errors import DataError, UsageError
from .fitter import JointParams, predict_loss
from .geometry import (
    FlopsConvention,
    Injection,
    ModelShape,
    TrainingRecipe,
    FULL_BPTT,
)

RUN_COLUMNS = (
    "r",
    "s",
    "l_eff",
    "n_prelude",
    "n_coda",
    "injection",
    "bptt",
    "r_bwd",
    "budget_flops",
    "tokens",
    "val_loss",
    "variant",
)


@dataclass(frozen=True)
class RunRecord:
    """One training run: architecture, recipe, compute budget, realized
    tokens, and the measured validation loss in nats."""

    shape: ModelShape
    recipe: TrainingRecipe
    budget: float
    tokens: float
    val_loss: float
    variant: str = ""

    def __post_init__(self) -> None:
        if not (math.isfinite(self.budget) and self.budget > 0):
            raise ValueError(f"budget={self.budget} must be finite and > 0")
        if not (math.isfinite(self.tokens) and self.tokens > 0):
            raise ValueError(f"tokens={self.tokens} must be finite and > 0")
        if not (math.isfinite(self.val_loss) and self.val_loss > 0):
            raise ValueError(f"val_loss={self.val_loss} must be finite and > 0")

    def budget_mismatch(self, convention: FlopsConvention = FlopsConvention.EMPIRICAL) -> float:
        """Relative gap |D * F_train - C| / C under the given convention."""
        spent = self.tokens * geometry.train_flops_per_token(self.shape, self.recipe, convention)
        return abs(spent - self.budget) / self.budget

    def is_budget_consistent(
        self,
        convention: FlopsConvention = FlopsConvention.EMPIRICAL,
        tolerance: float = 0.02,
    ) -> bool:
        return self.budget_mismatch(convention) <= tolerance


@dataclass(frozen=True)
class GridCell:
    """One planned (shape, budget) cell with its derived N and D."""

    shape: ModelShape
    recipe: TrainingRecipe
    budget: float
    n_unique: float
    tokens: float


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground truth and noise model for synthetic run generation.

    Losses are drawn as ``L = L_truth * exp(noise_sigma * z)`` with z
    standard normal from a PCG64 generator seeded with ``seed`` (log-normal
    multiplicative noise, additive on log L).
    """

    truth: JointParams
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


# ---------------------------------------------------------------------------
# Parsing


def _parse_row(row: dict, row_label: str) -> RunRecord:
    def get(fieldname: str) -> str:
        value = row.get(fieldname)
        if value is None:
            raise DataError(f"{row_label}: missing field {fieldname!r}")
        return str(value).strip()

    def parse_int(fieldname: str) -> int:
        raw = get(fieldname)
        try:
            return int(raw)
        except ValueError:
            raise DataError(f"{row_label}: field {fieldname!r}: not an integer: {raw!r}") from None

    def parse_float(fieldname: str) -> float:
        raw = get(fieldname)
        try:
            return float(raw)
        except ValueError:
            raise DataError(f"{row_label}: field {fieldname!r}: not a number: {raw!r}") from None

    try:
        injection = Injection.parse(get("injection"))
    except ValueError as exc:
        raise DataError(f"{row_label}: field 'injection': {exc}") from None

    bptt = get("bptt").lower()
    r_bwd_raw = str(row.get("r_bwd") or "").strip()
    try:
        if bptt == "full":
            if r_bwd_raw:
                raise ValueError("r_bwd must be empty for full BPTT")
            recipe = FULL_BPTT
        elif bptt == "trunc":
            recipe = TrainingRecipe("trunc", int(r_bwd_raw) if r_bwd_raw else None)
        else:
            raise ValueError(f"unknown bptt mode {bptt!r}")
    except ValueError as exc:
        raise DataError(f"{row_label}: field 'bptt'/'r_bwd': {exc}") from None

    try:
        shape = ModelShape(
            r=parse_int("r"),
            s=parse_int("s"),
            l_eff=parse_int("l_eff"),
            n_prelude=parse_int("n_prelude"),
            n_coda=parse_int("n_coda"),
            injection=injection,
        )
        if recipe.truncated:
            recipe.resolve_r_bwd(shape.r)
        return RunRecord(
            shape=shape,
            recipe=recipe,
            budget=parse_float("budget_flops"),
            tokens=parse_float("tokens"),
            val_loss=parse_float("val_loss"),
            variant=str(row.get("variant") or "").strip(),
        )
    except DataError:
        raise
    except ValueError as exc:
        raise DataError(f"{row_label}: {exc}") from None


def load_runs(source: str | Path | IO[str], fmt: str = "csv") -> list[RunRecord]:
    """Load run records from a delimited or structured file.

    ``source`` may be a path or an open text stream; ``fmt`` is ``csv`` or
    ``json``.  Every record is validated; a malformed row raises
    ``DataError`` naming the row and field, and the empty file is simply an
    empty list.  Row order is preserved.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as handle:
            return load_runs(handle, fmt=fmt)

    if fmt == "csv":
        reader = csv.DictReader(source)
        if reader.fieldnames is None:
            return []
        missing = [c for c in RUN_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DataError(f"header: missing columns {missing}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            records.append(_parse_row(row, f"row {lineno}"))
        return records

    if fmt == "json":
        text = source.read()
        if not text.strip():
            return []
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"not valid JSON: {exc}") from None
        if isinstance(payload, dict):
            payload = payload.get("runs")
        if not isinstance(payload, list):
            raise DataError("JSON run file must be a list of objects or {'runs': [...]}")
        return [_parse_row(obj, f"entry {i}") for i, obj in enumerate(payload)]

    raise UsageError(f"unknown run-file format {fmt!r}; expected 'csv' or 'json'")


def _record_to_row(record: RunRecord) -> dict:
    shape, recipe = record.shape, record.recipe
    return {
        "r": shape.r,
        "s": shape.s,
        "l_eff": shape.l_eff,
        "n_prelude": shape.n_prelude,
        "n_coda": shape.n_coda,
        "injection": str(shape.injection),
        "bptt": recipe.bptt,
        "r_bwd": "" if not recipe.truncated else recipe.resolve_r_bwd(shape.r),
        "budget_flops": repr(record.budget),
        "tokens": repr(record.tokens),
        "val_loss": repr(record.val_loss),
        "variant": record.variant,
    }


def write_runs(records: Sequence[RunRecord], target: str | Path | IO[str], fmt: str = "csv") -> None:
    """Write run records in a form ``load_runs`` accepts (lossless floats)."""
    if isinstance(target, (str, Path)):
        with open(target, "w", encoding="utf-8", newline="") as handle:
            write_runs(records, handle, fmt=fmt)
        return
    if fmt == "csv":
        writer = csv.DictWriter(target, fieldnames=RUN_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow(_record_to_row(record))
    elif fmt == "json":
        json.dump({"runs": [_record_to_row(r) for r in records]}, target, indent=2)
        target.write("\n")
    else:
        raise UsageError(f"unknown run-file format {fmt!r}; expected 'csv' or 'json'")


# ---------------------------------------------------------------------------
# Grid planning and synthesis


def plan_grid(
    budgets: Sequence[float],
    scales: Sequence[int],
    r_values: Sequence[int],
    recipe: TrainingRecipe = FULL_BPTT,
    convention: FlopsConvention = FlopsConvention.EMPIRICAL,
    *,
    injection: Injection = geometry.LINEAR_INJECTION,
    l_eff: int = geometry.DEFAULT_L_EFF,
    n_prelude: int = geometry.DEFAULT_N_PRELUDE,
    n_coda: int = geometry.DEFAULT_N_CODA,
    vocab: int = geometry.DEFAULT_VOCAB,
    seq_len: int = geometry.DEFAULT_SEQ_LEN,
    token_range: tuple[float, float] | None = None,
) -> list[GridCell]:
    """Plan an iso-compute grid: one cell per (budget, scale, r).

    ``injection`` applies to looped cells only (r = 1 never has one).
    ``token_range = (lo, hi)`` drops cells whose affordable token count
    falls outside the window, mimicking sparse sweeps that skip widths that
    would over- or under-train at a budget.
    """
    if not budgets or not scales or not r_values:
        raise UsageError("budgets, scales and r_values must all be non-empty")
    if any(b <= 0 for b in budgets):
        raise UsageError("budgets must be positive")
    cells = []
    for budget in budgets:
        for s in scales:
            for r in r_values:
                shape = ModelShape(
                    r=r,
                    s=s,
                    l_eff=l_eff,
                    n_prelude=n_prelude,
                    n_coda=n_coda,
                    injection=geometry.NO_INJECTION if r == 1 else injection,
                    vocab=vocab,
                    seq_len=seq_len,
                )
                cell_recipe = FULL_BPTT if (recipe.truncated and r == 1) else recipe
                tokens = geometry.tokens_for_budget(budget, shape, cell_recipe, convention)
                if token_range is not None and not (token_range[0] <= tokens <= token_range[1]):
                    continue
                cells.append(
                    GridCell(
                        shape=shape,
                        recipe=cell_recipe,
                        budget=budget,
                        n_unique=geometry.unique_params(shape),
                        tokens=tokens,
                    )
                )
    return cells


def synthesize_runs(cells: Sequence[GridCell], spec: SyntheticSpec) -> list[RunRecord]:
    """Generate run records whose losses follow the ground-truth joint law.

    Each cell receives ``L = [E + A (N_once + r^phi N_rec)^-alpha
    + B D^-beta] * exp(noise_sigma * z)`` with z standard normal from the
    seeded generator, in cell order; two calls with the same cells and spec
    are identical.
    """
    if not cells:
        raise UsageError("cannot synthesize from an empty grid")
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(len(cells))
    records = []
    for cell, z in zip(cells, noise):
        n_once, n_rec = geometry.param_split(cell.shape)
        loss = predict_loss(spec.truth, n_once, n_rec, cell.shape.r, cell.tokens)
        loss *= math.exp(spec.noise_sigma * float(z))
        records.append(
            RunRecord(
                shape=cell.shape,
                recipe=cell.recipe,
                budget=cell.budget,
                tokens=cell.tokens,
                val_loss=float(loss),
                variant="synthetic",
            )
        )
    return records


def _round_sig(value: float, digits: int = 3) -> float:
    if value == 0:
        return 0.0
    exponent = math.floor(math.log10(abs(value)))
    return round(value, digits - 1 - exponent)


def group_cells(runs: Iterable[RunRecord]) -> dict[tuple[float, int], list[RunRecord]]:
    """Partition runs into (budget, r) cells.

    Budgets are compared after rounding to 3 significant figures so float
    formatting drift in input files does not split a cell.  Every run lands
    in exactly one cell; insertion order follows first appearance.
    """
    cells: dict[tuple[float, int], list[RunRecord]] = {}
    for run in runs:
        key = (_round_sig(run.budget), run.shape.r)
        cells.setdefault(key, []).append(run)
    return cells
