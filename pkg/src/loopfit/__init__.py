"""Scaling-law toolkit for looped (depth-recurrent) language models.

Exact parameter and FLOPs accounting for prelude-recur-coda architectures,
robust fitting of Chinchilla and joint recurrence-equivalence loss laws,
block-bootstrap inference for the recurrence exponent, probe comparison,
and compute-optimal allocation.
"""

from .allocation import (
    AllocationPoint,
    EquivalentSizes,
    Frontier,
    IsoflopsOptimum,
    closed_form_n_star,
    data_scaling_exponent,
    effective_amplitude,
    effective_param_ratio,
    equivalent_sizes,
    frontier,
    isoflops_parabola,
    optimal_allocation,
)
from .dataset import (
    GridCell,
    RunRecord,
    SyntheticSpec,
    group_cells,
    load_runs,
    plan_grid,
    synthesize_runs,
    write_runs,
)
from .errors import DataError, LoopfitError, NumericError, ShapeError, UsageError
from .fitter import (
    ChinchillaParams,
    FitBounds,
    FitConfig,
    FitResult,
    JointParams,
    fit_chinchilla,
    fit_joint,
    huber,
    minimize_bounded,
    objective,
    predict_loss,
    r_squared,
)
from .geometry import (
    FULL_BPTT,
    LINEAR_INJECTION,
    NO_INJECTION,
    FlopsConvention,
    Injection,
    ModelShape,
    TrainingRecipe,
    block_params,
    forward_flops_per_token,
    injection_overhead,
    injection_params,
    norm_scale_params,
    param_split,
    realized_params,
    tokens_for_budget,
    train_flops_per_token,
    truncated_bptt,
    unique_params,
    width_from_unique_params,
)
from .inference import (
    BootstrapResult,
    DeltaPhiReport,
    block_bootstrap_phi,
    delta_phi,
    split_stability,
)

__version__ = "0.1.0"
