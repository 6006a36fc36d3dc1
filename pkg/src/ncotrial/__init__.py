"""Treatment-effect estimation in randomized trials with covariate and
negative control outcome (NCO) adjustment."""

from .errors import (
    DataValidationError,
    InsufficientArmError,
    LeverageOneError,
    NCOTrialError,
    OLSError,
    RankDeficientError,
    SimulationAborted,
)
from .estimators import AdjustmentSpec, EstimateResult, aipw, lin_sate, plug_in
from .inference import estimate, estimate_many, neyman_variance, robust_t, wald
from .ols import WorkingModelFit, fit_arm, ols
from .randinf import (
    EpsilonRule,
    PermutationPlan,
    PretestConfig,
    equivalence_pretest,
    model_output_test,
    pretest_gate,
    pretest_gated_estimate,
    pseudo_outcome_test,
    randomization_test_sharp,
    sharp_pretest,
)
from .sensitivity import fit_gamma, sensitivity_curve
from .simulation import ScenarioParams, SimSummary, derive_coefficients, generate_trial, run_scenario
from .trial_data import ColumnRoles, TrialDataset, Transform, apply_transform, load_csv

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
