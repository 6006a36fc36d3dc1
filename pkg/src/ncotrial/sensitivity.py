"""Linear sensitivity analysis for a possibly affected NCO.

Under parallel linear outcome models with common NCO slope ``gamma``, the
NCO-adjusted estimator is biased by ``-gamma * delta``, where ``delta`` is
the average effect of treatment on the NCO. The corrected estimate is
therefore ``estimate + gamma * delta``. The interval is shifted by the same
amount with its width unchanged; sampling error in ``gamma`` is ignored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .estimators import AdjustmentSpec, EstimateResult, prepare
from .inference import estimate
from .ols import ols
from .trial_data import TrialDataset

APPROXIMATION_NOTE = "interval shifted with fixed width; uncertainty in gamma not propagated"


def fit_gamma(data: TrialDataset, nco_column: str) -> float:
    """Coefficient on the NCO in a pooled OLS of the outcome on treatment and NCO."""
    design = np.column_stack([np.ones(data.n), data.treatment, data.column(nco_column)])
    res = ols(design, data.outcome, ["(intercept)", data.treatment_name, nco_column])
    return float(res.coefficients[2])


@dataclass(frozen=True)
class SensitivityPoint:
    delta: float
    estimate: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class SensitivityCurve:
    gamma_hat: float
    base: EstimateResult
    grid: tuple
    note: str = APPROXIMATION_NOTE

    def to_csv(self, path_or_file) -> None:
        """Write columns ``delta, estimate, ci_low, ci_high``."""
        close = False
        if hasattr(path_or_file, "write"):
            fh = path_or_file
        else:
            fh = open(path_or_file, "w", newline="", encoding="utf-8")
            close = True
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delta", "estimate", "ci_low", "ci_high"])
            for pt in self.grid:
                w.writerow([repr(pt.delta), repr(pt.estimate), repr(pt.ci_low), repr(pt.ci_high)])
        finally:
            if close:
                fh.close()


def sensitivity_curve(
    data: TrialDataset,
    spec: AdjustmentSpec,
    delta_grid: Sequence[float],
    correction: str = "HC3",
    level: float = 0.95,
) -> SensitivityCurve:
    """Bias-corrected NCO-adjusted estimates over assumed NCO effects ``delta``.

    ``spec`` must adjust for exactly one NCO. If the NCO is quantile
    transformed, ``gamma`` and ``delta`` are on the transformed scale.
    """
    if len(spec.nco_columns) != 1:
        raise ValueError("sensitivity analysis needs exactly one NCO in the adjustment spec")
    deltas = [float(d) for d in delta_grid]
    if not deltas:
        raise ValueError("delta grid is empty")
    nco = spec.nco_columns[0]
    base = estimate(data, spec, correction, level)
    gamma = fit_gamma(prepare(data, spec), nco)
    grid = tuple(
        SensitivityPoint(d, base.estimate + gamma * d, base.ci_low + gamma * d, base.ci_high + gamma * d)
        for d in deltas
    )
    return SensitivityCurve(gamma, base, grid)
