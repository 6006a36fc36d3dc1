"""Small dense least squares for per-arm working models.

Fits use a column-pivoted QR decomposition of the equilibrated design
matrix (intercept always first). Rank deficiency is reported, never
repaired by dropping columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import InsufficientArmError, RankDeficientError
from .trial_data import TrialDataset

RANK_TOL = 1e-10
LEVERAGE_ONE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class OLSResult:
    coefficients: np.ndarray  # intercept first
    fitted: np.ndarray
    residuals: np.ndarray
    leverages: np.ndarray


def ols(design: np.ndarray, y: np.ndarray, names: Sequence[str] | None = None) -> OLSResult:
    """Least squares of ``y`` on the columns of ``design``.

    ``design`` must already contain the intercept column if one is wanted.
    Raises :class:`RankDeficientError` when a pivot of the equilibrated
    QR falls below ``RANK_TOL`` relative to the largest pivot.
    """
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    m, k = design.shape
    if names is None:
        names = [f"x{j}" for j in range(k)]
    if m < k:
        raise RankDeficientError(f"{m} rows cannot identify {k} coefficients", names)
    scale = np.sqrt(np.einsum("ij,ij->j", design, design))
    if np.any(scale == 0):
        zero = [names[j] for j in np.flatnonzero(scale == 0)]
        raise RankDeficientError(f"all-zero column(s) {zero}", zero)
    q, r, piv = scipy.linalg.qr(design / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    bad = diag < RANK_TOL * diag[0]
    if np.any(bad):
        cols = [names[j] for j in piv[bad]]
        raise RankDeficientError(f"rank-deficient design; collinear column(s) {cols}", cols)
    z = scipy.linalg.solve_triangular(r, q.T @ y)
    coef = np.empty(k)
    coef[piv] = z
    coef /= scale
    fitted = design @ coef
    return OLSResult(
        coefficients=coef,
        fitted=fitted,
        residuals=y - fitted,
        leverages=np.einsum("ij,ij->i", q, q),
    )


@dataclass(frozen=True, eq=False)
class WorkingModelFit:
    """Per-arm OLS working model evaluated at every unit.

    Attributes
    ----------
    arm : int
        Arm the model was fit in.
    coefficients : ndarray
        Intercept followed by one slope per predictor.
    fitted_all : ndarray, shape (n,)
        Predictions at every unit's predictors, both arms.
    leverages : ndarray, shape (n_arm,)
        Hat-matrix diagonal, in within-arm order.
    n_arm, p_params : int
        Arm size and number of non-intercept predictors.
    """

    arm: int
    coefficients: np.ndarray
    fitted_all: np.ndarray
    leverages: np.ndarray
    n_arm: int
    p_params: int
    predictor_columns: tuple = ()

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.coefficients[1:]

    @property
    def has_unit_leverage(self) -> bool:
        return bool(np.any(self.leverages >= 1.0 - LEVERAGE_ONE_TOL))


def fit_arm_arrays(
    treatment: np.ndarray,
    y: np.ndarray,
    predictors: np.ndarray,
    arm: int,
    names: Sequence[str] = (),
) -> WorkingModelFit:
    """Array-level version of :func:`fit_arm`."""
    mask = treatment == arm
    n_arm = int(mask.sum())
    p = predictors.shape[1]
    if n_arm < p + 2:
        raise InsufficientArmError(
            f"arm {arm} has {n_arm} units; {p} predictor(s) need at least {p + 2}"
        )
    full = np.column_stack([np.ones(len(y)), predictors])
    names = ["(intercept)", *names] if len(names) == p else None
    res = ols(full[mask], y[mask], names)
    return WorkingModelFit(
        arm=arm,
        coefficients=res.coefficients,
        fitted_all=full @ res.coefficients,
        leverages=res.leverages,
        n_arm=n_arm,
        p_params=p,
        predictor_columns=tuple(names[1:]) if names else (),
    )


def fit_arm(data: TrialDataset, arm: int, predictor_columns: Sequence[str]) -> WorkingModelFit:
    """Fit the arm-``arm`` working model of the outcome on the named predictors."""
    if arm not in (0, 1):
        raise ValueError(f"arm must be 0 or 1, got {arm!r}")
    return fit_arm_arrays(
        data.treatment,
        data.outcome,
        data.predictors(predictor_columns),
        arm,
        tuple(predictor_columns),
    )
