"""Variance estimation, Wald intervals and the robust t statistic.

The sandwich variance is ``sum((C * R) ** 2)`` where ``R`` holds the
per-unit components of the AIPW estimator and ``C`` a finite-sample
correction factor (HC0 to HC3).
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Iterable

import numpy as np
from scipy.stats import norm

from .errors import DataValidationError, LeverageOneError, OLSError
from .estimators import (
    AdjustmentSpec,
    EstimateResult,
    aipw_from_predictions,
    fit_working_models,
    lin_from_slopes,
)
from .ols import LEVERAGE_ONE_TOL, WorkingModelFit
from .trial_data import TrialDataset

HC_KINDS = ("HC0", "HC1", "HC2", "HC3")
CORRECTIONS = HC_KINDS + ("Neyman",)


def normalize_correction(kind: str) -> str:
    for c in CORRECTIONS:
        if kind.lower() == c.lower():
            return c
    raise ValueError(f"unknown correction {kind!r}; choose from {CORRECTIONS}")


def sandwich_r(
    data: TrialDataset, fit0: WorkingModelFit, fit1: WorkingModelFit, psi_hat: float
) -> np.ndarray:
    """Per-unit sandwich components ``R_i`` of the AIPW estimator."""
    a = data.treatment.astype(float)
    y = data.outcome
    h0, h1 = fit0.fitted_all, fit1.fitted_all
    if h0.shape != y.shape or h1.shape != y.shape:
        raise ValueError("working-model predictions must cover all n units")
    n, n1, n0 = data.n, data.n1, data.n0
    pi_hat = n1 / n
    t = a.astype(bool)
    ybar1, ybar0 = y[t].mean(), y[~t].mean()
    hbar0, hbar1 = h0.mean(), h1.mean()
    return (
        (a / n1 - (1 - a) / n0) * y
        - psi_hat / n
        - (a - pi_hat) * (h0 / n0 + h1 / n1)
        - (a - pi_hat) * ((ybar0 - hbar0) / n0 + (ybar1 - hbar1) / n1)
    )


def unit_leverages(data: TrialDataset, fit0: WorkingModelFit, fit1: WorkingModelFit) -> np.ndarray:
    """Each unit's leverage in its own arm's working model."""
    lev = np.empty(data.n)
    t = data.treatment.astype(bool)
    lev[~t] = fit0.leverages
    lev[t] = fit1.leverages
    return lev


def correction_factors(
    kind: str, fit0: WorkingModelFit, fit1: WorkingModelFit, data: TrialDataset
) -> np.ndarray:
    """Finite-sample correction factors ``C_i``."""
    kind = normalize_correction(kind)
    n = data.n
    if kind == "HC0":
        return np.ones(n)
    if kind == "HC1":
        df0 = fit0.n_arm - fit0.p_params - 1
        df1 = fit1.n_arm - fit1.p_params - 1
        if df0 <= 0 or df1 <= 0:
            raise OLSError("HC1 needs n_a - p_a - 1 > 0 in both arms")
        num = 1.0 / df0 + 1.0 / df1
        den = 1.0 / (fit0.n_arm - 1) + 1.0 / (fit1.n_arm - 1)
        return np.full(n, math.sqrt(num / den))
    if kind == "Neyman":
        raise ValueError("Neyman is not a sandwich correction")
    lev = unit_leverages(data, fit0, fit1)
    if np.any(lev >= 1.0 - LEVERAGE_ONE_TOL):
        rows = np.flatnonzero(lev >= 1.0 - LEVERAGE_ONE_TOL).tolist()
        raise LeverageOneError(f"leverage=1 at row(s) {rows}; {kind} is undefined")
    inv = 1.0 / (1.0 - lev)
    return np.sqrt(inv) if kind == "HC2" else inv


def sandwich_variance(
    kind: str, data: TrialDataset, fit0: WorkingModelFit, fit1: WorkingModelFit, psi_hat: float
) -> float:
    cr = correction_factors(kind, fit0, fit1, data) * sandwich_r(data, fit0, fit1, psi_hat)
    return float(cr @ cr)


def wald(estimate: float, variance: float, level: float = 0.95) -> tuple[float, float, float]:
    """Normal-reference confidence interval and two-sided p-value."""
    if variance < 0:
        raise ValueError("variance must be non-negative")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    se = math.sqrt(variance)
    z = norm.ppf(0.5 + level / 2)
    if se == 0:
        p = 1.0 if estimate == 0 else 0.0
    else:
        p = float(2 * norm.sf(abs(estimate) / se))
    return estimate - z * se, estimate + z * se, p


def neyman_variance(data: TrialDataset) -> float:
    """Conservative two-sample variance ``S1^2/n1 + S0^2/n0``."""
    if data.n0 < 2 or data.n1 < 2:
        raise DataValidationError("each arm needs at least 2 units for the Neyman variance")
    t = data.treatment.astype(bool)
    y = data.outcome
    return float(y[t].var(ddof=1) / data.n1 + y[~t].var(ddof=1) / data.n0)


def _residual_variance_sum(data: TrialDataset, fit0: WorkingModelFit, fit1: WorkingModelFit) -> float:
    t = data.treatment.astype(bool)
    y = data.outcome
    total = 0.0
    for fit, mask in ((fit0, ~t), (fit1, t)):
        resid = y[mask] - fit.fitted_all[mask]
        total += float(resid @ resid) / (fit.n_arm - 1) / fit.n_arm
    return total


def robust_t(data: TrialDataset, spec: AdjustmentSpec) -> float:
    """Lin estimate divided by the square root of the residual arm variances.

    With an empty spec this is the unpooled (Welch) two-sample t statistic.
    """
    tdata, fit0, fit1 = fit_working_models(data, spec)
    psi = lin_from_slopes(tdata, tdata.predictors(spec.columns), fit0.slopes, fit1.slopes)
    denom = _residual_variance_sum(tdata, fit0, fit1)
    scale = float(np.max(np.abs(tdata.outcome))) ** 2 / data.n
    if denom <= 1e-24 * scale:
        raise DataValidationError("robust t undefined: zero residual variance in both arms")
    return psi / math.sqrt(denom)


def estimate_many(
    data: TrialDataset,
    spec: AdjustmentSpec,
    corrections: Iterable[str] = ("HC3",),
    level: float = 0.95,
    estimand: str = "ATE",
) -> dict[str, EstimateResult]:
    """Fit once and return one :class:`EstimateResult` per correction."""
    estimand = estimand.upper()
    if estimand not in ("ATE", "SATE"):
        raise ValueError(f"unknown estimand {estimand!r}")
    tdata, fit0, fit1 = fit_working_models(data, spec)
    if estimand == "ATE":
        psi = aipw_from_predictions(tdata, fit0.fitted_all, fit1.fitted_all)
    else:
        psi = lin_from_slopes(tdata, tdata.predictors(spec.columns), fit0.slopes, fit1.slopes)
    base = EstimateResult(estimand=estimand, estimate=psi, adjustment=spec, pi_hat=data.pi_hat)
    r = None
    out = {}
    for kind in corrections:
        kind = normalize_correction(kind)
        if kind == "Neyman":
            if estimand != "SATE":
                raise ValueError("the Neyman variance targets the SATE; pass estimand='SATE'")
            var = _residual_variance_sum(tdata, fit0, fit1)
        else:
            if r is None:
                r = sandwich_r(tdata, fit0, fit1, psi)
            cr = correction_factors(kind, fit0, fit1, tdata) * r
            var = float(cr @ cr)
        lo, hi, p = wald(psi, var, level)
        out[kind] = replace(
            base, variance=var, ci_low=lo, ci_high=hi, wald_p=p, correction=kind, level=level
        )
    return out


def estimate(
    data: TrialDataset,
    spec: AdjustmentSpec,
    correction: str = "HC3",
    level: float = 0.95,
    estimand: str = "ATE",
) -> EstimateResult:
    """Point estimate, variance, CI and Wald p-value for one adjustment spec."""
    return estimate_many(data, spec, (correction,), level, estimand)[normalize_correction(correction)]
