"""Point estimators of the average treatment effect.

All estimators use the observed treated fraction ``pi_hat = n1 / n``
rather than the design probability. Adjusted estimators fit a separate
OLS working model in each arm and evaluate both models at every unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataValidationError
from .ols import WorkingModelFit, fit_arm
from .trial_data import TrialDataset, Transform, apply_transform


@dataclass(frozen=True)
class AdjustmentSpec:
    """Predictor set for the working models.

    An empty spec gives intercept-only working models, i.e. the plug-in
    estimator. ``quantile_transform_ncos`` replaces every NCO by its
    pooled empirical quantile before fitting.
    """

    covariate_columns: tuple = ()
    nco_columns: tuple = ()
    quantile_transform_ncos: bool = False

    def __post_init__(self):
        object.__setattr__(self, "covariate_columns", tuple(self.covariate_columns))
        object.__setattr__(self, "nco_columns", tuple(self.nco_columns))

    @property
    def columns(self) -> tuple:
        return self.covariate_columns + self.nco_columns

    @property
    def is_empty(self) -> bool:
        return not self.columns

    @property
    def label(self) -> str:
        if self.is_empty:
            return "plug-in"
        parts = []
        if self.covariate_columns:
            parts.append("cov(" + "+".join(self.covariate_columns) + ")")
        if self.nco_columns:
            tag = "qnco" if self.quantile_transform_ncos else "nco"
            parts.append(f"{tag}(" + "+".join(self.nco_columns) + ")")
        return "+".join(parts)

    def validate(self, data: TrialDataset) -> None:
        for c in self.covariate_columns:
            if c not in data.covariate_names:
                raise DataValidationError(f"{c!r} is not a covariate column")
        for c in self.nco_columns:
            if c not in data.nco_names:
                raise DataValidationError(f"{c!r} is not an NCO column")


@dataclass(frozen=True)
class EstimateResult:
    """Point estimate with (optionally) its variance, CI and Wald p-value."""

    estimand: str
    estimate: float
    adjustment: AdjustmentSpec
    pi_hat: float
    variance: float = math.nan
    ci_low: float = math.nan
    ci_high: float = math.nan
    wald_p: float = math.nan
    correction: str | None = None
    level: float = 0.95
    extra: dict = field(default_factory=dict, compare=False)


def plug_in(data: TrialDataset) -> float:
    """Difference in arm means, written as the inverse-probability sum."""
    a = data.treatment
    y = data.outcome
    pi_hat = data.pi_hat
    return float(np.sum(a * y / pi_hat - (1 - a) * y / (1 - pi_hat)) / data.n)


def prepare(data: TrialDataset, spec: AdjustmentSpec) -> TrialDataset:
    """Validate ``spec`` against ``data`` and apply the NCO quantile transform."""
    spec.validate(data)
    if spec.quantile_transform_ncos:
        for c in spec.nco_columns:
            data = apply_transform(data, Transform("empirical_quantile", c))
    return data


def fit_working_models(
    data: TrialDataset, spec: AdjustmentSpec
) -> tuple[TrialDataset, WorkingModelFit, WorkingModelFit]:
    """Fit both arms' working models; returns the (transformed) data too."""
    data = prepare(data, spec)
    cols = spec.columns
    return data, fit_arm(data, 0, cols), fit_arm(data, 1, cols)


def aipw_from_predictions(data: TrialDataset, h0: np.ndarray, h1: np.ndarray) -> float:
    """Augmented estimator for arbitrary working-model predictions at all units."""
    a = data.treatment
    pi_hat = data.pi_hat
    g = h0 / (1 - pi_hat) + h1 / pi_hat
    # sum(a - pi_hat) = 0, so shifting g is free; it makes constant g vanish exactly.
    g = g - g[0]
    augmentation = np.sum((a - pi_hat) * g) / data.n
    return plug_in(data) - float(augmentation)


def aipw(data: TrialDataset, spec: AdjustmentSpec) -> EstimateResult:
    """AIPW estimate with per-arm OLS working models on ``spec``'s predictors.

    Covers the covariate-, NCO-, quantile-NCO- and fully adjusted
    estimators; they differ only in the predictor set.
    """
    tdata, fit0, fit1 = fit_working_models(data, spec)
    est = aipw_from_predictions(tdata, fit0.fitted_all, fit1.fitted_all)
    return EstimateResult(estimand="ATE", estimate=est, adjustment=spec, pi_hat=data.pi_hat)


def lin_from_slopes(
    data: TrialDataset, predictors: np.ndarray, slopes0: np.ndarray, slopes1: np.ndarray
) -> float:
    """Linearly adjusted difference with given per-arm slope vectors.

    Predictors are centred at their full-sample means.
    """
    a = data.treatment.astype(bool)
    y = data.outcome
    centred = predictors - predictors.mean(axis=0)
    adj1 = y[a] - centred[a] @ slopes1
    adj0 = y[~a] - centred[~a] @ slopes0
    return float(adj1.mean() - adj0.mean())


def lin_sate(data: TrialDataset, spec: AdjustmentSpec) -> EstimateResult:
    """Lin's interacted-OLS estimator of the sample average treatment effect."""
    tdata, fit0, fit1 = fit_working_models(data, spec)
    z = tdata.predictors(spec.columns)
    est = lin_from_slopes(tdata, z, fit0.slopes, fit1.slopes)
    return EstimateResult(estimand="SATE", estimate=est, adjustment=spec, pi_hat=data.pi_hat)


def standard_specs(data: TrialDataset) -> dict[str, AdjustmentSpec]:
    """Plug-in, covariate, NCO and covariate+NCO specs available in ``data``."""
    specs = {"none": AdjustmentSpec()}
    if data.covariate_names:
        specs["cov"] = AdjustmentSpec(covariate_columns=data.covariate_names)
    if data.nco_names:
        specs["nco"] = AdjustmentSpec(nco_columns=data.nco_names)
    if data.covariate_names and data.nco_names:
        specs["cov+nco"] = AdjustmentSpec(data.covariate_names, data.nco_names)
    return specs


def spec_for(
    kind: str,
    covariates: Sequence[str],
    ncos: Sequence[str],
    quantile_ncos: bool = False,
) -> AdjustmentSpec:
    """Build a spec from a CLI-style keyword: none, cov, nco or cov+nco."""
    kinds = {
        "none": ((), ()),
        "cov": (covariates, ()),
        "nco": ((), ncos),
        "cov+nco": (covariates, ncos),
    }
    if kind not in kinds:
        raise ValueError(f"unknown adjustment {kind!r}; choose from {sorted(kinds)}")
    cov, nco = kinds[kind]
    if kind in ("cov", "cov+nco") and not covariates:
        raise DataValidationError(f"adjustment {kind!r} needs at least one covariate")
    if kind in ("nco", "cov+nco") and not ncos:
        raise DataValidationError(f"adjustment {kind!r} needs at least one NCO")
    return AdjustmentSpec(tuple(cov), tuple(nco), quantile_ncos and bool(nco))
