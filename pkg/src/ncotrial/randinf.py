"""Randomization tests, NCO pretests and pretest-gated estimation.

Every test re-randomizes the treatment vector with the number of treated
units held fixed, either over all ``C(n, n1)`` assignments or over ``B``
Monte Carlo draws. Test statistics are evaluated on whole blocks of
assignments at once.

Two statistics are provided:

``DiffMeans``
    difference in arm means of the tested values;
``RobustT``
    Lin's interacted-OLS estimate divided by the residual-variance
    standard error, computed for each assignment from within-arm sums.

An assignment on which a statistic cannot be computed (for example a
rank-deficient arm regression) is counted as at least as extreme as the
observed value.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import DataValidationError, RankDeficientError
from .estimators import AdjustmentSpec, EstimateResult, prepare
from .inference import estimate
from .ols import ols
from .trial_data import TrialDataset

EXHAUSTIVE_CAP = 200_000
MIN_MONTE_CARLO = 100
_CHUNK = 2048
_TIE_RTOL = 1e-9
_EIG_TOL = 1e-10


# ---------------------------------------------------------------------------
# Plans and statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PermutationPlan:
    """How to re-randomize: ``"exhaustive"`` or ``"monte_carlo"``."""

    mode: str = "monte_carlo"
    B: int = 1000
    seed: int | None = 0
    cap: int = EXHAUSTIVE_CAP

    def __post_init__(self):
        if self.mode not in ("exhaustive", "monte_carlo"):
            raise ValueError(f"unknown permutation mode {self.mode!r}")
        if self.mode == "monte_carlo" and self.B < MIN_MONTE_CARLO:
            raise ValueError(f"Monte Carlo plans need B >= {MIN_MONTE_CARLO}, got {self.B}")

    def blocks(self, treatment: np.ndarray):
        """Yield boolean assignment blocks of shape (m, n)."""
        a = np.asarray(treatment).astype(bool)
        n, n1 = a.size, int(a.sum())
        if self.mode == "exhaustive":
            total = math.comb(n, n1)
            if total > self.cap:
                raise ValueError(
                    f"C({n}, {n1}) = {total} assignments exceeds the exhaustive cap {self.cap}"
                )
            combos = itertools.combinations(range(n), n1)
            while True:
                block = list(itertools.islice(combos, _CHUNK))
                if not block:
                    return
                out = np.zeros((len(block), n), dtype=bool)
                np.put_along_axis(out, np.array(block, dtype=np.intp), True, axis=1)
                yield out
        else:
            rng = np.random.default_rng(self.seed)
            left = self.B
            while left > 0:
                m = min(left, _CHUNK)
                yield rng.permuted(np.tile(a, (m, 1)), axis=1)
                left -= m

    def with_seed(self, seed) -> "PermutationPlan":
        return replace(self, seed=seed)


class DiffMeans:
    """Treated-minus-control mean of the tested values."""

    name = "diff_means"

    def __call__(self, assign: np.ndarray, values: np.ndarray) -> np.ndarray:
        w = assign.astype(float)
        n1 = w.sum(axis=1)
        s1 = w @ values
        return s1 / n1 - (values.sum() - s1) / (values.size - n1)


class RobustT:
    """Lin-adjusted robust t statistic evaluated on blocks of assignments.

    Parameters
    ----------
    predictors : ndarray, shape (n, p)
        Adjustment variables (already transformed). ``p`` may be 0, in
        which case this is the unpooled two-sample t statistic.
    """

    name = "robust_t"

    def __init__(self, predictors: np.ndarray):
        z = np.asarray(predictors, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        z = z - z.mean(axis=0)
        sd = np.sqrt((z**2).mean(axis=0))
        if np.any(sd == 0):
            raise RankDeficientError("constant adjustment column in robust t statistic")
        self.z = z / sd
        self.p = z.shape[1]
        self._pairs = [(j, k) for j in range(self.p) for k in range(j, self.p)]

    @classmethod
    def from_spec(cls, data: TrialDataset, spec: AdjustmentSpec) -> "RobustT":
        tdata = prepare(data, spec)
        return cls(tdata.predictors(spec.columns))

    def _arm_terms(self, n_a, s_z, s_zz, s_y, s_zy, s_yy):
        """Intercept-at-mean prediction and residual SS for one arm."""
        m, p = s_y.shape[0], self.p
        ybar = s_y / n_a
        syy = s_yy - s_y * ybar
        feasible = n_a >= p + 2
        if p == 0:
            return ybar, np.maximum(syy, 0.0), feasible
        zbar = s_z / np.reshape(n_a, (-1, 1))
        szz = np.empty((m, p, p))
        for c, (j, k) in enumerate(self._pairs):
            szz[:, j, k] = szz[:, k, j] = s_zz[:, c] - s_z[:, j] * zbar[:, k]
        szy = s_zy - s_z * ybar[:, None]
        d = np.einsum("mjj->mj", szz)
        good = feasible & np.all(d > 1e-10 * n_a[:, None], axis=1)
        dn = np.sqrt(np.where(d > 0, d, 1.0))
        corr = szz / dn[:, :, None] / dn[:, None, :]
        if p == 1:
            eig_min = np.ones(m)
        else:
            eig_min = np.linalg.eigvalsh(corr)[:, 0]
        good &= eig_min > _EIG_TOL
        safe = np.where(good[:, None, None], szz, np.eye(p))
        beta = np.linalg.solve(safe, szy[:, :, None])[:, :, 0]
        rss = np.maximum(syy - np.einsum("mj,mj->m", szy, beta), 0.0)
        h_at_mean = ybar - np.einsum("mj,mj->m", beta, zbar)
        return h_at_mean, rss, good

    def __call__(self, assign: np.ndarray, values: np.ndarray) -> np.ndarray:
        y = np.asarray(values, dtype=float)
        y = y - y.mean()
        scale = np.sqrt((y**2).mean())
        if scale > 0:
            y = y / scale
        z = self.z
        cols = [np.ones_like(y)]
        cols += [z[:, j] for j in range(self.p)]
        cols += [z[:, j] * z[:, k] for j, k in self._pairs]
        cols += [y]
        cols += [y * z[:, j] for j in range(self.p)]
        cols += [y * y]
        moments = np.column_stack(cols)
        w = assign.astype(float)
        s1 = w @ moments
        s0 = moments.sum(axis=0) - s1
        p, q = self.p, len(self._pairs)

        def split(s):
            return (
                s[:, 0],
                s[:, 1 : 1 + p],
                s[:, 1 + p : 1 + p + q],
                s[:, 1 + p + q],
                s[:, 2 + p + q : 2 + 2 * p + q],
                s[:, 2 + 2 * p + q],
            )

        n1, sz1, szz1, sy1, szy1, syy1 = split(s1)
        n0, sz0, szz0, sy0, szy0, syy0 = split(s0)
        h1, rss1, ok1 = self._arm_terms(n1, sz1, szz1, sy1, szy1, syy1)
        h0, rss0, ok0 = self._arm_terms(n0, sz0, szz0, sy0, szy0, syy0)
        with np.errstate(divide="ignore", invalid="ignore"):
            var = rss1 / ((n1 - 1) * n1) + rss0 / ((n0 - 1) * n0)
            t = (h1 - h0) / np.sqrt(var)
        t[~(ok0 & ok1) | ~(var > 0)] = np.nan
        return t


Statistic = Callable[[np.ndarray, np.ndarray], np.ndarray]


def make_statistic(data: TrialDataset, statistic) -> Statistic:
    """Resolve ``"diff_means"``, ``"robust_t"`` or an AdjustmentSpec (robust t)."""
    if isinstance(statistic, AdjustmentSpec):
        return RobustT.from_spec(data, statistic)
    if statistic == "diff_means":
        return DiffMeans()
    if statistic == "robust_t":
        return RobustT(np.empty((data.n, 0)))
    if callable(statistic):
        return statistic
    raise ValueError(f"unknown statistic {statistic!r}")


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomizationResult:
    p_value: float
    statistic: float
    n_draws: int
    n_extreme: int
    n_infeasible: int
    mode: str
    alternative: str


def permutation_test(
    treatment: np.ndarray,
    values: np.ndarray,
    statistic: Statistic,
    plan: PermutationPlan = PermutationPlan(),
    alternative: str = "two-sided",
) -> RandomizationResult:
    """Randomization p-value of ``statistic`` for fixed ``values``.

    ``alternative`` is ``"two-sided"`` (compare ``|T|``), ``"greater"`` or
    ``"less"``. Monte Carlo p-values use the add-one convention; exhaustive
    p-values are the exact proportion over all assignments.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    a = np.asarray(treatment).astype(bool)
    values = np.asarray(values, dtype=float)
    t_obs = float(statistic(a[None, :], values)[0])
    if not math.isfinite(t_obs):
        raise DataValidationError("test statistic is undefined on the observed assignment")
    tol = _TIE_RTOL * abs(t_obs)
    draws = extreme = infeasible = 0
    for block in plan.blocks(a):
        t = statistic(block, values)
        bad = ~np.isfinite(t)
        if alternative == "two-sided":
            hit = np.abs(t) >= abs(t_obs) - tol
        elif alternative == "greater":
            hit = t >= t_obs - tol
        else:
            hit = t <= t_obs + tol
        extreme += int(np.count_nonzero(hit | bad))
        infeasible += int(np.count_nonzero(bad))
        draws += t.shape[0]
    if plan.mode == "monte_carlo":
        p = (1 + extreme) / (1 + draws)
    else:
        p = extreme / draws
    return RandomizationResult(p, t_obs, draws, extreme, infeasible, plan.mode, alternative)


# ---------------------------------------------------------------------------
# Tests of the sharp null
# ---------------------------------------------------------------------------


def randomization_test_sharp(
    data: TrialDataset,
    outcome_column: str | None = None,
    statistic="diff_means",
    plan: PermutationPlan = PermutationPlan(),
) -> RandomizationResult:
    """Two-sided test of zero effect of treatment on ``outcome_column``.

    ``outcome_column`` defaults to the primary outcome; naming an NCO gives
    the sharp-null NCO pretest.
    """
    column = outcome_column or data.outcome_name
    stat = make_statistic(data, statistic)
    return permutation_test(data.treatment, data.column(column), stat, plan)


def pseudo_outcome_test(
    data: TrialDataset,
    spec: AdjustmentSpec | None,
    statistic_on_residuals="diff_means",
    plan: PermutationPlan = PermutationPlan(),
) -> RandomizationResult:
    """Test on residuals of one pooled OLS of the outcome on ``spec``'s predictors.

    The regression ignores treatment and is fit once, so the residuals are
    fixed across re-randomizations. ``spec=None`` skips the regression.
    """
    if spec is None:
        resid = data.outcome
    else:
        tdata = prepare(data, spec)
        design = np.column_stack([np.ones(data.n), tdata.predictors(spec.columns)])
        resid = ols(design, data.outcome, ["(intercept)", *spec.columns]).residuals
    stat = make_statistic(data, statistic_on_residuals)
    return permutation_test(data.treatment, resid, stat, plan)


def model_output_test(
    data: TrialDataset, spec: AdjustmentSpec, plan: PermutationPlan = PermutationPlan()
) -> RandomizationResult:
    """Test based on the robust t statistic recomputed under each assignment."""
    return permutation_test(data.treatment, data.outcome, RobustT.from_spec(data, spec), plan)


# ---------------------------------------------------------------------------
# NCO pretests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpsilonRule:
    """Equivalence margin as a fraction of the pooled outcome's SD or range."""

    kind: str
    fraction: float

    def __post_init__(self):
        if self.kind not in ("sd", "range"):
            raise ValueError(f"epsilon rule kind must be 'sd' or 'range', got {self.kind!r}")
        if not self.fraction > 0:
            raise ValueError("epsilon rule fraction must be positive")

    @classmethod
    def parse(cls, text: str) -> "EpsilonRule":
        """Parse ``"sd:0.5"`` or ``"range:0.1"``."""
        kind, _, frac = text.partition(":")
        aliases = {"fraction_of_sd": "sd", "fraction_of_range": "range"}
        try:
            value = float(frac)
        except ValueError:
            raise ValueError(f"bad epsilon rule {text!r}; expected e.g. 'sd:0.5'") from None
        return cls(aliases.get(kind, kind), value)

    def resolve(self, outcome: np.ndarray) -> float:
        if self.kind == "sd":
            return self.fraction * float(np.std(outcome, ddof=1))
        return self.fraction * float(np.ptp(outcome))


@dataclass(frozen=True)
class PretestConfig:
    """Settings for a sharp-null or equivalence pretest of an NCO.

    ``statistic`` is ``"diff_means"``, ``"robust_t"`` or an
    :class:`AdjustmentSpec` naming covariates for a robust t statistic.
    """

    kind: str = "sharp"
    epsilon: float | None = None
    alpha: float = 0.05
    statistic: object = "diff_means"
    plan: PermutationPlan = field(default_factory=PermutationPlan)
    epsilon_rule: EpsilonRule | None = None

    def __post_init__(self):
        if self.kind not in ("sharp", "equivalence"):
            raise ValueError(f"unknown pretest kind {self.kind!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.kind == "equivalence":
            if self.epsilon is None and self.epsilon_rule is None:
                raise ValueError("equivalence pretest needs epsilon or an epsilon rule")
            if self.epsilon is not None and not self.epsilon > 0:
                raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    def resolve_epsilon(self, data: TrialDataset) -> float:
        eps = self.epsilon if self.epsilon is not None else self.epsilon_rule.resolve(data.outcome)
        if not eps > 0:
            raise ValueError(f"epsilon must be positive, got {eps}")
        return float(eps)


@dataclass(frozen=True)
class EquivalenceResult:
    reject_equiv_null: bool
    p_lower: float
    p_upper: float
    epsilon: float


def _check_pretest_statistic(statistic, nco_column: str) -> None:
    if isinstance(statistic, AdjustmentSpec) and nco_column in statistic.columns:
        raise ValueError(f"pretest statistic cannot adjust for the tested NCO {nco_column!r}")


def sharp_pretest(data: TrialDataset, nco_column: str, config: PretestConfig) -> RandomizationResult:
    """Two-sided randomization test of no effect of treatment on an NCO."""
    _check_pretest_statistic(config.statistic, nco_column)
    return randomization_test_sharp(data, nco_column, config.statistic, config.plan)


def equivalence_pretest(
    data: TrialDataset, nco_column: str, config: PretestConfig
) -> EquivalenceResult:
    """Two one-sided randomization tests of bounded NCO effects.

    The upper test takes every unit's NCO effect to be ``+epsilon``,
    reconstructs the untreated values ``N - epsilon * A`` and asks whether
    the observed statistic is unusually small; the lower test mirrors it
    at ``-epsilon``. The NCO is declared equivalent to unaffected when both
    one-sided p-values are at most ``alpha``.
    """
    _check_pretest_statistic(config.statistic, nco_column)
    eps = config.resolve_epsilon(data)
    stat = make_statistic(data, config.statistic)
    a = data.treatment.astype(float)
    nco = data.column(nco_column)
    upper = permutation_test(data.treatment, nco - eps * a, stat, config.plan, "less")
    lower = permutation_test(data.treatment, nco + eps * a, stat, config.plan, "greater")
    reject = upper.p_value <= config.alpha and lower.p_value <= config.alpha
    return EquivalenceResult(reject, lower.p_value, upper.p_value, eps)


@dataclass(frozen=True)
class GateDecision:
    kind: str
    used_nco: bool
    p_values: dict
    epsilon: float | None = None

    @property
    def branch(self) -> str:
        return "nco-adjusted" if self.used_nco else "unadjusted-for-nco"


def pretest_gate(data: TrialDataset, nco_columns, config: PretestConfig) -> GateDecision:
    """Decide whether NCO adjustment is allowed.

    Sharp pretests: adjust unless some NCO's sharp null is rejected.
    Equivalence pretests: adjust only if every NCO's equivalence null is
    rejected.
    """
    if not nco_columns:
        raise ValueError("pretest-gated estimation needs at least one NCO")
    pvals = {}
    if config.kind == "sharp":
        use = True
        for c in nco_columns:
            p = sharp_pretest(data, c, config).p_value
            pvals[c] = p
            use &= p > config.alpha
        return GateDecision("sharp", use, pvals)
    use = True
    eps = None
    for c in nco_columns:
        res = equivalence_pretest(data, c, config)
        pvals[c] = (res.p_lower, res.p_upper)
        eps = res.epsilon
        use &= res.reject_equiv_null
    return GateDecision("equivalence", use, pvals, eps)


def pretest_gated_estimate(
    data: TrialDataset,
    spec: AdjustmentSpec,
    config: PretestConfig,
    correction: str = "HC3",
    level: float = 0.95,
) -> tuple[EstimateResult, GateDecision]:
    """Estimate with ``spec`` if the NCO pretest allows it, else without its NCOs.

    Dropping the NCOs from a spec with no covariates gives the plug-in
    estimator.
    """
    gate = pretest_gate(data, spec.nco_columns, config)
    chosen = spec if gate.used_nco else AdjustmentSpec(covariate_columns=spec.covariate_columns)
    return estimate(data, chosen, correction, level), gate
