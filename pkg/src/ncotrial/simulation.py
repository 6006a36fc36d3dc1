"""Monte Carlo trials from a latent-variable data generating process.

Each unit draws a measured covariate ``X`` and an unmeasured ``U`` from a
standard bivariate normal with correlation ``rho_xu``. The NCO is built
from a latent ``Z ~ Normal(beta0 + b1*X + b2*U, 1)``: on the identity
link ``N = Z + beta_n * A``; on the ``logistic8`` link ``N = 8 / (1 +
exp(-Z))``, which saturates at 0 and 8. The untreated outcome has the
same mean structure with independent noise, and ``Y = Y(0) + beta * A``.
``b1`` and ``b2`` are set from the target correlations ``rho_yx`` and
``rho_yn_given_x``.

Replicate ``i`` of a scenario uses its own random stream derived from
``(seed, i)``, so serial and parallel runs give identical results.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .errors import NCOTrialError, SimulationAborted
from .estimators import AdjustmentSpec
from .inference import estimate_many, normalize_correction
from .randinf import EpsilonRule, PermutationPlan, PretestConfig, pretest_gate
from .trial_data import TrialDataset

LINKS = ("identity", "logistic8")
MAX_REDRAWS = 10_000
BIAS_DEFINITION = "relative_abs_bias = mean|estimate - truth| / plug-in mean|estimate - truth|"


def derive_coefficients(rho_yx: float, rho_yn_given_x: float) -> tuple[float, float]:
    """Slopes on ``X`` and ``U`` giving the requested correlations.

    Returns ``(b1, b2)`` with ``b2 = sqrt(r / (1 - r))`` for the partial
    correlation ``r`` of outcome and NCO given ``X``, and
    ``b1 = sqrt(rho_yx^2 (b2^2 + 1) / (1 - rho_yx^2))``.
    """
    for name, r in (("rho_yx", rho_yx), ("rho_yn_given_x", rho_yn_given_x)):
        if not 0 <= r < 1:
            raise ValueError(f"{name} must lie in [0, 1), got {r}")
    b2 = math.sqrt(rho_yn_given_x / (1 - rho_yn_given_x))
    b1 = math.sqrt(rho_yx**2 * (b2**2 + 1) / (1 - rho_yx**2))
    return b1, b2


def outcome_nco_correlation(rho_yx: float, rho_yn_given_x: float) -> float:
    """Marginal correlation of ``Y(0)`` and ``N`` on the identity link."""
    b1, b2 = derive_coefficients(rho_yx, rho_yn_given_x)
    s = b1**2 + b2**2
    return s / (s + 1)


@dataclass(frozen=True)
class ScenarioParams:
    n: int = 60
    pi: float = 0.8
    beta: float = 1.0
    beta_n: float = 0.0
    rho_yx: float = 0.3
    rho_yn_given_x: float = 0.5
    rho_xu: float = 0.0
    beta0: float = 1.0
    link: str = "identity"
    replicates: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n < 4:
            raise ValueError(f"n must be at least 4, got {self.n}")
        if not 0 < self.pi < 1:
            raise ValueError(f"pi must lie in (0, 1), got {self.pi}")
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}, got {self.link!r}")
        if self.link == "logistic8" and self.beta_n != 0:
            raise ValueError("beta_n != 0 is only defined on the identity link")
        if not -1 < self.rho_xu < 1:
            raise ValueError(f"rho_xu must lie in (-1, 1), got {self.rho_xu}")
        if self.replicates < 1:
            raise ValueError("replicates must be positive")
        derive_coefficients(self.rho_yx, self.rho_yn_given_x)

    @property
    def coefficients(self) -> tuple[float, float]:
        return derive_coefficients(self.rho_yx, self.rho_yn_given_x)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario parameter(s) {sorted(unknown)}")
        return cls(**d)


def replicate_rng(seed: int, replicate_index: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(replicate_index, stream))
    return np.random.default_rng(ss)


def _simulate(params: ScenarioParams, replicate_index: int, min_arm_size: int = 1):
    rng = replicate_rng(params.seed, replicate_index)
    n = params.n
    b1, b2 = params.coefficients
    cov = np.array([[1.0, params.rho_xu], [params.rho_xu, 1.0]])
    xu = rng.multivariate_normal(np.zeros(2), cov, size=n, method="cholesky")
    x, u = xu[:, 0], xu[:, 1]
    mean = params.beta0 + b1 * x + b2 * u
    latent = mean + rng.standard_normal(n)
    y0 = mean + rng.standard_normal(n)
    redraws = 0
    while True:
        a = (rng.random(n) < params.pi).astype(np.int8)
        n1 = int(a.sum())
        if min(n1, n - n1) >= min_arm_size:
            break
        redraws += 1
        if redraws > MAX_REDRAWS:
            raise NCOTrialError(f"could not draw arms of size >= {min_arm_size} with n={n}")
    if params.link == "identity":
        nco = latent + params.beta_n * a
    else:
        nco = 8.0 / (1.0 + np.exp(-latent))
    y = y0 + params.beta * a
    data = TrialDataset(
        treatment=a,
        outcome=y,
        design_pi=params.pi,
        covariates=x[:, None],
        ncos=nco[:, None],
        covariate_names=("X",),
        nco_names=("N",),
    )
    return data, redraws


def generate_trial(params: ScenarioParams, replicate_index: int, min_arm_size: int = 1) -> TrialDataset:
    """One simulated trial, deterministic in ``(params.seed, replicate_index)``.

    Treatment is i.i.d. Bernoulli(``pi``), redrawn until each arm has at
    least ``min_arm_size`` units.
    """
    return _simulate(params, replicate_index, min_arm_size)[0]


# ---------------------------------------------------------------------------
# Estimator suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SuiteEstimator:
    """A named estimator: an adjustment spec, optionally gated by a pretest."""

    name: str
    spec: AdjustmentSpec
    gate: PretestConfig | None = None


STANDARD_ESTIMATORS = {
    "plug_in": AdjustmentSpec(),
    "cov": AdjustmentSpec(covariate_columns=("X",)),
    "nco": AdjustmentSpec(nco_columns=("N",)),
    "qnco": AdjustmentSpec(nco_columns=("N",), quantile_transform_ncos=True),
    "full": AdjustmentSpec(("X",), ("N",)),
}


def suite_from_names(names: Iterable[str], B: int = 1000, alpha: float = 0.05) -> list[SuiteEstimator]:
    """Build a suite from names.

    Besides the keys of ``STANDARD_ESTIMATORS``, accepts ``nco_sharp``
    (NCO adjustment gated by a sharp pretest) and ``nco_equiv:sd:F`` or
    ``nco_equiv:range:F`` (gated by an equivalence pretest whose margin is
    ``F`` times the outcome's SD or range).
    """
    suite = []
    for name in names:
        if name in STANDARD_ESTIMATORS:
            suite.append(SuiteEstimator(name, STANDARD_ESTIMATORS[name]))
        elif name == "nco_sharp":
            cfg = PretestConfig("sharp", alpha=alpha, plan=PermutationPlan(B=B))
            suite.append(SuiteEstimator(name, STANDARD_ESTIMATORS["nco"], cfg))
        elif name.startswith("nco_equiv:"):
            rule = EpsilonRule.parse(name.split(":", 1)[1])
            cfg = PretestConfig("equivalence", alpha=alpha, plan=PermutationPlan(B=B), epsilon_rule=rule)
            suite.append(SuiteEstimator(name, STANDARD_ESTIMATORS["nco"], cfg))
        else:
            raise ValueError(f"unknown estimator {name!r}")
    if not suite:
        raise ValueError("estimator suite is empty")
    return suite


DEFAULT_SUITE = ("plug_in", "cov", "nco", "qnco", "full")


# ---------------------------------------------------------------------------
# Running a scenario
# ---------------------------------------------------------------------------


@dataclass
class _Chunk:
    estimates: np.ndarray  # (r, E)
    variances: np.ndarray  # (r, E, C)
    pvalues: np.ndarray  # (r, E, C)
    selected: np.ndarray  # (r, E), nan when ungated
    failures: list
    redraws: int


def _run_chunk(params, suite, corrections, level, estimand, indices, min_arm_size) -> _Chunk:
    r, e, c = len(indices), len(suite), len(corrections)
    est = np.full((r, e), np.nan)
    var = np.full((r, e, c), np.nan)
    pv = np.full((r, e, c), np.nan)
    sel = np.full((r, e), np.nan)
    failures = []
    redraws = 0
    for row, idx in enumerate(indices):
        data, k = _simulate(params, idx, min_arm_size)
        redraws += k
        gate_seed = int(np.random.SeedSequence(params.seed, spawn_key=(idx, 1)).generate_state(1)[0])
        for col, member in enumerate(suite):
            try:
                spec = member.spec
                if member.gate is not None:
                    cfg = replace(member.gate, plan=member.gate.plan.with_seed(gate_seed))
                    decision = pretest_gate(data, spec.nco_columns, cfg)
                    sel[row, col] = float(decision.used_nco)
                    if not decision.used_nco:
                        spec = AdjustmentSpec(covariate_columns=spec.covariate_columns)
                res = estimate_many(data, spec, corrections, level, estimand)
            except (NCOTrialError, np.linalg.LinAlgError, ValueError) as exc:
                failures.append((idx, member.name, f"{type(exc).__name__}: {exc}"))
                continue
            est[row, col] = res[corrections[0]].estimate
            for k_c, kind in enumerate(corrections):
                var[row, col, k_c] = res[kind].variance
                pv[row, col, k_c] = res[kind].wald_p
    return _Chunk(est, var, pv, sel, failures, redraws)


@dataclass
class SimSummary:
    """Per-estimator, per-correction performance over the replicates.

    ``metrics[(estimator, correction)]`` maps metric names to values:
    ``mean_bias``, ``mean_abs_error``, ``relative_abs_bias``,
    ``coverage``, ``median_relative_efficiency``, ``power`` and ``type1``
    (one of which is NaN depending on whether the true effect is zero),
    ``rejection_rate``, ``nco_selected_rate`` and ``n_failed``.
    Raw per-replicate arrays are kept for further analysis.
    """

    params: ScenarioParams
    estimators: tuple
    corrections: tuple
    truth: float
    metrics: dict
    estimates: np.ndarray
    variances: np.ndarray
    pvalues: np.ndarray
    selected: np.ndarray
    failures: list
    redraws: int
    metadata: dict = field(default_factory=dict)

    def metric(self, estimator: str, correction: str, name: str) -> float:
        return self.metrics[(estimator, normalize_correction(correction))][name]

    def rows(self) -> list[dict]:
        """Tidy rows: scenario parameters, estimator, correction, metric, value."""
        base = asdict(self.params)
        out = []
        for (est, corr), values in self.metrics.items():
            for name, value in values.items():
                out.append({**base, "estimator": est, "correction": corr, "metric": name, "value": value})
        return out


def _summarise(params, suite, corrections, level, alpha, chunk: _Chunk, ref_col: int) -> dict:
    truth = params.beta
    z = norm.ppf(0.5 + level / 2)
    metrics = {}
    ref_est = chunk.estimates[:, ref_col]
    for col, member in enumerate(suite):
        e = chunk.estimates[:, col]
        ok = np.isfinite(e) & np.isfinite(ref_est)
        err = e[ok] - truth
        ref_mae = np.mean(np.abs(ref_est[ok] - truth))
        for k, kind in enumerate(corrections):
            v = chunk.variances[ok, col, k]
            vref = chunk.variances[ok, ref_col, k]
            rej = float(np.mean(chunk.pvalues[ok, col, k] < alpha))
            sel = chunk.selected[ok, col]
            metrics[(member.name, kind)] = {
                "mean_bias": float(np.mean(err)),
                "mean_abs_error": float(np.mean(np.abs(err))),
                "relative_abs_bias": float(np.mean(np.abs(err)) / ref_mae),
                "coverage": float(np.mean(np.abs(err) <= z * np.sqrt(v))),
                "median_relative_efficiency": float(np.median(v / vref)),
                "rejection_rate": rej,
                "power": rej if truth != 0 else math.nan,
                "type1": rej if truth == 0 else math.nan,
                "nco_selected_rate": float(np.mean(sel)) if member.gate is not None else math.nan,
                "n_failed": int(np.count_nonzero(~np.isfinite(e))),
            }
    return metrics


def run_scenario(
    params: ScenarioParams,
    estimator_suite: Sequence[SuiteEstimator | str] = DEFAULT_SUITE,
    corrections: Sequence[str] = ("HC3",),
    *,
    level: float = 0.95,
    alpha: float = 0.05,
    estimand: str = "ATE",
    workers: int = 1,
    max_failure_rate: float = 0.01,
) -> SimSummary:
    """Run every estimator on ``params.replicates`` simulated trials.

    Ratios (relative bias and efficiency) are taken against the plug-in
    estimator, which is always computed. Arms are redrawn until each has
    room for the largest working model in the suite. Replicates where an
    estimator fails are excluded; if failures reach ``max_failure_rate``
    of the replicates the run raises :class:`SimulationAborted`.
    """
    suite = [s if isinstance(s, SuiteEstimator) else suite_from_names([s])[0] for s in estimator_suite]
    if not suite:
        raise ValueError("estimator suite is empty")
    names = [s.name for s in suite]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate estimator names in {names}")
    corrections = tuple(normalize_correction(c) for c in corrections)
    if not corrections:
        raise ValueError("no corrections requested")
    ref_col = next((i for i, s in enumerate(suite) if s.name == "plug_in" and s.gate is None), None)
    if ref_col is None:
        suite = suite + [SuiteEstimator("plug_in", AdjustmentSpec())]
        ref_col = len(suite) - 1
    min_arm = max(len(s.spec.columns) for s in suite) + 2

    indices = list(range(params.replicates))
    if workers > 1 and params.replicates > 1:
        parts = [p.tolist() for p in np.array_split(indices, min(workers, len(indices)))]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_chunk, params, suite, corrections, level, estimand, part, min_arm)
                for part in parts
            ]
            chunks = [f.result() for f in futures]
        chunk = _Chunk(
            np.concatenate([c.estimates for c in chunks]),
            np.concatenate([c.variances for c in chunks]),
            np.concatenate([c.pvalues for c in chunks]),
            np.concatenate([c.selected for c in chunks]),
            [f for c in chunks for f in c.failures],
            sum(c.redraws for c in chunks),
        )
    else:
        chunk = _run_chunk(params, suite, corrections, level, estimand, indices, min_arm)

    for col, member in enumerate(suite):
        n_failed = int(np.count_nonzero(~np.isfinite(chunk.estimates[:, col])))
        if n_failed and n_failed >= max_failure_rate * params.replicates:
            sample = [f for f in chunk.failures if f[1] == member.name][:3]
            raise SimulationAborted(
                f"estimator {member.name!r} failed in {n_failed}/{params.replicates} replicates: {sample}"
            )

    metrics = _summarise(params, suite, corrections, level, alpha, chunk, ref_col)
    return SimSummary(
        params=params,
        estimators=tuple(s.name for s in suite),
        corrections=corrections,
        truth=params.beta,
        metrics=metrics,
        estimates=chunk.estimates,
        variances=chunk.variances,
        pvalues=chunk.pvalues,
        selected=chunk.selected,
        failures=chunk.failures,
        redraws=chunk.redraws,
        metadata={
            "bias_definition": BIAS_DEFINITION,
            "min_arm_size": min_arm,
            "assignment": "Bernoulli(pi), redrawn until both arms reach min_arm_size",
            "estimand": estimand,
        },
    )


# ---------------------------------------------------------------------------
# Scenario grids
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {"seed", "replicates", "base", "grid", "estimators", "corrections", "level", "alpha", "estimand", "B"}


@dataclass(frozen=True)
class GridConfig:
    """A scenario grid: ``base`` parameters crossed with every ``grid`` list."""

    base: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    estimators: tuple = DEFAULT_SUITE
    corrections: tuple = ("HC0", "HC3")
    level: float = 0.95
    alpha: float = 0.05
    estimand: str = "ATE"
    B: int = 1000

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        if not isinstance(d, dict):
            raise ValueError("simulation config must be a JSON object")
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise ValueError(f"unknown config key(s) {sorted(unknown)}")
        base = dict(d.get("base", {}))
        for key in ("seed", "replicates"):
            if key in d:
                base[key] = d[key]
        grid = dict(d.get("grid", {}))
        known = {f.name for f in fields(ScenarioParams)}
        for key, values in grid.items():
            if key not in known:
                raise ValueError(f"unknown grid parameter {key!r}")
            if not isinstance(values, list) or not values:
                raise ValueError(f"grid parameter {key!r} must be a non-empty list")
        cfg = cls(
            base=base,
            grid=grid,
            estimators=tuple(d.get("estimators", DEFAULT_SUITE)),
            corrections=tuple(d.get("corrections", ("HC0", "HC3"))),
            level=float(d.get("level", 0.95)),
            alpha=float(d.get("alpha", 0.05)),
            estimand=str(d.get("estimand", "ATE")),
            B=int(d.get("B", 1000)),
        )
        # Fail on bad values before any simulation starts.
        cfg.scenarios()
        cfg.suite()
        for c in cfg.corrections:
            normalize_correction(c)
        return cfg

    def scenarios(self) -> list[ScenarioParams]:
        keys = list(self.grid)
        out = []
        for combo in itertools.product(*[self.grid[k] for k in keys]):
            out.append(ScenarioParams.from_dict({**self.base, **dict(zip(keys, combo))}))
        return out

    def suite(self) -> list[SuiteEstimator]:
        return suite_from_names(self.estimators, B=self.B, alpha=self.alpha)


def run_grid(config: GridConfig, workers: int = 1) -> list[SimSummary]:
    """Run every scenario of ``config`` in grid order."""
    suite = config.suite()
    return [
        run_scenario(
            params,
            suite,
            config.corrections,
            level=config.level,
            alpha=config.alpha,
            estimand=config.estimand,
            workers=workers,
        )
        for params in config.scenarios()
    ]


TIDY_COLUMNS = ("scenario",) + tuple(f.name for f in fields(ScenarioParams)) + (
    "estimator",
    "correction",
    "metric",
    "value",
)


def tidy_rows(summaries: Sequence[SimSummary]) -> list[dict]:
    """One row per scenario x estimator x correction x metric."""
    return [{"scenario": i, **row} for i, s in enumerate(summaries) for row in s.rows()]
