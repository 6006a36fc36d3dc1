"""Command-line interface.

Subcommands: ``estimate``, ``test``, ``pretest``, ``sensitivity`` and
``simulate``. Tables go to stdout (or ``--out``) as CSV, or JSON with
``--json``. Each run also writes a JSON manifest with the parameters,
seed, warnings, version and wall-clock time, to ``--manifest`` if given
and to stderr otherwise.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NCOTrialError
from .estimators import AdjustmentSpec, spec_for
from .inference import estimate_many, normalize_correction
from .randinf import (
    EpsilonRule,
    PermutationPlan,
    PretestConfig,
    equivalence_pretest,
    model_output_test,
    pretest_gate,
    pseudo_outcome_test,
    randomization_test_sharp,
    sharp_pretest,
)
from .sensitivity import APPROXIMATION_NOTE, sensitivity_curve
from .simulation import TIDY_COLUMNS, GridConfig, run_grid, tidy_rows
from .trial_data import ColumnRoles, load_csv

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _names(text: str | None) -> tuple:
    if not text:
        return ()
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ValueError(f"expected comma-separated numbers, got {text!r}") from None


def _load(args):
    roles = ColumnRoles(args.treatment, args.outcome, _names(args.covariates), _names(args.ncos))
    data = load_csv(args.data, roles, args.pi if args.pi is not None else 0.5)
    if args.pi is None:
        data = data._replace(design_pi=data.pi_hat)
    return data


def _plan(args) -> PermutationPlan:
    if args.exhaustive:
        return PermutationPlan(mode="exhaustive", seed=None)
    return PermutationPlan(B=args.B, seed=args.seed)


def _pretest_config(args, kind: str) -> PretestConfig:
    rule = EpsilonRule.parse(args.epsilon_rule) if args.epsilon_rule else None
    return PretestConfig(
        kind="equivalence" if kind == "equiv" else "sharp",
        epsilon=args.epsilon,
        alpha=args.alpha,
        plan=_plan(args),
        epsilon_rule=rule,
    )


def _default_adjust(data) -> str:
    if data.covariate_names and data.nco_names:
        return "cov+nco"
    if data.nco_names:
        return "nco"
    if data.covariate_names:
        return "cov"
    return "none"


# ---------------------------------------------------------------------------
# Subcommands. Each returns (columns, rows, details, warnings).
# ---------------------------------------------------------------------------


def cmd_estimate(args):
    data = _load(args)
    correction = normalize_correction(args.correction)
    kinds = ["none"] + [k for k in (args.adjust or []) if k != "none"]
    if not args.adjust:
        kinds += [k for k in ("cov", "nco", "cov+nco") if _available(data, k)]
    kinds = list(dict.fromkeys(kinds))
    specs = [(k, spec_for(k, data.covariate_names, data.nco_names, args.quantile_nco)) for k in kinds]
    warnings = []
    rows = []
    plug_var = None
    for kind, spec in specs:
        res = estimate_many(data, spec, (correction,), args.level, args.estimand)[correction]
        if plug_var is None:
            plug_var = res.variance
        rows.append(_estimate_row(spec.label, res, plug_var, ""))
    if args.pretest:
        cfg = _pretest_config(args, args.pretest)
        full = spec_for("cov+nco" if data.covariate_names else "nco", data.covariate_names, data.nco_names,
                        args.quantile_nco)
        gate = pretest_gate(data, full.nco_columns, cfg)
        chosen = full if gate.used_nco else AdjustmentSpec(covariate_columns=full.covariate_columns)
        res = estimate_many(data, chosen, (correction,), args.level, args.estimand)[correction]
        rows.append(_estimate_row(f"gated-{gate.kind}({full.label})", res, plug_var, gate.branch))
        if not gate.used_nco:
            warnings.append(f"{gate.kind} pretest declined NCO adjustment; p-values {gate.p_values}")
    cols = ["estimator", "estimand", "correction", "estimate", "ci_low", "ci_high", "variance",
            "relative_efficiency", "wald_p", "branch"]
    return cols, rows, {"n": data.n, "n1": data.n1, "pi_hat": data.pi_hat}, warnings


def _available(data, kind: str) -> bool:
    need_cov = kind in ("cov", "cov+nco")
    need_nco = kind in ("nco", "cov+nco")
    return (not need_cov or bool(data.covariate_names)) and (not need_nco or bool(data.nco_names))


def _estimate_row(label, res, plug_var, branch):
    return {
        "estimator": label,
        "estimand": res.estimand,
        "correction": res.correction,
        "estimate": res.estimate,
        "ci_low": res.ci_low,
        "ci_high": res.ci_high,
        "variance": res.variance,
        "relative_efficiency": res.variance / plug_var if plug_var > 0 else math.nan,
        "wald_p": res.wald_p,
        "branch": branch,
    }


def cmd_test(args):
    data = _load(args)
    plan = _plan(args)
    kind = args.adjust or _default_adjust(data)
    spec = spec_for(kind, data.covariate_names, data.nco_names, args.quantile_nco)
    if args.statistic in ("diff_means", "robust_t"):
        res = randomization_test_sharp(data, None, args.statistic, plan)
        label = args.statistic
    elif args.statistic == "model":
        res = model_output_test(data, spec, plan)
        label = f"model_output({spec.label})"
    else:
        res = pseudo_outcome_test(data, spec, "diff_means", plan)
        label = f"pseudo_outcome({spec.label})"
    row = {
        "test": label,
        "statistic": res.statistic,
        "p_value": res.p_value,
        "n_draws": res.n_draws,
        "n_extreme": res.n_extreme,
        "n_infeasible": res.n_infeasible,
        "mode": res.mode,
    }
    warnings = []
    if res.n_infeasible:
        warnings.append(f"{res.n_infeasible} assignments gave an undefined statistic and counted as extreme")
    return list(row), [row], {"seed": plan.seed}, warnings


def cmd_pretest(args):
    data = _load(args)
    if not data.nco_names:
        raise ValueError("pretest needs at least one NCO (--ncos)")
    cfg = _pretest_config(args, args.pretest)
    warnings = []
    rows = []
    for c in data.nco_names:
        if np.ptp(data.column(c)) == 0:
            warnings.append(f"NCO {c!r} is constant and unusable for adjustment")
        row = {"nco": c, "kind": cfg.kind, "p_value": math.nan, "p_lower": math.nan,
               "p_upper": math.nan, "epsilon": math.nan, "reject": None}
        if cfg.kind == "sharp":
            res = sharp_pretest(data, c, cfg)
            row.update(p_value=res.p_value, reject=res.p_value <= cfg.alpha)
        else:
            res = equivalence_pretest(data, c, cfg)
            row.update(p_lower=res.p_lower, p_upper=res.p_upper, epsilon=res.epsilon,
                       reject=res.reject_equiv_null)
        rows.append(row)
    gate = pretest_gate(data, data.nco_names, cfg)
    for row in rows:
        row["recommendation"] = "adjust" if gate.used_nco else "do-not-adjust"
    cols = ["nco", "kind", "p_value", "p_lower", "p_upper", "epsilon", "reject", "recommendation"]
    return cols, rows, {"gate": gate.branch, "seed": cfg.plan.seed}, warnings


def cmd_sensitivity(args):
    data = _load(args)
    if len(data.nco_names) != 1:
        raise ValueError("sensitivity analysis needs exactly one NCO (--ncos)")
    kind = args.adjust or ("cov+nco" if data.covariate_names else "nco")
    spec = spec_for(kind, data.covariate_names, data.nco_names, args.quantile_nco)
    curve = sensitivity_curve(data, spec, _floats(args.delta_grid), args.correction, args.level)
    rows = [
        {"delta": p.delta, "estimate": p.estimate, "ci_low": p.ci_low, "ci_high": p.ci_high}
        for p in curve.grid
    ]
    details = {"gamma_hat": curve.gamma_hat, "adjustment": spec.label, "note": APPROXIMATION_NOTE}
    return ["delta", "estimate", "ci_low", "ci_high"], rows, details, []


def cmd_simulate(args):
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValueError(f"no such config file: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"config is not valid JSON: {exc}") from None
    config = GridConfig.from_dict(raw)
    summaries = run_grid(config, workers=args.threads)
    warnings = []
    for i, s in enumerate(summaries):
        if s.failures:
            warnings.append(f"scenario {i}: {len(s.failures)} estimator failures excluded")
    details = {
        "scenarios": len(summaries),
        "redraws": [s.redraws for s in summaries],
        "metadata": summaries[0].metadata if summaries else {},
    }
    return list(TIDY_COLUMNS), tidy_rows(summaries), details, warnings


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _write_table(fh, cols, rows, as_json: bool) -> None:
    if as_json:
        json.dump([_jsonable({c: r.get(c) for c in cols}) for r in rows], fh, indent=2)
        fh.write("\n")
        return
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r.get(c) is None else r.get(c) for c in cols])


def _add_data_args(p, adjust_repeatable=False):
    p.add_argument("--data", required=True, help="trial CSV with a header row")
    p.add_argument("--treatment", default="A")
    p.add_argument("--outcome", default="Y")
    p.add_argument("--covariates", help="comma-separated covariate columns")
    p.add_argument("--ncos", help="comma-separated NCO columns")
    p.add_argument("--pi", type=float, help="design probability of treatment (default: observed)")
    choices = ["none", "cov", "nco", "cov+nco"]
    if adjust_repeatable:
        p.add_argument("--adjust", choices=choices, action="append",
                       help="adjustment set; repeatable (default: all available)")
    else:
        p.add_argument("--adjust", choices=choices, help="adjustment set")
    p.add_argument("--quantile-nco", action="store_true", help="use NCO empirical quantiles")


def _add_perm_args(p):
    p.add_argument("--B", type=int, default=1000, help="Monte Carlo re-randomizations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exhaustive", action="store_true", help="enumerate every assignment")


def _add_pretest_args(p, required):
    p.add_argument("--pretest", choices=["sharp", "equiv"], required=required)
    p.add_argument("--epsilon", type=float, help="equivalence margin")
    p.add_argument("--epsilon-rule", help="margin as a fraction of the outcome, e.g. sd:0.5")
    p.add_argument("--alpha", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncotrial", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--out", help="output file (simulate: output directory)")
        p.add_argument("--json", action="store_true", help="write the table as JSON")
        p.add_argument("--manifest", help="manifest path (default: stderr)")

    p = sub.add_parser("estimate", help="treatment-effect estimates with CIs")
    _add_data_args(p, adjust_repeatable=True)
    p.add_argument("--correction", default="hc3", type=str.lower,
                   choices=["hc0", "hc1", "hc2", "hc3", "neyman"])
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--estimand", default="ATE", type=str.upper, choices=["ATE", "SATE"])
    _add_pretest_args(p, required=False)
    _add_perm_args(p)
    common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("test", help="randomization test of the sharp null")
    _add_data_args(p)
    p.add_argument("--statistic", default="diff_means",
                   choices=["diff_means", "robust_t", "model", "pseudo"])
    _add_perm_args(p)
    common(p)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("pretest", help="NCO validity pretest")
    _add_data_args(p)
    _add_pretest_args(p, required=False)
    _add_perm_args(p)
    common(p)
    p.set_defaults(func=cmd_pretest, pretest="sharp")

    p = sub.add_parser("sensitivity", help="bias-corrected estimates over assumed NCO effects")
    _add_data_args(p)
    p.add_argument("--delta-grid", required=True, help="comma-separated NCO effects")
    p.add_argument("--correction", default="hc3", type=str.lower, choices=["hc0", "hc1", "hc2", "hc3"])
    p.add_argument("--level", type=float, default=0.95)
    common(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("simulate", help="Monte Carlo scenario grid")
    p.add_argument("--config", required=True, help="JSON scenario grid")
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    common(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.perf_counter()
    try:
        cols, rows, details, warnings = args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NCOTrialError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    params = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "subcommand": args.subcommand,
        "parameters": params,
        "seed": params.get("seed"),
        "warnings": warnings,
        "version": __version__,
        "duration_seconds": time.perf_counter() - start,
        "details": details,
    }
    if args.subcommand == "simulate" and args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        table_path = out_dir / ("results.json" if args.json else "results.csv")
        with table_path.open("w", newline="", encoding="utf-8") as fh:
            _write_table(fh, cols, rows, args.json)
        manifest_path = Path(args.manifest) if args.manifest else out_dir / "manifest.json"
    else:
        if args.out:
            with open(args.out, "w", newline="", encoding="utf-8") as fh:
                _write_table(fh, cols, rows, args.json)
        else:
            _write_table(sys.stdout, cols, rows, args.json)
        manifest_path = Path(args.manifest) if args.manifest else None
    text = json.dumps(_jsonable(manifest), indent=2, default=str)
    if manifest_path is not None:
        manifest_path.write_text(text + "\n", encoding="utf-8")
    else:
        print(text, file=sys.stderr)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
