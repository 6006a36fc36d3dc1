"""Trial data model, column transforms and CSV input/output.

A :class:`TrialDataset` holds one two-arm randomized trial: a binary
treatment vector, baseline covariates, negative control outcomes (NCOs),
the primary outcome and the known design randomization probability.
Column roles are always declared by the caller; nothing is inferred from
header names.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataValidationError

MIN_UNITS = 4
_MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}


def _as_matrix(values, n: int, names: Sequence[str], role: str) -> np.ndarray:
    if values is None or len(names) == 0:
        if values is not None and np.size(values) != 0:
            raise DataValidationError(f"{role} values supplied without column names")
        return np.empty((n, 0), dtype=float)
    mat = np.asarray(values, dtype=float)
    if mat.ndim == 1:
        mat = mat[:, None]
    if mat.shape != (n, len(names)):
        raise DataValidationError(
            f"{role} matrix has shape {mat.shape}, expected {(n, len(names))}"
        )
    return mat


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """One two-arm randomized trial.

    Parameters
    ----------
    treatment : array_like of {0, 1}
        Assigned arm for each unit.
    outcome : array_like of float
        Primary outcome.
    design_pi : float
        Known probability of assignment to the treated arm, in (0, 1).
    covariates, ncos : array_like, shape (n, p), optional
        Baseline covariates and negative control outcomes.
    covariate_names, nco_names : sequence of str
        Column names matching the matrices above.
    outcome_name, treatment_name : str
        Names used when the dataset is written back to CSV.

    All arrays are copied and made read-only, so a dataset can be shared
    freely between threads.
    """

    treatment: np.ndarray
    outcome: np.ndarray
    design_pi: float
    covariates: np.ndarray = None
    ncos: np.ndarray = None
    covariate_names: tuple = ()
    nco_names: tuple = ()
    outcome_name: str = "Y"
    treatment_name: str = "A"
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        a = np.asarray(self.treatment)
        if a.ndim != 1:
            raise DataValidationError("treatment must be one-dimensional")
        n = a.shape[0]
        if n < MIN_UNITS:
            raise DataValidationError(f"need at least {MIN_UNITS} units, got {n}")
        if not np.all(np.isin(a, (0, 1))):
            bad = int(np.flatnonzero(~np.isin(a, (0, 1)))[0])
            raise DataValidationError(
                f"non-binary treatment value {a[bad]!r} at row {bad}"
            )
        a = a.astype(np.int8)
        n1 = int(a.sum())
        if n1 == 0 or n1 == n:
            raise DataValidationError("both arms must be non-empty")

        y = np.asarray(self.outcome, dtype=float)
        if y.shape != (n,):
            raise DataValidationError(f"outcome has shape {y.shape}, expected ({n},)")
        pi = float(self.design_pi)
        if not 0.0 < pi < 1.0:
            raise DataValidationError(f"design_pi must lie in (0, 1), got {pi}")

        cov_names = tuple(str(c) for c in self.covariate_names)
        nco_names = tuple(str(c) for c in self.nco_names)
        x = _as_matrix(self.covariates, n, cov_names, "covariate")
        nmat = _as_matrix(self.ncos, n, nco_names, "NCO")

        names = (self.treatment_name, self.outcome_name) + cov_names + nco_names
        if len(set(names)) != len(names):
            raise DataValidationError(f"duplicate column names in {names}")
        for label, arr in (("outcome", y[:, None]), ("covariate", x), ("NCO", nmat)):
            if arr.size and not np.all(np.isfinite(arr)):
                r, c = np.argwhere(~np.isfinite(arr))[0]
                raise DataValidationError(f"missing or non-finite {label} value at row {r}")

        for arr in (a, y, x, nmat):
            arr.setflags(write=False)
        set_ = object.__setattr__
        set_(self, "treatment", a)
        set_(self, "outcome", y)
        set_(self, "design_pi", pi)
        set_(self, "covariates", x)
        set_(self, "ncos", nmat)
        set_(self, "covariate_names", cov_names)
        set_(self, "nco_names", nco_names)
        index = {self.outcome_name: ("outcome", None)}
        index.update({c: ("covariates", j) for j, c in enumerate(cov_names)})
        index.update({c: ("ncos", j) for j, c in enumerate(nco_names)})
        set_(self, "_index", index)

    @property
    def n(self) -> int:
        return self.treatment.shape[0]

    @property
    def n1(self) -> int:
        return int(self.treatment.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def pi_hat(self) -> float:
        """Observed proportion treated."""
        return self.n1 / self.n

    def has_column(self, name: str) -> bool:
        return name in self._index

    def column(self, name: str) -> np.ndarray:
        """Return the values of a covariate, NCO or the outcome by name."""
        try:
            role, j = self._index[name]
        except KeyError:
            raise DataValidationError(f"unknown column {name!r}") from None
        if role == "outcome":
            return self.outcome
        return getattr(self, role)[:, j]

    def predictors(self, names: Sequence[str]) -> np.ndarray:
        """Stack the named columns into an (n, len(names)) matrix."""
        if len(names) == 0:
            return np.empty((self.n, 0))
        return np.column_stack([self.column(c) for c in names])

    def with_column(self, name: str, values) -> "TrialDataset":
        """Copy of the dataset with one named column replaced."""
        role, j = self._index.get(name, (None, None))
        if role is None:
            raise DataValidationError(f"unknown column {name!r}")
        values = np.asarray(values, dtype=float)
        if role == "outcome":
            return self._replace(outcome=values)
        mat = getattr(self, role).copy()
        mat[:, j] = values
        return self._replace(**{role: mat})

    def with_treatment(self, treatment) -> "TrialDataset":
        return self._replace(treatment=np.asarray(treatment))

    def subset(self, mask) -> "TrialDataset":
        """Rows selected by a boolean mask or index array."""
        idx = np.asarray(mask)
        return self._replace(
            treatment=self.treatment[idx],
            outcome=self.outcome[idx],
            covariates=self.covariates[idx],
            ncos=self.ncos[idx],
        )

    def _replace(self, **changes) -> "TrialDataset":
        kwargs = dict(
            treatment=self.treatment,
            outcome=self.outcome,
            design_pi=self.design_pi,
            covariates=self.covariates,
            ncos=self.ncos,
            covariate_names=self.covariate_names,
            nco_names=self.nco_names,
            outcome_name=self.outcome_name,
            treatment_name=self.treatment_name,
        )
        kwargs.update(changes)
        return TrialDataset(**kwargs)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transform:
    """A column transform.

    ``kind`` is one of ``"identity"``, ``"log10_offset"`` or
    ``"empirical_quantile"``. ``offset`` is only used by ``log10_offset``.
    """

    kind: str
    column: str
    offset: float = 0.0

    KINDS = ("identity", "log10_offset", "empirical_quantile")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "log10_offset" and not self.offset >= 0:
            raise ValueError("log10 offset must be >= 0")


def empirical_quantile(values) -> np.ndarray:
    """Midrank of each value divided by the number of values.

    Ties share their average rank, so the output lies in (0, 1] and only
    depends on the ordering of the input.
    """
    values = np.asarray(values, dtype=float)
    return rankdata(values, method="average") / values.shape[0]


def apply_transform(data: TrialDataset, t: Transform) -> TrialDataset:
    """Return a new dataset with ``t.column`` transformed."""
    values = data.column(t.column)
    if t.kind == "identity":
        return data
    if t.kind == "log10_offset":
        shifted = values + t.offset
        if np.any(shifted <= 0):
            row = int(np.flatnonzero(shifted <= 0)[0])
            raise DataValidationError(
                f"log10 of non-positive value {shifted[row]!r} in column "
                f"{t.column!r} at row {row}"
            )
        return data.with_column(t.column, np.log10(shifted))
    return data.with_column(t.column, empirical_quantile(values))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnRoles:
    """Which CSV columns play which role."""

    treatment: str
    outcome: str
    covariates: tuple = ()
    ncos: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "ncos", tuple(self.ncos))


def _parse_float(text: str, row: int, col: str) -> float:
    token = text.strip()
    if token.lower() in _MISSING_TOKENS:
        raise DataValidationError(f"missing cell at row {row}, column {col!r}")
    try:
        value = float(token)
    except ValueError:
        raise DataValidationError(
            f"non-numeric value {text!r} at row {row}, column {col!r}"
        ) from None
    if not math.isfinite(value):
        raise DataValidationError(f"non-finite value {text!r} at row {row}, column {col!r}")
    return value


def load_csv(path, roles: ColumnRoles, design_pi: float) -> TrialDataset:
    """Read a trial from a UTF-8 CSV file with a header row.

    Row numbers in error messages count data rows from 1 (the header is
    row 0). The treatment column accepts only the literals ``0`` and ``1``.
    """
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path} is empty") from None
        wanted = (roles.treatment, roles.outcome, *roles.covariates, *roles.ncos)
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataValidationError(f"missing column(s) {missing} in {path}")
        pos = {c: header.index(c) for c in wanted}
        a, y = [], []
        x = [[] for _ in roles.covariates]
        nc = [[] for _ in roles.ncos]
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataValidationError(
                    f"row {row_no} has {len(row)} cells, header has {len(header)}"
                )
            raw_a = row[pos[roles.treatment]].strip()
            if raw_a.lower() in _MISSING_TOKENS:
                raise DataValidationError(
                    f"missing cell at row {row_no}, column {roles.treatment!r}"
                )
            if raw_a not in ("0", "1"):
                raise DataValidationError(
                    f"non-binary treatment value {raw_a!r} at row {row_no}, "
                    f"column {roles.treatment!r}"
                )
            a.append(int(raw_a))
            y.append(_parse_float(row[pos[roles.outcome]], row_no, roles.outcome))
            for j, c in enumerate(roles.covariates):
                x[j].append(_parse_float(row[pos[c]], row_no, c))
            for j, c in enumerate(roles.ncos):
                nc[j].append(_parse_float(row[pos[c]], row_no, c))

    n = len(a)
    if n < MIN_UNITS:
        raise DataValidationError(f"need at least {MIN_UNITS} rows, got {n}")
    if sum(a) in (0, n):
        raise DataValidationError(
            f"empty arm in column {roles.treatment!r}: all rows have the same value"
        )
    return TrialDataset(
        treatment=np.array(a),
        outcome=np.array(y),
        design_pi=design_pi,
        covariates=np.array(x).T if x else None,
        ncos=np.array(nc).T if nc else None,
        covariate_names=roles.covariates,
        nco_names=roles.ncos,
        outcome_name=roles.outcome,
        treatment_name=roles.treatment,
    )


def emit_csv(data: TrialDataset, path) -> None:
    """Write a dataset as CSV; floats use ``repr`` so they round-trip exactly."""
    header = [data.treatment_name, data.outcome_name, *data.covariate_names, *data.nco_names]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(data.n):
            writer.writerow(
                [int(data.treatment[i]), repr(float(data.outcome[i]))]
                + [repr(float(v)) for v in data.covariates[i]]
                + [repr(float(v)) for v in data.ncos[i]]
            )


def roles_of(data: TrialDataset) -> ColumnRoles:
    """Column roles describing ``data`` (handy for round-tripping)."""
    return ColumnRoles(
        treatment=data.treatment_name,
        outcome=data.outcome_name,
        covariates=data.covariate_names,
        ncos=data.nco_names,
    )
