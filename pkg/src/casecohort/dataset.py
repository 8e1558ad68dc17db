"""Observed data for interval-censored case-cohort studies.

Each subject is reduced to the interval ``(left, right]`` known to contain its
failure time, together with cheap covariates ``z`` (always observed), optional
auxiliary variables ``xstar`` (always observed when collected) and expensive
covariates ``x`` (observed only for subjects selected into the case-cohort
sample).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "DataError",
    "IntervalObservation",
    "SamplingDesign",
    "CohortDataset",
    "reduce_exam_history",
    "inclusion_probability",
    "sampling_weight",
    "sampling_weights",
    "estimate_design",
    "load_dataset",
    "write_dataset",
]


class DataError(ValueError):
    """Raised for malformed observations or input files."""


def reduce_exam_history(exam_times, event_flags):
    """Reduce an examination history to its bracketing interval.

    Parameters
    ----------
    exam_times : array-like of shape (K,)
        Strictly increasing, positive examination times ``U_1 < ... < U_K``.
    event_flags : array-like of shape (K + 1,)
        Indicators ``Delta_1, ..., Delta_{K+1}``; exactly one must be set.
        ``Delta_k = 1`` means the failure happened in ``(U_{k-1}, U_k]`` with
        ``U_0 = 0`` and ``U_{K+1} = inf``.

    Returns
    -------
    left, right : float
        The interval ``(left, right]``; ``right`` is ``inf`` when the subject
        was event-free at the last examination.
    """
    u = np.asarray(exam_times, dtype=float).ravel()
    flags = np.asarray(event_flags).ravel()
    if u.size < 1:
        raise DataError("at least one attended examination is required")
    if flags.size != u.size + 1:
        raise DataError(
            f"expected {u.size + 1} event flags for {u.size} examinations, got {flags.size}"
        )
    if not np.all(np.isfinite(u)) or u[0] <= 0 or np.any(np.diff(u) <= 0):
        raise DataError("examination times must be positive and strictly increasing")
    if not np.all((flags == 0) | (flags == 1)) or flags.sum() != 1:
        raise DataError("malformed history: exactly one event flag must be set")
    k = int(np.flatnonzero(flags)[0])
    bounds = np.concatenate(([0.0], u, [np.inf]))
    return float(bounds[k]), float(bounds[k + 1])


@dataclass(frozen=True)
class SamplingDesign:
    """Bernoulli subcohort probability ``q_s`` and case-selection probability ``q_c``."""

    q_s: float
    q_c: float = 1.0

    def __post_init__(self):
        for name in ("q_s", "q_c"):
            value = getattr(self, name)
            if not (0.0 < value <= 1.0):
                raise DataError(f"{name} must lie in (0, 1], got {value!r}")


def inclusion_probability(delta, design: SamplingDesign):
    """Probability of entering the case-cohort sample given the case indicator."""
    delta = np.asarray(delta, dtype=float)
    case_prob = design.q_s + (1.0 - design.q_s) * design.q_c
    return (1.0 - delta) * design.q_s + delta * case_prob


def sampling_weight(delta: int, xi: int, design: SamplingDesign) -> float:
    """Inverse-probability weight ``xi / pi(delta)`` of a single subject."""
    if not xi:
        return 0.0
    return 1.0 / float(inclusion_probability(delta, design))


def sampling_weights(delta, xi, design: SamplingDesign) -> np.ndarray:
    """Vectorised :func:`sampling_weight`."""
    xi = np.asarray(xi, dtype=float)
    return np.where(xi > 0, 1.0 / inclusion_probability(delta, design), 0.0)


@dataclass(frozen=True)
class IntervalObservation:
    """One subject of the cohort.

    ``x`` is ``None`` unless the subject was sampled (``sampled == 1``).
    """

    id: str
    left: float
    right: float
    z: tuple = ()
    xstar: tuple | None = None
    x: tuple | None = None
    subcohort: int = 0
    selected_case: int = 0
    sampled: int = 0

    @property
    def delta(self) -> int:
        return int(math.isfinite(self.right))

    def validate(self):
        if not (self.left >= 0 and math.isfinite(self.left)):
            raise DataError(f"subject {self.id}: left must be finite and >= 0")
        if not self.right > self.left:
            raise DataError(f"subject {self.id}: right must exceed left")
        for name in ("subcohort", "selected_case", "sampled"):
            if getattr(self, name) not in (0, 1):
                raise DataError(f"subject {self.id}: {name} must be 0 or 1")
        if self.sampled != max(self.subcohort, self.selected_case):
            raise DataError(f"subject {self.id}: xi must equal max(eta, zeta)")
        if self.selected_case and (self.subcohort or not self.delta):
            raise DataError(
                f"subject {self.id}: a selected case must be a case outside the subcohort"
            )
        if self.sampled and self.x is None:
            raise DataError(f"subject {self.id}: sampled subject is missing x")
        if not self.sampled and self.x is not None:
            raise DataError(f"subject {self.id}: x given for an unsampled subject")


def _as_matrix(values, n, name):
    if values is None:
        return np.zeros((n, 0))
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(n, -1) if arr.size else np.zeros((n, 0))
    if arr.shape[0] != n:
        raise DataError(f"{name} has {arr.shape[0]} rows, expected {n}")
    return arr


@dataclass(frozen=True, eq=False)
class CohortDataset:
    """Array-backed full cohort with phase-two sampling indicators.

    Rows of ``x`` belonging to unsampled subjects hold ``nan`` and are never
    used by the estimators, which only look at rows with a positive weight.

    Use :meth:`from_arrays` or :meth:`from_subjects` rather than the raw
    constructor so that the invariants are checked.
    """

    left: np.ndarray
    right: np.ndarray
    z: np.ndarray
    xstar: np.ndarray
    x: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray
    design: SamplingDesign
    ids: tuple = ()
    z_names: tuple = ()
    xstar_names: tuple = ()
    x_names: tuple = ()
    _subjects: tuple | None = field(default=None, repr=False)

    @classmethod
    def from_arrays(
        cls,
        left,
        right,
        design: SamplingDesign,
        *,
        x=None,
        z=None,
        xstar=None,
        eta=None,
        zeta=None,
        ids=None,
        z_names=None,
        xstar_names=None,
        x_names=None,
    ) -> "CohortDataset":
        """Build and validate a dataset from column arrays.

        ``eta``/``zeta`` default to "everyone in the subcohort", which is the
        full-cohort design ``q_s = 1``.
        """
        left = np.asarray(left, dtype=float).ravel()
        right = np.asarray(right, dtype=float).ravel()
        n = left.size
        if right.size != n:
            raise DataError("left and right must have the same length")
        eta = np.ones(n, dtype=np.int8) if eta is None else np.asarray(eta).astype(np.int8)
        zeta = np.zeros(n, dtype=np.int8) if zeta is None else np.asarray(zeta).astype(np.int8)
        x = _as_matrix(x, n, "x")
        z = _as_matrix(z, n, "z")
        xstar = _as_matrix(xstar, n, "xstar")
        x = x.copy()
        x[(np.maximum(eta, zeta) == 0)] = np.nan
        ds = cls(
            left=left,
            right=right,
            z=z,
            xstar=xstar,
            x=x,
            eta=eta,
            zeta=zeta,
            design=design,
            ids=tuple(ids) if ids is not None else tuple(str(i + 1) for i in range(n)),
            z_names=tuple(z_names or (f"z{j + 1}" for j in range(z.shape[1]))),
            xstar_names=tuple(xstar_names or (f"xstar{j + 1}" for j in range(xstar.shape[1]))),
            x_names=tuple(x_names or (f"x{j + 1}" for j in range(x.shape[1]))),
        )
        ds.validate()
        return ds

    @classmethod
    def from_subjects(
        cls,
        subjects: Sequence[IntervalObservation],
        design: SamplingDesign,
        *,
        z_names=None,
        xstar_names=None,
        x_names=None,
    ) -> "CohortDataset":
        """Build a dataset from observation records.

        ``x`` is read only from sampled subjects.
        """
        subjects = tuple(subjects)
        if not subjects:
            raise DataError("empty dataset")
        for s in subjects:
            s.validate()
        n = len(subjects)
        p_z = len(subjects[0].z)
        has_xstar = subjects[0].xstar is not None
        p_a = len(subjects[0].xstar) if has_xstar else 0
        sampled = [s for s in subjects if s.sampled]
        p_x = len(sampled[0].x) if sampled else 0
        x = np.full((n, p_x), np.nan)
        z = np.empty((n, p_z))
        xstar = np.empty((n, p_a))
        for i, s in enumerate(subjects):
            if len(s.z) != p_z:
                raise DataError(f"subject {s.id}: expected {p_z} z covariates")
            z[i] = s.z
            if (s.xstar is not None) != has_xstar or (has_xstar and len(s.xstar) != p_a):
                raise DataError(f"subject {s.id}: inconsistent xstar")
            if has_xstar:
                xstar[i] = s.xstar
            if s.sampled:
                if len(s.x) != p_x:
                    raise DataError(f"subject {s.id}: expected {p_x} x covariates")
                x[i] = s.x
        ds = cls(
            left=np.array([s.left for s in subjects], dtype=float),
            right=np.array([s.right for s in subjects], dtype=float),
            z=z,
            xstar=xstar,
            x=x,
            eta=np.array([s.subcohort for s in subjects], dtype=np.int8),
            zeta=np.array([s.selected_case for s in subjects], dtype=np.int8),
            design=design,
            ids=tuple(s.id for s in subjects),
            z_names=tuple(z_names or (f"z{j + 1}" for j in range(p_z))),
            xstar_names=tuple(xstar_names or (f"xstar{j + 1}" for j in range(p_a))),
            x_names=tuple(x_names or (f"x{j + 1}" for j in range(p_x))),
            _subjects=subjects,
        )
        ds.validate()
        return ds

    def validate(self):
        n = self.n
        if n == 0:
            raise DataError("empty dataset")
        for name in ("right", "z", "xstar", "x", "eta", "zeta"):
            if len(getattr(self, name)) != n:
                raise DataError(f"{name} has the wrong number of rows")
        if len(self.ids) != n:
            raise DataError("ids has the wrong length")
        bad = ~(np.isfinite(self.left) & (self.left >= 0))
        if bad.any():
            raise DataError(f"row {int(np.argmax(bad)) + 1}: left must be finite and >= 0")
        bad = ~(self.right > self.left)
        if bad.any():
            raise DataError(f"row {int(np.argmax(bad)) + 1}: right must exceed left")
        for name in ("eta", "zeta"):
            arr = getattr(self, name)
            if not np.all((arr == 0) | (arr == 1)):
                raise DataError(f"{name} must be 0/1")
        bad = (self.zeta == 1) & ((self.eta == 1) | (self.delta == 0))
        if bad.any():
            raise DataError(
                f"row {int(np.argmax(bad)) + 1}: a selected case must be a case outside the subcohort"
            )
        if self.x.shape[1]:
            missing = self.xi.astype(bool) & np.isnan(self.x).any(axis=1)
            if missing.any():
                raise DataError(f"row {int(np.argmax(missing)) + 1}: sampled subject is missing x")
        for name in ("z", "xstar"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"{name} must be finite")
        if self.design.q_s == 1.0 and not np.all(self.eta == 1):
            raise DataError("q_s = 1 requires every subject in the subcohort")

    @property
    def n(self) -> int:
        return self.left.size

    @cached_property
    def delta(self) -> np.ndarray:
        return np.isfinite(self.right).astype(np.int8)

    @cached_property
    def xi(self) -> np.ndarray:
        return np.maximum(self.eta, self.zeta)

    @property
    def has_xstar(self) -> bool:
        return self.xstar.shape[1] > 0

    @property
    def subjects(self) -> tuple:
        """Per-subject records (built on demand)."""
        if self._subjects is not None:
            return self._subjects
        out = []
        for i in range(self.n):
            out.append(
                IntervalObservation(
                    id=self.ids[i],
                    left=float(self.left[i]),
                    right=float(self.right[i]),
                    z=tuple(self.z[i]),
                    xstar=tuple(self.xstar[i]) if self.has_xstar else None,
                    x=tuple(self.x[i]) if self.xi[i] else None,
                    subcohort=int(self.eta[i]),
                    selected_case=int(self.zeta[i]),
                    sampled=int(self.xi[i]),
                )
            )
        object.__setattr__(self, "_subjects", tuple(out))
        return self._subjects

    def ipw_weights(self, design: SamplingDesign | None = None) -> np.ndarray:
        """Inverse-probability weights; zero for unsampled subjects."""
        return sampling_weights(self.delta, self.xi, design or self.design)

    def finite_endpoints(self) -> np.ndarray:
        """All strictly positive, finite interval endpoints."""
        ends = np.concatenate([self.left, self.right])
        return ends[np.isfinite(ends) & (ends > 0)]

    def with_design(self, design: SamplingDesign) -> "CohortDataset":
        ds = CohortDataset(
            **{
                f: getattr(self, f)
                for f in (
                    "left", "right", "z", "xstar", "x", "eta", "zeta",
                    "ids", "z_names", "xstar_names", "x_names",
                )
            },
            design=design,
        )
        ds.validate()
        return ds

    def take(self, rows) -> "CohortDataset":
        """Subset (or reorder, or duplicate) subjects by integer index."""
        rows = np.asarray(rows, dtype=int)
        return CohortDataset(
            left=self.left[rows],
            right=self.right[rows],
            z=self.z[rows],
            xstar=self.xstar[rows],
            x=self.x[rows],
            eta=self.eta[rows],
            zeta=self.zeta[rows],
            design=self.design,
            ids=tuple(self.ids[i] for i in rows),
            z_names=self.z_names,
            xstar_names=self.xstar_names,
            x_names=self.x_names,
        )


def estimate_design(data: CohortDataset) -> SamplingDesign:
    """Plug-in selection fractions ``(q_s, q_c)`` from the sampling indicators."""
    q_s = float(np.mean(data.eta))
    eligible = (data.delta == 1) & (data.eta == 0)
    q_c = float(np.mean(data.zeta[eligible])) if eligible.any() else 1.0
    if q_s <= 0 or q_c <= 0:
        raise DataError("cannot estimate a design with an empty subcohort or no selected cases")
    return SamplingDesign(q_s=q_s, q_c=q_c)


_REQUIRED = ("id", "left", "right", "xi", "eta", "zeta")


def _parse_float(text, row, column):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"row {row}: cannot parse {column}={text!r} as a number") from None


def _parse_flag(text, row, column):
    value = _parse_float(text, row, column)
    if value not in (0.0, 1.0):
        raise DataError(f"row {row}: {column} must be 0 or 1, got {text!r}")
    return int(value)


def load_dataset(path, design: SamplingDesign) -> CohortDataset:
    """Read a cohort CSV file.

    The header must contain ``id,left,right,xi,eta,zeta`` followed by any
    number of ``z:<name>``, ``xstar:<name>`` and ``x:<name>`` columns.
    ``right`` accepts ``inf``. ``x`` cells must be empty exactly when
    ``xi = 0``. Row numbers in error messages count data rows from 1.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in _REQUIRED if c not in header]
        if missing:
            raise DataError(f"{path}: missing required columns {missing}")
        col = {name: header.index(name) for name in _REQUIRED}
        blocks = {"z": [], "xstar": [], "x": []}
        for j, h in enumerate(header):
            prefix, sep, name = h.partition(":")
            if sep and prefix in blocks:
                blocks[prefix].append((j, name))
            elif h not in _REQUIRED:
                raise DataError(f"{path}: unrecognised column {h!r}")
        subjects = []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            cell = [c.strip() for c in row]
            left = _parse_float(cell[col["left"]], row_no, "left")
            right = _parse_float(cell[col["right"]], row_no, "right")
            if not right > left:
                raise DataError(f"row {row_no}: right ({right}) must exceed left ({left})")
            xi = _parse_flag(cell[col["xi"]], row_no, "xi")
            x_cells = [cell[j] for j, _ in blocks["x"]]
            if xi:
                if any(c == "" for c in x_cells):
                    raise DataError(f"row {row_no}: xi=1 but x is empty")
                x = tuple(_parse_float(cell[j], row_no, f"x:{nm}") for j, nm in blocks["x"])
            else:
                if any(c != "" for c in x_cells):
                    raise DataError(f"row {row_no}: x present although xi=0")
                x = None
            obs = IntervalObservation(
                id=cell[col["id"]],
                left=left,
                right=right,
                z=tuple(_parse_float(cell[j], row_no, f"z:{nm}") for j, nm in blocks["z"]),
                xstar=(
                    tuple(_parse_float(cell[j], row_no, f"xstar:{nm}") for j, nm in blocks["xstar"])
                    if blocks["xstar"]
                    else None
                ),
                x=x,
                subcohort=_parse_flag(cell[col["eta"]], row_no, "eta"),
                selected_case=_parse_flag(cell[col["zeta"]], row_no, "zeta"),
                sampled=xi,
            )
            try:
                obs.validate()
            except DataError as exc:
                raise DataError(f"row {row_no}: {exc}") from None
            subjects.append(obs)
    if not subjects:
        raise DataError(f"{path}: no data rows")
    return CohortDataset.from_subjects(
        subjects,
        design,
        z_names=[nm for _, nm in blocks["z"]],
        xstar_names=[nm for _, nm in blocks["xstar"]],
        x_names=[nm for _, nm in blocks["x"]],
    )


def _fmt(v):
    return "inf" if v == np.inf else repr(float(v))


def write_dataset(data: CohortDataset, path):
    """Write ``data`` in the CSV layout read by :func:`load_dataset`."""
    header = list(_REQUIRED)
    header += [f"z:{nm}" for nm in data.z_names]
    header += [f"xstar:{nm}" for nm in data.xstar_names]
    header += [f"x:{nm}" for nm in data.x_names]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            row = [data.ids[i], _fmt(data.left[i]), _fmt(data.right[i]),
                   int(data.xi[i]), int(data.eta[i]), int(data.zeta[i])]
            row += [_fmt(v) for v in data.z[i]]
            row += [_fmt(v) for v in data.xstar[i]]
            row += [_fmt(v) for v in data.x[i]] if data.xi[i] else [""] * data.x.shape[1]
            w.writerow(row)
