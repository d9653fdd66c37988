"""In-memory representation of a blocked cluster-randomized tutoring trial.

A :class:`TrialDataset` holds one row per student (hierarchy labels,
treatment flag, outcome, covariates) and one row per worked section for
treated students (the mastery log). Data are stored columnar in read-only
numpy arrays; :attr:`TrialDataset.students` and :attr:`TrialDataset.records`
give record-style views.

File schemas::

    students.csv  student_id,block_id,school_id,teacher_id,z,y,pretest,<covariates...>
    mastery.csv   student_id,section_id,mastered[,order]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

STUDENT_COLUMNS = ("student_id", "block_id", "school_id", "teacher_id", "z", "y", "pretest")
MASTERY_COLUMNS = ("student_id", "section_id", "mastered")
PRETEST = "pretest"
PRETEST_SQ = "pretest_sq"


class DataValidationError(ValueError):
    """Input data violate the trial schema or its invariants.

    ``issues`` holds ``(row, message)`` pairs; ``row`` is the 1-based data
    row in the offending file (header excluded) or ``None``.
    """

    def __init__(self, message: str, issues: list[tuple[int | None, str]] | None = None):
        self.issues = list(issues or [])
        if self.issues:
            shown = "; ".join(
                (f"row {r}: {m}" if r is not None else m) for r, m in self.issues[:10]
            )
            more = f" (+{len(self.issues) - 10} more)" if len(self.issues) > 10 else ""
            message = f"{message}: {shown}{more}"
        super().__init__(message)


class MbarUndefinedError(DataValidationError):
    """Student has no mastery records, so the mastered fraction is undefined."""


@dataclass(frozen=True)
class Student:
    student_id: str
    block_id: str
    school_id: str
    teacher_id: str
    z: int
    y: float
    covariates: tuple[float, ...]
    has_mastery_logs: bool


@dataclass(frozen=True)
class MasteryRecord:
    student_id: str
    section_id: str
    mastered: int
    order: int | None = None


@dataclass(frozen=True)
class IngestOptions:
    """Section filters applied at load time.

    Sections worked by fewer than ``min_students`` treated students are
    dropped, as are sections mastered by every worker (and, so that every
    retained section has a finite difficulty, sections mastered by none).
    """

    min_students: int = 100
    drop_always_mastered: bool = True
    drop_never_mastered: bool = True


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _factorize(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    codes, uniques = pd.factorize(pd.Series(labels, dtype=object), sort=False)
    return codes.astype(np.intp), np.asarray(uniques, dtype=object)


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Validated, immutable trial data.

    Attributes:
        student_ids, block_ids, school_ids, teacher_ids: per-student labels.
        z: treatment indicator (0/1).
        y: posttest score.
        X: covariate matrix, one column per name in ``covariate_names``.
        section_ids: retained sections; ``rec_section`` indexes into it.
        rec_student: per-record index into the student arrays.
        rec_mastered: per-record mastery indicator.
        rec_order: optional per-record order (reporting only); -1 when absent.
        dropped_sections: ``(section_id, reason)`` pairs removed by filters.
    """

    student_ids: np.ndarray
    block_ids: np.ndarray
    school_ids: np.ndarray
    teacher_ids: np.ndarray
    z: np.ndarray
    y: np.ndarray
    X: np.ndarray
    covariate_names: tuple[str, ...]
    section_ids: tuple[str, ...]
    rec_student: np.ndarray
    rec_section: np.ndarray
    rec_mastered: np.ndarray
    rec_order: np.ndarray | None = None
    provenance: str = ""
    dropped_sections: tuple[tuple[str, str], ...] = ()
    control_rows_dropped: int = 0
    _codes: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.student_ids)
        conv = {
            "student_ids": np.asarray(self.student_ids, dtype=object).astype(str).astype(object),
            "block_ids": np.asarray(self.block_ids, dtype=object).astype(str).astype(object),
            "school_ids": np.asarray(self.school_ids, dtype=object).astype(str).astype(object),
            "teacher_ids": np.asarray(self.teacher_ids, dtype=object).astype(str).astype(object),
            "z": np.asarray(self.z, dtype=np.int8),
            "y": np.asarray(self.y, dtype=float),
            "X": np.asarray(self.X, dtype=float).reshape(n, -1),
            "rec_student": np.asarray(self.rec_student, dtype=np.intp),
            "rec_section": np.asarray(self.rec_section, dtype=np.intp),
            "rec_mastered": np.asarray(self.rec_mastered, dtype=np.int8),
        }
        if self.rec_order is not None:
            conv["rec_order"] = np.asarray(self.rec_order, dtype=np.int64)
        for k, v in conv.items():
            object.__setattr__(self, k, _readonly(v))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "section_ids", tuple(str(s) for s in self.section_ids))
        self._validate()

    # -- validation -----------------------------------------------------
    def _validate(self) -> None:
        n = self.n_students
        issues: list[tuple[int | None, str]] = []
        for name in ("block_ids", "school_ids", "teacher_ids", "z", "y"):
            if len(getattr(self, name)) != n:
                issues.append((None, f"{name} has length {len(getattr(self, name))}, expected {n}"))
        if self.X.shape[1] != len(self.covariate_names):
            issues.append((None, "covariate_names does not match X columns"))
        if issues:
            raise DataValidationError("inconsistent dataset", issues)
        if len(set(self.student_ids)) != n:
            raise DataValidationError("duplicate student_id values")
        if not np.isin(self.z, (0, 1)).all():
            raise DataValidationError("z must be 0 or 1")
        if not (np.isfinite(self.y).all() and np.isfinite(self.X).all()):
            raise DataValidationError("non-finite outcome or covariate values")
        check_nesting(self.block_ids, self.school_ids, self.teacher_ids)

        r = len(self.rec_student)
        if len(self.rec_section) != r or len(self.rec_mastered) != r:
            raise DataValidationError("record arrays differ in length")
        if self.rec_order is not None and len(self.rec_order) != r:
            raise DataValidationError("record order array has wrong length")
        if r:
            if self.rec_student.min() < 0 or self.rec_student.max() >= n:
                raise DataValidationError("record references an unknown student")
            if self.rec_section.min() < 0 or self.rec_section.max() >= len(self.section_ids):
                raise DataValidationError("record references a section not in section_ids")
            if not np.isin(self.rec_mastered, (0, 1)).all():
                raise DataValidationError("mastered must be 0 or 1")
            if (self.z[self.rec_student] != 1).any():
                raise DataValidationError("mastery records for control students")
            key = self.rec_student.astype(np.int64) * max(len(self.section_ids), 1) + self.rec_section
            if len(np.unique(key)) != r:
                raise DataValidationError("duplicate (student_id, section_id) records")

    # -- sizes and derived views -----------------------------------------
    @property
    def n_students(self) -> int:
        return len(self.student_ids)

    @property
    def n_records(self) -> int:
        return len(self.rec_student)

    @property
    def n_sections(self) -> int:
        return len(self.section_ids)

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def n_sec(self) -> np.ndarray:
        """Number of worked (retained) sections per student."""
        return np.bincount(self.rec_student, minlength=self.n_students)

    @property
    def has_mastery_logs(self) -> np.ndarray:
        return self.n_sec > 0

    def _coded(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self._codes:
            self._codes[name] = _factorize(getattr(self, name))
        return self._codes[name]

    @property
    def block_index(self) -> np.ndarray:
        return self._coded("block_ids")[0]

    @property
    def school_index(self) -> np.ndarray:
        return self._coded("school_ids")[0]

    @property
    def teacher_index(self) -> np.ndarray:
        return self._coded("teacher_ids")[0]

    @property
    def block_labels(self) -> np.ndarray:
        return self._coded("block_ids")[1]

    @property
    def school_labels(self) -> np.ndarray:
        return self._coded("school_ids")[1]

    @property
    def teacher_labels(self) -> np.ndarray:
        return self._coded("teacher_ids")[1]

    @property
    def students(self) -> list[Student]:
        logs = self.has_mastery_logs
        return [
            Student(
                student_id=self.student_ids[i],
                block_id=self.block_ids[i],
                school_id=self.school_ids[i],
                teacher_id=self.teacher_ids[i],
                z=int(self.z[i]),
                y=float(self.y[i]),
                covariates=tuple(float(v) for v in self.X[i]),
                has_mastery_logs=bool(logs[i]),
            )
            for i in range(self.n_students)
        ]

    @property
    def records(self) -> list[MasteryRecord]:
        order = self.rec_order
        return [
            MasteryRecord(
                student_id=self.student_ids[self.rec_student[k]],
                section_id=self.section_ids[self.rec_section[k]],
                mastered=int(self.rec_mastered[k]),
                order=None if order is None or order[k] < 0 else int(order[k]),
            )
            for k in range(self.n_records)
        ]

    def covariate(self, name: str) -> np.ndarray:
        return self.X[:, self.covariate_names.index(name)]

    def index_of(self, student_id: str) -> int:
        hits = np.flatnonzero(self.student_ids == str(student_id))
        if len(hits) == 0:
            raise KeyError(student_id)
        return int(hits[0])

    def replace(self, **changes) -> TrialDataset:
        """Return a copy with some fields replaced (re-validated)."""
        names = [
            "student_ids", "block_ids", "school_ids", "teacher_ids", "z", "y", "X",
            "covariate_names", "section_ids", "rec_student", "rec_section",
            "rec_mastered", "rec_order", "provenance", "dropped_sections",
            "control_rows_dropped",
        ]
        kw = {k: getattr(self, k) for k in names}
        kw.update(changes)
        return TrialDataset(**kw)

    def subset_students(self, keep: np.ndarray) -> TrialDataset:
        """Keep the students selected by a boolean mask, with their records."""
        keep = np.asarray(keep, dtype=bool)
        new_index = np.cumsum(keep) - 1
        rmask = keep[self.rec_student]
        return self.replace(
            student_ids=self.student_ids[keep],
            block_ids=self.block_ids[keep],
            school_ids=self.school_ids[keep],
            teacher_ids=self.teacher_ids[keep],
            z=self.z[keep],
            y=self.y[keep],
            X=self.X[keep],
            rec_student=new_index[self.rec_student[rmask]],
            rec_section=self.rec_section[rmask],
            rec_mastered=self.rec_mastered[rmask],
            rec_order=None if self.rec_order is None else self.rec_order[rmask],
        )

    def equals(self, other: TrialDataset) -> bool:
        """Exact equality of all data fields (provenance excluded)."""
        if not isinstance(other, TrialDataset):
            return False
        arrays = ("student_ids", "block_ids", "school_ids", "teacher_ids", "z", "y", "X",
                  "rec_student", "rec_section", "rec_mastered")
        if self.covariate_names != other.covariate_names or self.section_ids != other.section_ids:
            return False
        if any(not np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays):
            return False
        lo = self.rec_order if self.rec_order is not None else None
        ro = other.rec_order if other.rec_order is not None else None
        if (lo is None) != (ro is None):
            return False
        return lo is None or np.array_equal(lo, ro)


def check_nesting(block_ids, school_ids, teacher_ids, rows=None) -> None:
    """Raise unless teachers nest in schools and schools nest in blocks."""
    issues: list[tuple[int | None, str]] = []
    rows = np.arange(1, len(block_ids) + 1) if rows is None else np.asarray(rows)
    for child, parent, cname, pname in (
        (teacher_ids, school_ids, "teacher", "school"),
        (school_ids, block_ids, "school", "block"),
    ):
        seen: dict[str, str] = {}
        for r, c, p in zip(rows, child, parent):
            if c in seen and seen[c] != p:
                issues.append((int(r), f"{cname} {c!r} appears in {pname} {p!r} and {seen[c]!r}"))
            seen.setdefault(c, p)
    if issues:
        raise DataValidationError("broken nesting", issues)


# -- ingestion -------------------------------------------------------------

def _read_csv(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise DataValidationError(f"file not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    df.columns = [c.strip() for c in df.columns]
    return df


def _numeric(df: pd.DataFrame, col: str, issues, fname: str, integral=False) -> np.ndarray:
    out = np.empty(len(df), dtype=float)
    for k, raw in enumerate(df[col].tolist()):
        s = raw.strip()
        if s == "" or s.upper() == "NA":
            issues.append((k + 1, f"{fname}: missing value in column {col!r}"))
            out[k] = np.nan
            continue
        try:
            v = float(s)
        except ValueError:
            issues.append((k + 1, f"{fname}: column {col!r} is not numeric ({s!r})"))
            out[k] = np.nan
            continue
        if not np.isfinite(v) or (integral and v != int(v)):
            issues.append((k + 1, f"{fname}: bad value {s!r} in column {col!r}"))
        out[k] = v
    return out


def _read_students(path: Path):
    df = _read_csv(path)
    missing = [c for c in STUDENT_COLUMNS if c not in df.columns]
    if missing:
        raise DataValidationError(f"{path.name}: missing required columns {missing}")
    issues: list[tuple[int | None, str]] = []
    for c in ("student_id", "block_id", "school_id", "teacher_id"):
        for k, v in enumerate(df[c].tolist()):
            if v.strip() == "" or v.strip().upper() == "NA":
                issues.append((k + 1, f"{path.name}: missing {c}"))
    z = _numeric(df, "z", issues, path.name, integral=True)
    bad_z = [k + 1 for k, v in enumerate(z) if np.isfinite(v) and v not in (0, 1)]
    issues.extend((r, f"{path.name}: z must be 0 or 1") for r in bad_z)
    y = _numeric(df, "y", issues, path.name)
    cov_names = ["pretest"] + [c for c in df.columns if c not in STUDENT_COLUMNS]
    X = np.column_stack([_numeric(df, c, issues, path.name) for c in cov_names])
    ids = df["student_id"].str.strip().to_numpy(dtype=object)
    dup = pd.Series(ids).duplicated()
    issues.extend((int(k) + 1, f"{path.name}: duplicate student_id {ids[k]!r}")
                  for k in np.flatnonzero(dup.to_numpy()))
    if issues:
        raise DataValidationError(f"{path.name}: schema violation", issues)
    labels = [df[c].str.strip().to_numpy(dtype=object) for c in ("block_id", "school_id", "teacher_id")]
    check_nesting(*labels)
    return ids, labels, z.astype(np.int8), y, X, tuple(cov_names)


def _read_mastery(path: Path, id_to_index: dict[str, int]):
    df = _read_csv(path)
    missing = [c for c in MASTERY_COLUMNS if c not in df.columns]
    if missing:
        raise DataValidationError(f"{path.name}: missing required columns {missing}")
    issues: list[tuple[int | None, str]] = []
    mastered = _numeric(df, "mastered", issues, path.name, integral=True)
    issues.extend((k + 1, f"{path.name}: mastered must be 0 or 1")
                  for k, v in enumerate(mastered) if np.isfinite(v) and v not in (0, 1))
    order = None
    if "order" in df.columns:
        order = _numeric(df, "order", issues, path.name, integral=True)
    sids = df["student_id"].str.strip().tolist()
    secs = df["section_id"].str.strip().tolist()
    stud = np.empty(len(df), dtype=np.intp)
    for k, s in enumerate(sids):
        if s not in id_to_index:
            issues.append((k + 1, f"{path.name}: dangling student_id {s!r} (not in students file)"))
            stud[k] = -1
        else:
            stud[k] = id_to_index[s]
    for k, s in enumerate(secs):
        if s == "" or s.upper() == "NA":
            issues.append((k + 1, f"{path.name}: missing section_id"))
    seen: dict[tuple[str, str], int] = {}
    for k, key in enumerate(zip(sids, secs)):
        if key in seen:
            issues.append((k + 1, f"{path.name}: duplicate record for {key} (first at row {seen[key]})"))
        else:
            seen[key] = k + 1
    if issues:
        raise DataValidationError(f"{path.name}: invalid mastery data", issues)
    return stud, np.asarray(secs, dtype=object), mastered.astype(np.int8), order


def filter_sections(rec_student, rec_section_labels, rec_mastered, rec_order, options: IngestOptions):
    """Apply section filters to raw record arrays.

    Returns ``(keep_mask, section_ids, rec_section_codes, dropped)`` where
    ``section_ids`` is the retained section list in order of first appearance.
    """
    labels = pd.Series(rec_section_labels, dtype=object)
    codes, uniques = pd.factorize(labels, sort=False)
    n_workers = np.bincount(codes, minlength=len(uniques))
    n_mastered = np.bincount(codes, weights=rec_mastered, minlength=len(uniques))
    dropped = []
    keep_sec = np.ones(len(uniques), dtype=bool)
    for j, sec in enumerate(uniques):
        if n_workers[j] < options.min_students:
            dropped.append((str(sec), f"worked by {n_workers[j]} < {options.min_students} students"))
            keep_sec[j] = False
        elif options.drop_always_mastered and n_mastered[j] == n_workers[j]:
            dropped.append((str(sec), "mastered in every case"))
            keep_sec[j] = False
        elif options.drop_never_mastered and n_mastered[j] == 0:
            dropped.append((str(sec), "never mastered"))
            keep_sec[j] = False
    keep = keep_sec[codes] if len(codes) else np.zeros(0, dtype=bool)
    retained = [str(s) for s, k in zip(uniques, keep_sec) if k]
    remap = np.full(len(uniques), -1, dtype=np.intp)
    remap[keep_sec] = np.arange(keep_sec.sum())
    return keep, tuple(retained), remap[codes[keep]] if len(codes) else codes, tuple(dropped)


def load_dataset(students_path, mastery_path=None, options: IngestOptions | None = None,
                 provenance: str | None = None) -> TrialDataset:
    """Load and validate a trial from ``students.csv`` and ``mastery.csv``.

    Mastery rows belonging to control students are dropped (with a logged
    warning); section filters from ``options`` are then applied. All schema
    problems are collected and raised together as a
    :class:`DataValidationError` carrying row numbers.
    """
    options = options or IngestOptions()
    students_path = Path(students_path)
    ids, (blocks, schools, teachers), z, y, X, names = _read_students(students_path)
    id_to_index = {s: k for k, s in enumerate(ids)}
    empty = np.zeros(0, dtype=np.intp)
    if mastery_path is None:
        stud, secs, mastered, order = empty, np.zeros(0, dtype=object), np.zeros(0, np.int8), None
    else:
        stud, secs, mastered, order = _read_mastery(Path(mastery_path), id_to_index)
    treated = z[stud] == 1 if len(stud) else np.zeros(0, dtype=bool)
    n_ctl = int((~treated).sum())
    if n_ctl:
        logger.warning("dropping %d mastery rows belonging to control students", n_ctl)
    stud, secs, mastered = stud[treated], secs[treated], mastered[treated]
    order = None if order is None else order[treated]
    keep, section_ids, codes, dropped = filter_sections(stud, secs, mastered, order, options)
    if provenance is None:
        provenance = f"loaded from {students_path.name}" + (
            f" and {Path(mastery_path).name}" if mastery_path is not None else "")
    return TrialDataset(
        student_ids=ids, block_ids=blocks, school_ids=schools, teacher_ids=teachers,
        z=z, y=y, X=X, covariate_names=names, section_ids=section_ids,
        rec_student=stud[keep], rec_section=codes, rec_mastered=mastered[keep],
        rec_order=None if order is None else order[keep].astype(np.int64),
        provenance=provenance, dropped_sections=dropped, control_rows_dropped=n_ctl,
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(dataset: TrialDataset, students_path, mastery_path) -> None:
    """Write a dataset in the ingestion schema (floats round-trip exactly)."""
    names = list(dataset.covariate_names)
    if PRETEST not in names:
        raise DataValidationError("dataset has no 'pretest' covariate column")
    ordered = [PRETEST] + [c for c in names if c != PRETEST]
    cols = [names.index(c) for c in ordered]
    with open(students_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["student_id", "block_id", "school_id", "teacher_id", "z", "y"] + ordered) + "\n")
        for i in range(dataset.n_students):
            row = [dataset.student_ids[i], dataset.block_ids[i], dataset.school_ids[i],
                   dataset.teacher_ids[i], str(int(dataset.z[i])), _fmt(dataset.y[i])]
            row += [_fmt(dataset.X[i, c]) for c in cols]
            fh.write(",".join(row) + "\n")
    with_order = dataset.rec_order is not None
    with open(mastery_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("student_id,section_id,mastered" + (",order" if with_order else "") + "\n")
        for k in range(dataset.n_records):
            row = [dataset.student_ids[dataset.rec_student[k]],
                   dataset.section_ids[dataset.rec_section[k]],
                   str(int(dataset.rec_mastered[k]))]
            if with_order:
                row.append(str(int(dataset.rec_order[k])))
            fh.write(",".join(row) + "\n")


# -- preparation -------------------------------------------------------------

@dataclass(frozen=True)
class StandardizationInfo:
    """Centering and scaling applied by :func:`standardize`."""

    names: tuple[str, ...]
    means: tuple[float, ...]
    scales: tuple[float, ...]
    y_scale: float
    pretest_square: bool

    def to_dict(self) -> dict:
        return {
            "names": list(self.names), "means": list(self.means), "scales": list(self.scales),
            "y_scale": self.y_scale, "pretest_square": self.pretest_square,
        }

    @classmethod
    def from_dict(cls, d: dict) -> StandardizationInfo:
        return cls(tuple(d["names"]), tuple(d["means"]), tuple(d["scales"]),
                   float(d["y_scale"]), bool(d["pretest_square"]))


def standardize(dataset: TrialDataset, *, covariates: bool = True, scale_y: bool = True,
                pretest_square: bool = True) -> tuple[TrialDataset, StandardizationInfo]:
    """Standardize covariates, append squared pretest, rescale the outcome.

    Each covariate column is centered and divided by its sample standard
    deviation. The squared-pretest column is the square of the standardized
    pretest. ``y`` is divided (not centered) by its standard deviation pooled
    over both arms.
    """
    names = list(dataset.covariate_names)
    if pretest_square and PRETEST_SQ in names:
        raise DataValidationError(f"dataset already has a {PRETEST_SQ!r} column")
    X = dataset.X.copy()
    means = np.zeros(X.shape[1])
    scales = np.ones(X.shape[1])
    if covariates:
        means = X.mean(axis=0)
        scales = X.std(axis=0, ddof=1) if len(X) > 1 else np.zeros(X.shape[1])
        zero = [names[j] for j in range(X.shape[1]) if not scales[j] > 0]
        if zero:
            raise DataValidationError(f"zero-variance covariate column(s): {', '.join(zero)}")
        X = (X - means) / scales
    if pretest_square:
        if PRETEST not in names:
            raise DataValidationError("no 'pretest' column to square")
        X = np.column_stack([X, X[:, names.index(PRETEST)] ** 2])
        names = names + [PRETEST_SQ]
    y_scale = 1.0
    if scale_y:
        y_scale = float(np.std(dataset.y, ddof=1))
        if not y_scale > 0:
            raise DataValidationError("zero-variance column: y")
    info = StandardizationInfo(
        names=tuple(dataset.covariate_names), means=tuple(float(m) for m in means),
        scales=tuple(float(s) for s in scales), y_scale=y_scale, pretest_square=pretest_square,
    )
    out = dataset.replace(X=X, covariate_names=tuple(names), y=dataset.y / y_scale)
    return out, info


def mbar(dataset: TrialDataset, student_id) -> float:
    """Fraction of a student's worked sections that were mastered."""
    i = dataset.index_of(student_id)
    sel = dataset.rec_student == i
    n = int(sel.sum())
    if n == 0:
        raise MbarUndefinedError(f"student {student_id!r} has no mastery records")
    return float(dataset.rec_mastered[sel].sum()) / n


def mbar_vector(dataset: TrialDataset) -> np.ndarray:
    """Per-student mastered fraction; NaN for students without records."""
    n = dataset.n_sec
    m = np.bincount(dataset.rec_student, weights=dataset.rec_mastered, minlength=dataset.n_students)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, m / np.maximum(n, 1), np.nan)


# -- reporting -----------------------------------------------------------------

@dataclass(frozen=True)
class DataReport:
    counts: dict
    mastery_rate: float
    dropped_sections: tuple[tuple[str, str], ...]
    control_rows_dropped: int = 0

    def to_text(self) -> str:
        lines = ["Trial data report", "================="]
        lines += [f"{k:>10}: {v}" for k, v in self.counts.items()]
        lines.append(f"mastery rate: {self.mastery_rate:.4f}")
        lines.append(f"control mastery rows dropped: {self.control_rows_dropped}")
        lines.append(f"dropped sections: {len(self.dropped_sections)}")
        lines += [f"  {s}: {why}" for s, why in self.dropped_sections]
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = [f"{k}={v}" for k, v in self.counts.items()]
        lines.append(f"mastery_rate={self.mastery_rate!r}")
        lines.append(f"control_rows_dropped={self.control_rows_dropped}")
        lines.append(f"dropped_sections={len(self.dropped_sections)}")
        lines += [f"dropped.{s}={why}" for s, why in self.dropped_sections]
        return "\n".join(lines) + "\n"

    def write(self, text_path, kv_path) -> None:
        Path(text_path).write_text(self.to_text(), encoding="utf-8")
        Path(kv_path).write_text(self.to_kv(), encoding="utf-8")


def data_report(dataset: TrialDataset) -> DataReport:
    counts = {
        "students": dataset.n_students,
        "treated": int((dataset.z == 1).sum()),
        "control": int((dataset.z == 0).sum()),
        "teachers": len(dataset.teacher_labels),
        "schools": len(dataset.school_labels),
        "blocks": len(dataset.block_labels),
        "sections": dataset.n_sections,
        "records": dataset.n_records,
    }
    rate = float(dataset.rec_mastered.mean()) if dataset.n_records else 0.0
    return DataReport(counts, rate, dataset.dropped_sections, dataset.control_rows_dropped)
