"""Longitudinal count panels and the design matrices built from them.

A panel holds one row per subject: treatment arm, 8-week baseline count,
age and four 2-week period counts.  Derived covariates are

    lbase = log(base / 4) - mean(log(base / 4))
    lage  = log(age) - mean(log(age))

with zero baselines replaced by ``log((base + 0.5) / 4)``.  Observations are
stacked subject-major (subject 1 periods 1..4, subject 2 periods 1..4, ...).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import sparse

from .errors import (
    DuplicatePeriod,
    EmptyDesign,
    MissingColumn,
    NegativeCount,
    NonIntegerCount,
    SubjectWithMissingPeriods,
)

N_PERIODS = 4
CSV_COLUMNS = ("id", "trt", "base", "age", "y1", "y2", "y3", "y4")

TERMS = ("intercept", "lbase", "trt", "lbase:trt", "lage", "base")
_TERM_ALIASES = {
    "lbase×trt": "lbase:trt",
    "lbase*trt": "lbase:trt",
    "lbase_trt": "lbase:trt",
    "trt:lbase": "lbase:trt",
}


@dataclass(frozen=True)
class SubjectRecord:
    id: int
    trt: int
    base: int
    age: int
    y: tuple[int, int, int, int]


def _centered_log_baseline(base: NDArray[np.int64]) -> NDArray[np.float64]:
    b = base.astype(float)
    b = np.where(b == 0, b + 0.5, b)
    v = np.log(b / 4.0)
    return v - v.mean()


def _centered_log_age(age: NDArray[np.int64]) -> NDArray[np.float64]:
    v = np.log(age.astype(float))
    return v - v.mean()


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Complete 4-period count panel, stored column-wise.

    ``lbase`` and ``lage`` are always recomputed from ``base`` and ``age``;
    they cannot be passed in.  ``seed`` and ``meta`` carry provenance for
    generated panels and take no part in equality.
    """

    ids: NDArray[np.int64]
    trt: NDArray[np.int64]
    base: NDArray[np.int64]
    age: NDArray[np.int64]
    y: NDArray[np.int64]
    seed: int | None = None
    meta: dict[str, Any] = field(default_factory=dict)
    lbase: NDArray[np.float64] = field(init=False)
    lage: NDArray[np.float64] = field(init=False)

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids, dtype=np.int64).copy()
        trt = np.asarray(self.trt, dtype=np.int64).copy()
        base = np.asarray(self.base, dtype=np.int64).copy()
        age = np.asarray(self.age, dtype=np.int64).copy()
        y = np.asarray(self.y, dtype=np.int64).reshape(len(ids), N_PERIODS).copy()
        m = len(ids)
        if not (len(trt) == len(base) == len(age) == m):
            raise ValueError("column lengths differ")
        if m == 0:
            raise ValueError("panel has no subjects")
        if len(np.unique(ids)) != m:
            raise DuplicatePeriod("subject ids are not unique")
        if np.any((trt != 0) & (trt != 1)):
            raise ValueError("trt must be 0 or 1")
        if np.any(base < 0) or np.any(y < 0):
            raise NegativeCount("counts must be nonnegative")
        if np.any(age <= 0):
            raise ValueError("age must be positive")
        for name, arr in (("ids", ids), ("trt", trt), ("base", base), ("age", age), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        lbase = _centered_log_baseline(base)
        lage = _centered_log_age(age)
        lbase.setflags(write=False)
        lage.setflags(write=False)
        object.__setattr__(self, "lbase", lbase)
        object.__setattr__(self, "lage", lage)

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord], **kwargs: Any) -> PanelDataset:
        recs = list(records)
        return cls(
            ids=[r.id for r in recs],
            trt=[r.trt for r in recs],
            base=[r.base for r in recs],
            age=[r.age for r in recs],
            y=[list(r.y) for r in recs],
            **kwargs,
        )

    @property
    def m(self) -> int:
        return len(self.ids)

    @property
    def subjects(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(int(i), int(t), int(b), int(a), tuple(int(v) for v in row))
            for i, t, b, a, row in zip(self.ids, self.trt, self.base, self.age, self.y)
        ]

    def replace(self, **changes: Any) -> PanelDataset:
        kw = dict(ids=self.ids, trt=self.trt, base=self.base, age=self.age, y=self.y,
                  seed=self.seed, meta=dict(self.meta))
        kw.update(changes)
        return PanelDataset(**kw)

    def subset(self, index: Sequence[int] | NDArray[np.int64]) -> PanelDataset:
        """Panel restricted to the given positions (derived covariates recentered)."""
        idx = np.asarray(index, dtype=np.int64)
        return self.replace(ids=self.ids[idx], trt=self.trt[idx], base=self.base[idx],
                            age=self.age[idx], y=self.y[idx])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("ids", "trt", "base", "age", "y", "lbase", "lage")
        )

    __hash__ = None  # type: ignore[assignment]


def _parse_count(raw: str, column: str, line: int) -> int:
    raw = raw.strip()
    if raw == "":
        raise SubjectWithMissingPeriods(f"line {line}: empty value in column {column!r}")
    try:
        value = int(raw)
    except ValueError:
        raise NonIntegerCount(f"line {line}: column {column!r} holds non-integer {raw!r}") from None
    if value < 0 and column != "id":
        raise NegativeCount(f"line {line}: column {column!r} is negative ({value})")
    return value


def load_panel(path: str | Path, format: str = "csv") -> PanelDataset:
    """Read a panel from ``id,trt,base,age,y1,y2,y3,y4`` CSV.

    A ``<stem>.meta.json`` sidecar next to the file, if present, supplies the
    generator seed.
    """
    if format != "csv":
        raise ValueError(f"unsupported format {format!r}")
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumn(f"{path}: empty file, no header") from None
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
        col = {c: header.index(c) for c in CSV_COLUMNS}
        rows: dict[int, SubjectRecord] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                row = row + [""] * (len(header) - len(row))
            vals = {c: _parse_count(row[col[c]], c, lineno) for c in CSV_COLUMNS}
            sid = vals["id"]
            if sid in rows:
                raise DuplicatePeriod(f"line {lineno}: subject {sid} appears twice")
            rows[sid] = SubjectRecord(
                sid, vals["trt"], vals["base"], vals["age"],
                (vals["y1"], vals["y2"], vals["y3"], vals["y4"]),
            )
    seed = None
    meta: dict[str, Any] = {}
    sidecar = metadata_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        seed = meta.get("seed")
    return PanelDataset.from_records(rows.values(), seed=seed, meta=meta)


def metadata_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_panel(panel: PanelDataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in panel.subjects:
            w.writerow([r.id, r.trt, r.base, r.age, *r.y])


@dataclass(frozen=True)
class DesignSpec:
    terms: tuple[str, ...] = ("intercept", "lbase", "trt", "lbase:trt", "lage")

    def __post_init__(self) -> None:
        terms = tuple(_TERM_ALIASES.get(t, t) for t in self.terms)
        if not terms:
            raise EmptyDesign("design has no terms")
        unknown = [t for t in terms if t not in TERMS]
        if unknown:
            raise ValueError(f"unknown design term(s): {unknown}")
        if len(set(terms)) != len(terms):
            raise ValueError("duplicate design terms")
        if "intercept" in terms and terms[0] != "intercept":
            raise ValueError("intercept must be the first term")
        object.__setattr__(self, "terms", terms)

    @property
    def p(self) -> int:
        return len(self.terms)


DEFAULT_DESIGN = DesignSpec()


def _term_column(data: PanelDataset, term: str) -> NDArray[np.float64]:
    if term == "intercept":
        return np.ones(data.m)
    if term == "lbase":
        return data.lbase.copy()
    if term == "trt":
        return data.trt.astype(float)
    if term == "lbase:trt":
        return data.lbase * data.trt
    if term == "lage":
        return data.lage.copy()
    if term == "base":
        return data.base.astype(float)
    raise ValueError(term)


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Stacked design for the random-intercept model.

    ``Xb`` and ``Yb`` are the same data viewed per subject, shape
    ``(m, 4, p)`` and ``(m, 4)``; ``X`` and ``y`` are the stacked forms.
    """

    Xb: NDArray[np.float64]
    Yb: NDArray[np.float64]
    ids: NDArray[np.int64]
    trt: NDArray[np.int64]
    terms: tuple[str, ...]

    @property
    def m(self) -> int:
        return self.Xb.shape[0]

    @property
    def p(self) -> int:
        return self.Xb.shape[2]

    @property
    def n(self) -> int:
        return self.Xb.shape[0] * self.Xb.shape[1]

    @property
    def X(self) -> NDArray[np.float64]:
        return self.Xb.reshape(self.n, self.p)

    @property
    def y(self) -> NDArray[np.float64]:
        return self.Yb.reshape(self.n)

    @property
    def subject_index(self) -> NDArray[np.int64]:
        return np.repeat(np.arange(self.m), self.Xb.shape[1])

    @property
    def Z(self) -> sparse.csr_matrix:
        n = self.n
        return sparse.csr_matrix(
            (np.ones(n), (np.arange(n), self.subject_index)), shape=(n, self.m)
        )


def build_design(data: PanelDataset, spec: DesignSpec = DEFAULT_DESIGN) -> DesignMatrices:
    cols = np.column_stack([_term_column(data, t) for t in spec.terms])
    Xb = np.repeat(cols[:, None, :], N_PERIODS, axis=1)
    Xb.setflags(write=False)
    Yb = data.y.astype(float)
    Yb.setflags(write=False)
    return DesignMatrices(Xb=Xb, Yb=Yb, ids=data.ids, trt=data.trt, terms=spec.terms)
