"""Replicated contamination study: how often each statistic ranks the planted subject first."""

from __future__ import annotations

import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import PMELMError
from .influence import diagnose, rank_of, records_to_csv, stat_vector
from .model import fit_ml
from .simulate import DEFAULT_BETA, DEFAULT_METHODS, SIGMA_GRID, StudyCell, study_grid

logger = logging.getLogger(__name__)

DETECTION_STATS = ("Ci", "Ci_b", "Ci_d", "rri", "cook1")


@dataclass(frozen=True)
class CellOutcome:
    sigma1: float
    method: int
    replicate: int
    seed: int
    ranks: dict[str, int] | None
    target_rr: float | None
    diag_csv: str | None
    error: str | None = None


def run_cell(cell: StudyCell, target: int = 1) -> CellOutcome:
    try:
        fit = fit_ml(cell.contaminated)
        records = diagnose(fit)
    except PMELMError as exc:
        return CellOutcome(cell.sigma1, cell.method, cell.replicate, cell.seed, None, None,
                           None, f"{type(exc).__name__}: {exc}")
    tid = int(cell.contaminated.ids[target - 1])
    ranks = {s: rank_of(records, s, tid) for s in DETECTION_STATS}
    rr = float(stat_vector(records, "rri")[target - 1])
    return CellOutcome(cell.sigma1, cell.method, cell.replicate, cell.seed, ranks, rr,
                       records_to_csv(records))


def _run_cell_packed(args: tuple[StudyCell, int]) -> CellOutcome:
    return run_cell(*args)


def run_study(
    base_seed: int = 0,
    replicates: int = 20,
    methods: Sequence[int] = DEFAULT_METHODS,
    sigmas: Sequence[float] = SIGMA_GRID,
    m1: int = 59,
    beta: Sequence[float] = DEFAULT_BETA,
    target: int = 1,
    workers: int = 1,
) -> list[CellOutcome]:
    """Outcomes in grid order (sigma1, replicate, method), whatever the worker count."""
    cells = list(study_grid(base_seed, replicates, methods, sigmas, m1, beta, target))
    jobs = [(c, target) for c in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell_packed, jobs, chunksize=4))
    return [run_cell(c, target) for c in cells]


def detection_rows(outcomes: Iterable[CellOutcome]) -> list[dict[str, object]]:
    """One row per (sigma1, method, stat) with rank-1 and rank<=3 rates."""
    grouped: dict[tuple[float, int], list[CellOutcome]] = {}
    for o in outcomes:
        grouped.setdefault((o.sigma1, o.method), []).append(o)
    rows = []
    for (s, m), group in sorted(grouped.items()):
        ok = [o for o in group if o.ranks is not None]
        for stat in DETECTION_STATS:
            n = len(ok)
            r1 = sum(o.ranks[stat] == 1 for o in ok) if n else 0
            r3 = sum(o.ranks[stat] <= 3 for o in ok) if n else 0
            rows.append({
                "sigma1": s, "method": m, "stat": stat, "replicates": n,
                "failures": len(group) - n,
                "rank1_rate": r1 / n if n else float("nan"),
                "rank3_rate": r3 / n if n else float("nan"),
            })
    return rows


DETECTION_HEADER = ("sigma1", "method", "stat", "replicates", "failures", "rank1_rate",
                    "rank3_rate")
CELL_HEADER = ("sigma1", "method", "replicate", "seed", *(f"rank_{s}" for s in DETECTION_STATS),
               "target_rri", "error")


def _fmt(v: object) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def detection_csv(outcomes: Sequence[CellOutcome]) -> str:
    lines = [",".join(DETECTION_HEADER)]
    for row in detection_rows(outcomes):
        lines.append(",".join(_fmt(row[k]) for k in DETECTION_HEADER))
    return "\n".join(lines) + "\n"


def cells_csv(outcomes: Sequence[CellOutcome]) -> str:
    lines = [",".join(CELL_HEADER)]
    for o in outcomes:
        ranks = [str(o.ranks[s]) if o.ranks else "" for s in DETECTION_STATS]
        rr = repr(o.target_rr) if o.target_rr is not None else ""
        err = (o.error or "").replace(",", ";").replace("\n", " ")
        lines.append(",".join([repr(o.sigma1), str(o.method), str(o.replicate), str(o.seed),
                               *ranks, rr, err]))
    return "\n".join(lines) + "\n"


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_study(outcomes: Sequence[CellOutcome], outdir: str | Path) -> None:
    outdir = Path(outdir)
    for o in outcomes:
        if o.diag_csv is not None:
            name = f"sigma{o.sigma1!r}_m{o.method}_r{o.replicate:03d}_diag.csv"
            atomic_write(outdir / "cells" / name, o.diag_csv)
    atomic_write(outdir / "cells.csv", cells_csv(outcomes))
    atomic_write(outdir / "detection_rates.csv", detection_csv(outcomes))
