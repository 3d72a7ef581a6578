"""Epilepsy-style panel generator and the six contamination edits.

Random streams come from numpy's Philox counter-based generator (4x64,
10 rounds), keyed by a 64-bit seed, so a seed reproduces a panel bit for
bit on any platform numpy supports.

Generation, per subject i::

    u_i ~ N(0, sigma1^2)
    base_i ~ Poisson(b_i)                           (8-week baseline count)
    y_ij ~ Poisson(exp(x_ij' beta + u_i [+ a_ij]))  j = 1..4

with ``x_ij`` built from ``lbase`` of the generated baseline.  The baseline
rate ``b_i`` depends on ``GenSpec.baseline``:

* ``"independent"`` (default): ``b_i`` is the source baseline count, so the
  baseline is correlated with the periods only through the lbase
  coefficient and the fitted model is correctly specified.
* ``"shared"``: ``b_i = exp(gamma0 + u_i)`` with
  ``gamma0 = log(mean source baseline) - sigma1^2 / 2``.  The baseline then
  carries the random intercept itself, so lbase absorbs most of u_i when
  the model is refitted.
* ``"source"``: the source baseline is used as is, no Poisson draw.

Contamination methods (target subject t, periods 1..4)::

    1  y_t1 += 30
    2  y_tj += 30, all j
    3  y_t1 += 100
    4  y_tj += 100, all j
    5  base_t := 50
    6  method 4 and method 5
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Literal, NamedTuple, Sequence

import numpy as np
from numpy.typing import NDArray

from . import __version__
from .data import DEFAULT_DESIGN, N_PERIODS, DesignSpec, PanelDataset, build_design
from .errors import BadMethod, BadTarget, RateOverflow

GENERATOR_NAME = "numpy.random.Philox(4x64, 10 rounds)"

# Epilepsy-like defaults for (intercept, lbase, trt, lbase:trt, lage).
DEFAULT_BETA = (1.6, 0.9, -0.3, 0.35, 0.5)
SIGMA_GRID = (0.25, 0.5, 1.0)
DEFAULT_METHODS = (1, 2, 3, 4)
ALL_METHODS = (1, 2, 3, 4, 5, 6)
MAX_ETA = 30.0


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


@dataclass(frozen=True)
class GenSpec:
    sigma1: float
    m1: int = 59
    beta: tuple[float, ...] = DEFAULT_BETA
    seed: int = 0
    covariate_source: Literal["synthetic"] | PanelDataset = "synthetic"
    alpha_sd: float = 0.0
    baseline: Literal["independent", "shared", "source"] = "independent"

    def __post_init__(self) -> None:
        if not (self.sigma1 > 0 and math.isfinite(self.sigma1)):
            raise ValueError(f"sigma1 must be positive, got {self.sigma1}")
        if self.m1 < 2:
            raise ValueError("m1 must be at least 2")
        if self.alpha_sd < 0:
            raise ValueError("alpha_sd must be nonnegative")
        if self.baseline not in ("independent", "shared", "source"):
            raise ValueError(f"unknown baseline mode {self.baseline!r}")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    def metadata(self) -> dict:
        d = asdict(self) if not isinstance(self.covariate_source, PanelDataset) else {
            k: getattr(self, k) for k in ("sigma1", "m1", "beta", "seed", "alpha_sd", "baseline")
        }
        d["beta"] = list(self.beta)
        d["covariate_source"] = (
            "reference" if isinstance(self.covariate_source, PanelDataset) else "synthetic"
        )
        return d


def _source_covariates(
    spec: GenSpec, rng: np.random.Generator
) -> tuple[NDArray[np.int64], NDArray[np.int64], NDArray[np.int64]]:
    m = spec.m1
    src = spec.covariate_source
    if isinstance(src, PanelDataset):
        idx = rng.integers(0, src.m, size=m)
        return src.trt[idx].copy(), src.base[idx].copy(), src.age[idx].copy()
    trt = rng.binomial(1, 0.5, size=m)
    # 6 + NB(r=1.5, mean 25): right-skewed 8-week baselines, min 6
    r, mean = 1.5, 25.0
    base = 6 + rng.negative_binomial(r, r / (r + mean), size=m)
    age = rng.integers(18, 43, size=m)
    return trt, base, age


def generate(spec: GenSpec, design: DesignSpec = DEFAULT_DESIGN) -> PanelDataset:
    """Draw one panel; identical seeds give identical panels."""
    if len(spec.beta) != design.p:
        raise ValueError(f"beta has length {len(spec.beta)}, design has {design.p} terms")
    rng = make_rng(spec.seed)
    trt, src_base, age = _source_covariates(spec, rng)
    m = spec.m1
    u = rng.normal(0.0, spec.sigma1, size=m)
    gamma0 = math.log(float(np.mean(src_base))) - 0.5 * spec.sigma1**2
    if spec.baseline == "shared":
        if np.any(gamma0 + u > MAX_ETA):
            raise RateOverflow("baseline rate exceeds exp(30)")
        base = rng.poisson(np.exp(gamma0 + u))
    elif spec.baseline == "independent":
        base = rng.poisson(src_base.astype(float))
    else:
        base = src_base
    ids = np.arange(1, m + 1)
    panel = PanelDataset(ids, trt, base, age, np.zeros((m, N_PERIODS), dtype=np.int64))
    X = build_design(panel, design).Xb
    eta = X @ np.asarray(spec.beta) + u[:, None]
    if spec.alpha_sd > 0:
        eta = eta + rng.normal(0.0, spec.alpha_sd, size=eta.shape)
    if np.any(eta > MAX_ETA):
        worst = int(np.argmax(eta.max(axis=1)))
        raise RateOverflow(
            f"linear predictor {eta.max():.1f} > {MAX_ETA} for subject {ids[worst]}"
        )
    y = rng.poisson(np.exp(eta))
    meta = {
        "spec": spec.metadata(),
        "design": list(design.terms),
        "seed": int(spec.seed),
        "generator": GENERATOR_NAME,
        "library_version": __version__,
        "gamma0": gamma0,
    }
    return PanelDataset(ids, trt, base, age, y, seed=int(spec.seed), meta=meta)


@dataclass(frozen=True)
class ContaminationSpec:
    method: int
    target: int = 1  # 1-based subject position

    def __post_init__(self) -> None:
        if self.method not in ALL_METHODS:
            raise BadMethod(f"contamination method must be 1-6, got {self.method}")


def contaminate(data: PanelDataset, spec: ContaminationSpec) -> PanelDataset:
    """Return a copy of ``data`` with one subject edited per ``spec.method``."""
    if not isinstance(spec, ContaminationSpec):
        raise BadMethod("expected a ContaminationSpec")
    if not 1 <= spec.target <= data.m:
        raise BadTarget(f"target {spec.target} outside 1..{data.m}")
    t = spec.target - 1
    y = data.y.copy()
    base = data.base.copy()
    method = spec.method
    if method in (1, 3):
        y[t, 0] += 30 if method == 1 else 100
    elif method in (2, 4, 6):
        y[t, :] += 30 if method == 2 else 100
    if method in (5, 6):
        base[t] = 50
    meta = dict(data.meta)
    meta["contamination"] = {"method": method, "target": spec.target}
    return data.replace(y=y, base=base, meta=meta)


def cell_seed(base_seed: int, sigma1: float, replicate: int) -> int:
    """64-bit seed for one (sigma1, replicate) cell.

    All contamination methods in a cell share the clean panel, so the
    method is not part of the key.
    """
    key = f"{float(sigma1)!r}|{int(replicate)}".encode()
    h = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    return (int(base_seed) ^ h) & 0xFFFF_FFFF_FFFF_FFFF


class StudyCell(NamedTuple):
    sigma1: float
    method: int
    replicate: int
    seed: int
    clean: PanelDataset
    contaminated: PanelDataset


def study_grid(
    base_seed: int,
    replicates: int,
    methods: Sequence[int] = DEFAULT_METHODS,
    sigmas: Sequence[float] = SIGMA_GRID,
    m1: int = 59,
    beta: Sequence[float] = DEFAULT_BETA,
    target: int = 1,
    design: DesignSpec = DEFAULT_DESIGN,
) -> Iterator[StudyCell]:
    """Enumerate sigma1 x replicate x method cells in that nesting order."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    for m in methods:
        ContaminationSpec(m, target)
    for s in sigmas:
        for r in range(replicates):
            seed = cell_seed(base_seed, s, r)
            clean = generate(GenSpec(sigma1=s, m1=m1, beta=tuple(beta), seed=seed), design)
            for method in methods:
                yield StudyCell(
                    s, method, r, seed, clean, contaminate(clean, ContaminationSpec(method, target))
                )
