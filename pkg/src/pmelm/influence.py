"""Local influence of individual subjects on a fitted random-intercept model.

Case-weight perturbation replaces l(theta) with sum_i w_i l_i(theta).  The
normal curvature of the likelihood displacement in the direction of
subject i is

    C_i = 2 Delta_i' (-H)^{-1} Delta_i

with Delta_i the subject's score and H the Hessian of l at the estimate.
It splits into a fixed-effect part (C_i_b, using the beta block of H) and a
variance part (C_i_d, using the sigma1_sq block), which add up exactly to
the curvature under the block-diagonal restriction of H.

Residuals are on the count scale, r_ij = y_ij - mu_ij with the marginal
mean mu_ij = exp(x_ij' beta + sigma1_sq / 2).  All matrix norms are
Frobenius.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import SingularHessian, SingularV
from .model import FitResult, QuadratureRule, Theta, evaluate_fit, fit_ml, subject_logliks

logger = logging.getLogger(__name__)

CSV_HEADER = (
    "id", "trt", "Ci", "Ci_b", "Ci_d", "rri", "cos_alpha", "cos_phi", "cook1",
    "comp_xx", "comp_r", "comp_zz", "comp_ir", "comp_vinv",
)


@dataclass(frozen=True)
class DiagnosticRecord:
    subject_id: int
    trt: int
    C_i: float
    C1_i: float
    C2_i: float
    rr_i: float
    cos_alpha_i: float
    cos_phi_i: float
    cook_onestep: float
    comp_xx: float
    comp_r: float
    comp_zz: float
    comp_ir: float
    comp_vinv: float


STAT_FIELDS = {
    "Ci": "C_i",
    "Ci_b": "C1_i",
    "Ci_d": "C2_i",
    "rri": "rr_i",
    "cook1": "cook_onestep",
    "cos_alpha": "cos_alpha_i",
    "cos_phi": "cos_phi_i",
}


def _neg_inv(H: NDArray[np.float64]) -> NDArray[np.float64]:
    A = -np.asarray(H, dtype=float)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise SingularHessian("-Hessian is not positive definite") from None
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv


def curvature(delta: NDArray[np.float64], hessian: NDArray[np.float64]) -> NDArray[np.float64]:
    """2 Delta_i' (-H)^{-1} Delta_i for each column of ``delta`` (p+1, m)."""
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    if delta.shape[0] != hessian.shape[0]:
        delta = delta.T
    A = _neg_inv(hessian)
    return 2.0 * np.einsum("pm,pq,qm->m", delta, A, delta)


def _free(fit: FitResult) -> slice:
    # a variance estimate on the boundary is held fixed; only beta is perturbed
    return slice(0, fit.p) if fit.at_boundary else slice(0, fit.p + 1)


def fit_curvatures(fit: FitResult) -> NDArray[np.float64]:
    """C_i for every subject."""
    f = _free(fit)
    return curvature(fit.delta[f], fit.hessian[f, f])


def local_curvature(fit: FitResult, i: int) -> float:
    """C_i for the subject at 0-based position ``i``."""
    return float(fit_curvatures(fit)[i])


def curvature_factors(fit: FitResult) -> tuple[float, NDArray[np.float64], NDArray[np.float64]]:
    """Factors of C_i = 2 ||H^{-1}|| ||Delta_i||^2 cos(phi_i).

    Returns ``(||H^{-1}||_F, ||Delta_i||^2, cos(phi_i))`` with cos(phi_i)
    defined by that identity.
    """
    f = _free(fit)
    C = curvature(fit.delta[f], fit.hessian[f, f])
    hinv_norm = float(np.linalg.norm(np.linalg.inv(fit.hessian[f, f])))
    d2 = np.einsum("pm,pm->m", fit.delta[f], fit.delta[f])
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_phi = np.where(d2 > 0, C / (2.0 * hinv_norm * d2), 0.0)
    return hinv_norm, d2, cos_phi


def decompose_all(fit: FitResult) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """(C1_i, C2_i) for every subject, from the beta and sigma1_sq blocks of H."""
    p = fit.p
    H = fit.hessian
    C1 = curvature(fit.delta[:p], H[:p, :p])
    if fit.at_boundary:
        return C1, np.zeros_like(C1)
    h_ss = H[p, p]
    if not h_ss < 0:
        raise SingularHessian("variance block of the Hessian is not negative")
    C2 = 2.0 * fit.delta[p] ** 2 / (-h_ss)
    return C1, C2


def decompose(fit: FitResult, i: int) -> tuple[float, float]:
    C1, C2 = decompose_all(fit)
    return float(C1[i]), float(C2[i])


def block_diagonal_curvature(fit: FitResult) -> NDArray[np.float64]:
    p = fit.p
    if fit.at_boundary:
        return curvature(fit.delta[:p], fit.hessian[:p, :p])
    Hb = np.zeros_like(fit.hessian)
    Hb[:p, :p] = fit.hessian[:p, :p]
    Hb[p, p] = fit.hessian[p, p]
    return curvature(fit.delta, Hb)


def variance_curvature_closed_form(fit: FitResult) -> NDArray[np.float64]:
    """C_i_d from the scalar-variance trace expression.

    With a scalar random-effect variance D = sigma1_sq the trace terms
    collapse to (1/D^2)(1 - 2 M_i/D + M_i^2/D^2) where M_i = E[b_i^2 | y_i]
    is the posterior second moment of the random intercept, and the
    leading factor becomes 1/2 times the inverse of -H_dd.
    """
    D = fit.theta_hat.sigma1_sq
    M = fit.eb[:, 0] ** 2 + fit.eb[:, 1]
    bracket = (1.0 / D**2) * (1.0 - 2.0 * M / D + M**2 / D**2)
    return 0.5 * bracket / (-fit.hessian[-1, -1])


# --------------------------------------------------------------------------- #
# Residuals and component norms
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ResidualSet:
    r: NDArray[np.float64]  # (n,)
    n_periods: int

    def subject(self, i: int) -> NDArray[np.float64]:
        k = self.n_periods
        return self.r[i * k : (i + 1) * k]

    @property
    def blocks(self) -> NDArray[np.float64]:
        return self.r.reshape(-1, self.n_periods)


def residual_stats(
    fit: FitResult,
) -> tuple[ResidualSet, NDArray[np.float64], NDArray[np.float64]]:
    """Count-scale residuals with per-subject rr_i = ||r_i||^2 and cos(alpha_i).

    cos(alpha_i) is the Frobenius cosine between X_i X_i' and r_i r_i',
    which equals r_i' X_i X_i' r_i / (||X_i X_i'|| ||r_i||^2).  Subjects with
    an identically zero residual get 0.
    """
    design = fit.design
    r = design.y - fit.mu_hat
    res = ResidualSet(r=r, n_periods=design.Xb.shape[1])
    R = res.blocks
    rr = np.einsum("mj,mj->m", R, R)
    XtR = np.einsum("mjp,mj->mp", design.Xb, R)
    num = np.einsum("mp,mp->m", XtR, XtR)
    XX = np.einsum("mjp,mkp->mjk", design.Xb, design.Xb)
    xx_norm = np.linalg.norm(XX, axis=(1, 2))
    denom = xx_norm * rr
    zero = denom <= 0
    if np.any(zero):
        logger.warning("zero residual vector for subject(s) %s", design.ids[zero].tolist())
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_alpha = np.where(zero, 0.0, num / np.where(zero, 1.0, denom))
    return res, rr, np.clip(cos_alpha, -1.0, 1.0)


def marginal_covariance(mu: NDArray[np.float64], sigma1_sq: float) -> NDArray[np.float64]:
    """Poisson-lognormal covariance of one subject's counts."""
    mu = np.asarray(mu, dtype=float)
    k = math.expm1(sigma1_sq)
    return np.diag(mu) + k * np.outer(mu, mu)


def component_norms(fit: FitResult, i: int) -> tuple[float, float, float, float, float]:
    """(||X_i X_i'||, ||R_i||, ||Z_i Z_i'||, ||I - R_i R_i'||, ||V_i^{-1}||).

    R_i = V_i^{-1/2} r_i is the residual standardized by the marginal
    covariance V_i.
    """
    design = fit.design
    J = design.Xb.shape[1]
    Xi = design.Xb[i]
    mu = fit.mu_hat[i * J : (i + 1) * J]
    r = design.y[i * J : (i + 1) * J] - mu
    V = marginal_covariance(mu, fit.theta_hat.sigma1_sq)
    lam, Q = np.linalg.eigh(V)
    if not np.all(lam > 0):
        raise SingularV(f"marginal covariance of subject {design.ids[i]} is singular")
    V_inv = (Q / lam) @ Q.T
    R = Q @ ((Q.T @ r) / np.sqrt(lam))
    Zi = np.ones((J, 1))
    return (
        float(np.linalg.norm(Xi @ Xi.T)),
        float(np.linalg.norm(R)),
        float(np.linalg.norm(Zi @ Zi.T)),
        float(np.linalg.norm(np.eye(J) - np.outer(R, R))),
        float(np.linalg.norm(V_inv)),
    )


# --------------------------------------------------------------------------- #
# Case deletion
# --------------------------------------------------------------------------- #


def one_step_deletion(fit: FitResult, i: int) -> tuple[Theta, float]:
    """One Newton step from the full-data estimate on the likelihood without subject i.

    Returns the updated parameter and the Cook-type distance
    2 d' H_(i) (-H)^{-1} H_(i) d with d the one-step displacement
    (nonnegative sign convention).
    """
    f = _free(fit)
    w = np.ones(fit.m) if fit.weights is None else fit.weights.copy()
    w[i] = 0.0
    g_del = fit.delta[f] @ w
    H_del = np.einsum("m,mpq->pq", w, fit.subject_hessians[:, f, f])
    try:
        d = np.linalg.solve(H_del, g_del)  # theta_hat - theta_1 on the free parameters
    except np.linalg.LinAlgError:
        raise SingularHessian("deleted-case Hessian is singular") from None
    A = _neg_inv(fit.hessian[f, f])
    v = H_del @ d
    cook = 2.0 * float(v @ A @ v)
    theta1 = fit.theta_hat.vector()
    theta1[f] -= d
    if theta1[-1] <= 0:
        theta1[-1] = np.finfo(float).tiny
    return Theta.from_vector(theta1), cook


def refit_cook_distances(fit: FitResult, **fit_kwargs) -> NDArray[np.float64]:
    """(theta_hat - theta_(i))' (-H) (theta_hat - theta_(i)) from full refits."""
    f = _free(fit)
    A = -fit.hessian[f, f]
    out = np.empty(fit.m)
    for i in range(fit.m):
        w = np.ones(fit.m)
        w[i] = 0.0
        fi = fit_ml(fit.design, rule=fit.rule, init=fit.theta_hat, weights=w,
                    check_concavity=False, **fit_kwargs)
        d = (fit.theta_hat.vector() - fi.theta_hat.vector())[f]
        out[i] = float(d @ A @ d)
    return out


def displacement_curvature(fit: FitResult, i: int, t: float = 1e-3) -> float:
    """Finite-difference curvature of LD(w) = 2[l(theta_hat) - l(theta_hat_w)].

    w moves from all-ones along the i-th coordinate; uses the symmetric
    second difference (LD(t) + LD(-t)) / t^2.
    """
    base_li = subject_logliks(fit.design, fit.theta_hat, fit.rule)
    total = 0.0
    for s in (t, -t):
        w = np.ones(fit.m)
        w[i] += s
        fw = fit_ml(fit.design, rule=fit.rule, init=fit.theta_hat, weights=w,
                    grad_tol=1e-11, step_tol=1e-13, check_concavity=False)
        li = subject_logliks(fit.design, fw.theta_hat, fit.rule)
        total += 2.0 * math.fsum(base_li - li)
    return total / t**2


# --------------------------------------------------------------------------- #
# Full table
# --------------------------------------------------------------------------- #


def diagnose(fit: FitResult, rule: QuadratureRule | None = None) -> list[DiagnosticRecord]:
    """One DiagnosticRecord per subject, in panel order."""
    if rule is not None and rule != fit.rule:
        fit = evaluate_fit(fit.design, fit.theta_hat, rule, weights=fit.weights)
    C = fit_curvatures(fit)
    C1, C2 = decompose_all(fit)
    _, _, cos_phi = curvature_factors(fit)
    _, rr, cos_alpha = residual_stats(fit)
    design = fit.design
    records = []
    for i in range(fit.m):
        _, cook = one_step_deletion(fit, i)
        comps = component_norms(fit, i)
        records.append(
            DiagnosticRecord(
                int(design.ids[i]), int(design.trt[i]),
                float(C[i]), float(C1[i]), float(C2[i]), float(rr[i]),
                float(cos_alpha[i]), float(cos_phi[i]), cook, *comps,
            )
        )
    return records


def stat_vector(records: Sequence[DiagnosticRecord], stat: str) -> NDArray[np.float64]:
    attr = STAT_FIELDS.get(stat, stat)
    return np.array([getattr(r, attr) for r in records], dtype=float)


def rank_of(records: Sequence[DiagnosticRecord], stat: str, subject_id: int) -> int:
    """1-based descending rank of a subject; ties count against it."""
    vals = stat_vector(records, stat)
    ids = [r.subject_id for r in records]
    k = ids.index(subject_id)
    others = np.delete(vals, k)
    return 1 + int(np.sum(others >= vals[k]))


def records_to_csv(records: Iterable[DiagnosticRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        row = astuple(r)
        w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])
    return buf.getvalue()


def records_from_csv(text: str) -> list[DiagnosticRecord]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CSV_HEADER:
        raise ValueError(f"unexpected diagnostic header {header}")
    out = []
    for row in reader:
        if not row:
            continue
        out.append(DiagnosticRecord(int(row[0]), int(row[1]), *(float(v) for v in row[2:])))
    return out


def write_records(records: Iterable[DiagnosticRecord], path: str | Path) -> None:
    Path(path).write_text(records_to_csv(records), encoding="utf-8")


def read_records(path: str | Path) -> list[DiagnosticRecord]:
    return records_from_csv(Path(path).read_text(encoding="utf-8"))

