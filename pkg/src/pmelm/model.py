"""Random-intercept Poisson model fitted by adaptive Gauss-Hermite ML.

Model, for subject i and period j::

    y_ij | u_i ~ Poisson(exp(x_ij' beta + u_i)),   u_i ~ N(0, sigma1_sq)

The random intercept is integrated out per subject.  Internally the
integral is written in the standardized variable z = u / sigma so the prior
is N(0, 1); the adaptive rule recentres the Gauss-Hermite nodes at the
conditional mode of z and rescales them by the curvature there.

Parameter vectors are always ordered ``(beta_1, ..., beta_p, sigma1_sq)``.
Score and Hessian are obtained by differentiating under the integral:
the score is the posterior mean of the complete-data score, the Hessian
follows Louis' identity (posterior mean of the complete-data Hessian plus
posterior covariance of the complete-data score).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Literal

import numpy as np
from numpy.typing import NDArray
from scipy.special import gammaln, logsumexp

from .data import DEFAULT_DESIGN, DesignMatrices, DesignSpec, PanelDataset, build_design
from .errors import (
    LengthMismatch,
    NonConcaveAtOptimum,
    NonConvergence,
    NonFiniteDerivative,
    QuadratureDegenerate,
)

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
SIGMA2_FLOOR = 1e-6


@dataclass(frozen=True)
class Theta:
    beta: NDArray[np.float64]
    sigma1_sq: float

    def __post_init__(self) -> None:
        beta = np.array(self.beta, dtype=float).reshape(-1)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        s2 = float(self.sigma1_sq)
        if not s2 > 0 or not math.isfinite(s2):
            raise ValueError(f"sigma1_sq must be positive and finite, got {s2}")
        object.__setattr__(self, "sigma1_sq", s2)

    @property
    def p(self) -> int:
        return len(self.beta)

    def vector(self) -> NDArray[np.float64]:
        return np.append(self.beta, self.sigma1_sq)

    @classmethod
    def from_vector(cls, v: NDArray[np.float64]) -> Theta:
        v = np.asarray(v, dtype=float)
        return cls(v[:-1], float(v[-1]))


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite rule of ``order`` nodes; adaptive by default."""

    order: int = 25
    adaptive: bool = True

    def __post_init__(self) -> None:
        if int(self.order) < 1:
            raise ValueError("quadrature order must be >= 1")

    @cached_property
    def _rule(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        x, w = np.polynomial.hermite.hermgauss(int(self.order))
        return x, w

    @property
    def nodes(self) -> NDArray[np.float64]:
        return self._rule[0]

    @property
    def weights(self) -> NDArray[np.float64]:
        return self._rule[1]

    @property
    def log_weights(self) -> NDArray[np.float64]:
        # log(w_k) + x_k^2: weights for integrating f directly rather than f * exp(-x^2)
        x, w = self._rule
        return np.log(w) + x * x


DEFAULT_RULE = QuadratureRule()


# --------------------------------------------------------------------------- #
# Per-subject quadrature
# --------------------------------------------------------------------------- #


@dataclass
class _Posterior:
    """Quadrature nodes of the random-intercept posterior, one row per subject."""

    z: NDArray[np.float64]  # (m, Q) standardized nodes
    prob: NDArray[np.float64]  # (m, Q) normalized posterior weights
    loglik: NDArray[np.float64]  # (m,) l_i
    sigma: float

    def mean(self, f: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.einsum("mq,mq->m", self.prob, f)

    def cov(self, f: NDArray[np.float64], g: NDArray[np.float64]) -> NDArray[np.float64]:
        fc = f - self.mean(f)[:, None]
        gc = g - self.mean(g)[:, None]
        return np.einsum("mq,mq,mq->m", self.prob, fc, gc)


def _conditional_mode(
    a: NDArray[np.float64], c: NDArray[np.float64], sigma: float, max_iter: int = 100
) -> NDArray[np.float64]:
    """Maximize a*s*z - c*exp(s*z) - z^2/2 over z, elementwise (strictly concave)."""
    z = np.zeros_like(a)
    if not np.isfinite(sigma):
        raise QuadratureDegenerate("non-finite random-effect scale")
    for _ in range(max_iter):
        ez = c * np.exp(sigma * z)
        grad = a * sigma - sigma * ez - z
        hess = -(sigma * sigma) * ez - 1.0
        step = np.clip(-grad / hess, -2.0, 2.0)
        if not np.all(np.isfinite(step)):
            raise QuadratureDegenerate("conditional mode search produced non-finite values")
        z = z + step
        if np.all(np.abs(step) <= 1e-13 * (1.0 + np.abs(z))):
            # one polishing step so nodes are smooth functions of theta
            ez = c * np.exp(sigma * z)
            z = z - (a * sigma - sigma * ez - z) / (-(sigma * sigma) * ez - 1.0)
            return z
    raise QuadratureDegenerate(f"conditional mode search did not converge in {max_iter} iterations")


def _posterior(
    eta: NDArray[np.float64], y: NDArray[np.float64], sigma2: float, rule: QuadratureRule
) -> _Posterior:
    sigma = math.sqrt(sigma2)
    a = y.sum(axis=1)
    c = np.exp(eta).sum(axis=1)
    const = (y * eta).sum(axis=1) - gammaln(y + 1.0).sum(axis=1) - 0.5 * _LOG_2PI
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(const))):
        raise QuadratureDegenerate("non-finite linear predictor")

    with np.errstate(over="ignore", invalid="ignore"):
        return _posterior_nodes(a, c, const, sigma, sigma2, rule)


def _posterior_nodes(
    a: NDArray[np.float64],
    c: NDArray[np.float64],
    const: NDArray[np.float64],
    sigma: float,
    sigma2: float,
    rule: QuadratureRule,
) -> _Posterior:
    x = rule.nodes
    if rule.adaptive:
        zhat = _conditional_mode(a, c, sigma)
        curv = sigma2 * c * np.exp(sigma * zhat) + 1.0
        scale = 1.0 / np.sqrt(curv)
    else:
        zhat = np.zeros_like(a)
        scale = np.ones_like(a)
    z = zhat[:, None] + math.sqrt(2.0) * scale[:, None] * x[None, :]
    log_h = (
        a[:, None] * sigma * z
        - c[:, None] * np.exp(sigma * z)
        - 0.5 * z * z
        + const[:, None]
    )
    lw = rule.log_weights[None, :] + np.log(math.sqrt(2.0) * scale)[:, None] + log_h
    loglik = logsumexp(lw, axis=1)
    if not np.all(np.isfinite(loglik)):
        raise QuadratureDegenerate("quadrature sum is not finite")
    prob = np.exp(lw - loglik[:, None])
    return _Posterior(z=z, prob=prob, loglik=loglik, sigma=sigma)


def _as_design(data: PanelDataset | DesignMatrices, spec: DesignSpec | None) -> DesignMatrices:
    if isinstance(data, DesignMatrices):
        return data
    return build_design(data, spec or DEFAULT_DESIGN)


def _check_theta(design: DesignMatrices, theta: Theta) -> None:
    if theta.p != design.p:
        raise LengthMismatch(f"beta has length {theta.p}, design has {design.p} columns")


def subject_logliks(
    design: DesignMatrices, theta: Theta, rule: QuadratureRule = DEFAULT_RULE
) -> NDArray[np.float64]:
    """Vector of l_i(theta), one entry per subject."""
    _check_theta(design, theta)
    eta = design.Xb @ theta.beta
    return _posterior(eta, design.Yb, theta.sigma1_sq, rule).loglik


def subject_loglik(
    X_i: NDArray[np.float64],
    y_i: NDArray[np.float64],
    theta: Theta,
    rule: QuadratureRule = DEFAULT_RULE,
) -> float:
    """Marginal log-likelihood of one subject's counts.

    ``X_i`` is the subject's ``(n_i, p)`` design block and ``y_i`` its
    counts.  Uses the conditional-mode adaptive rule, so ``order=1`` is the
    Laplace approximation.
    """
    X_i = np.atleast_2d(np.asarray(X_i, dtype=float))
    y_i = np.asarray(y_i, dtype=float).reshape(1, -1)
    if X_i.shape[0] != y_i.shape[1] or X_i.shape[0] < 1:
        raise LengthMismatch("X_i rows must match y_i length (>= 1)")
    eta = (X_i @ theta.beta).reshape(1, -1)
    return float(_posterior(eta, y_i, theta.sigma1_sq, rule).loglik[0])


def _check_weights(design: DesignMatrices, weights: Any) -> NDArray[np.float64]:
    if weights is None:
        return np.ones(design.m)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if len(w) != design.m:
        raise LengthMismatch(f"got {len(w)} weights for {design.m} subjects")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return w


def total_loglik(
    data: PanelDataset | DesignMatrices,
    theta: Theta,
    weights: Any = None,
    rule: QuadratureRule = DEFAULT_RULE,
    spec: DesignSpec | None = None,
) -> float:
    """Case-weighted log-likelihood sum_i w_i l_i(theta).

    Summed with :func:`math.fsum` so the result does not depend on
    reduction order.
    """
    design = _as_design(data, spec)
    w = _check_weights(design, weights)
    li = subject_logliks(design, theta, rule)
    return math.fsum(w * li)


# --------------------------------------------------------------------------- #
# Derivatives
# --------------------------------------------------------------------------- #


@dataclass
class SubjectDerivatives:
    """Per-subject l_i, scores and Hessians.

    ``score`` has shape (m, p+1), ``hess`` (m, p+1, p+1), both in the
    parameterization requested from :func:`subject_derivatives`.
    """

    loglik: NDArray[np.float64]
    score: NDArray[np.float64]
    hess: NDArray[np.float64]
    b_hat: NDArray[np.float64]
    var_b: NDArray[np.float64]


def subject_derivatives(
    design: DesignMatrices,
    theta: Theta,
    rule: QuadratureRule = DEFAULT_RULE,
    parameterization: Literal["direct", "log"] = "direct",
) -> SubjectDerivatives:
    _check_theta(design, theta)
    s2 = theta.sigma1_sq
    X, Y = design.Xb, design.Yb
    eta = X @ theta.beta
    post = _posterior(eta, Y, s2, rule)
    p = design.p
    m = design.m

    ce = np.exp(eta)
    Xe = np.einsum("mj,mjp->mp", ce, X)  # X_i' exp(eta_i)
    Xy = np.einsum("mj,mjp->mp", Y, X)
    XeX = np.einsum("mj,mjp,mjq->mpq", ce, X, X)

    eu = np.exp(post.sigma * post.z)
    z2 = post.z * post.z
    E_eu = post.mean(eu)
    E_z = post.mean(post.z)
    E_z2 = post.mean(z2)
    var_eu = post.cov(eu, eu)
    cov_eu_z2 = post.cov(eu, z2)
    var_z2 = post.cov(z2, z2)

    # working parameter tau = log(sigma1_sq): complete-data score (z^2 - 1)/2,
    # complete-data second derivative -z^2/2
    score = np.empty((m, p + 1))
    score[:, :p] = Xy - E_eu[:, None] * Xe
    score[:, p] = 0.5 * (E_z2 - 1.0)

    hess = np.empty((m, p + 1, p + 1))
    hess[:, :p, :p] = -E_eu[:, None, None] * XeX + var_eu[:, None, None] * np.einsum(
        "mp,mq->mpq", Xe, Xe
    )
    cross = -0.5 * cov_eu_z2[:, None] * Xe
    hess[:, :p, p] = cross
    hess[:, p, :p] = cross
    hess[:, p, p] = -0.5 * E_z2 + 0.25 * var_z2

    if parameterization == "direct":
        g_tau = score[:, p].copy()
        score[:, p] = g_tau / s2
        hess[:, :p, p] /= s2
        hess[:, p, :p] /= s2
        hess[:, p, p] = (hess[:, p, p] - g_tau) / (s2 * s2)
    elif parameterization != "log":
        raise ValueError(f"unknown parameterization {parameterization!r}")

    if not (np.all(np.isfinite(score)) and np.all(np.isfinite(hess))):
        raise NonFiniteDerivative("score or Hessian is not finite")
    b_hat = post.sigma * E_z
    var_b = s2 * post.cov(post.z, post.z)
    return SubjectDerivatives(post.loglik, score, hess, b_hat, var_b)


def score_and_hessian(
    data: PanelDataset | DesignMatrices,
    theta: Theta,
    rule: QuadratureRule = DEFAULT_RULE,
    weights: Any = None,
    method: Literal["analytic", "fd"] = "analytic",
    spec: DesignSpec | None = None,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Per-subject scores Delta, shape (p+1, m), and Hessian of the weighted total.

    With ``method="fd"`` the Hessian is replaced by central differences of
    the analytic total score, step ``1e-5 * (1 + |theta_k|)``.
    """
    design = _as_design(data, spec)
    w = _check_weights(design, weights)
    d = subject_derivatives(design, theta, rule)
    delta = d.score.T.copy()
    if method == "analytic":
        H = np.einsum("m,mpq->pq", w, d.hess)
    elif method == "fd":
        v = theta.vector()
        k = len(v)
        H = np.empty((k, k))
        for j in range(k):
            h = 1e-5 * (1.0 + abs(v[j]))
            vp, vm = v.copy(), v.copy()
            vp[j] += h
            vm[j] -= h
            gp = w @ subject_derivatives(design, Theta.from_vector(vp), rule).score
            gm = w @ subject_derivatives(design, Theta.from_vector(vm), rule).score
            H[:, j] = (gp - gm) / (2 * h)
        H = 0.5 * (H + H.T)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.all(np.isfinite(H)):
        raise NonFiniteDerivative("Hessian is not finite")
    return delta, H


def eb_estimate(
    X_i: NDArray[np.float64],
    y_i: NDArray[np.float64],
    theta_hat: Theta,
    rule: QuadratureRule = DEFAULT_RULE,
) -> tuple[float, float]:
    """Posterior mean and variance of one subject's random intercept."""
    X_i = np.atleast_2d(np.asarray(X_i, dtype=float))
    y_i = np.asarray(y_i, dtype=float).reshape(1, -1)
    eta = (X_i @ theta_hat.beta).reshape(1, -1)
    post = _posterior(eta, y_i, theta_hat.sigma1_sq, rule)
    b = post.sigma * post.mean(post.z)
    v = theta_hat.sigma1_sq * post.cov(post.z, post.z)
    return float(b[0]), float(v[0])


# --------------------------------------------------------------------------- #
# Fitting
# --------------------------------------------------------------------------- #


@dataclass(eq=False)
class FitResult:
    theta_hat: Theta
    loglik: float
    li: NDArray[np.float64]
    delta: NDArray[np.float64]  # (p+1, m)
    hessian: NDArray[np.float64]  # (p+1, p+1)
    subject_hessians: NDArray[np.float64]  # (m, p+1, p+1)
    eb: NDArray[np.float64]  # (m, 2): b_hat, var_b
    mu_hat: NDArray[np.float64]  # (n,) marginal means
    design: DesignMatrices
    rule: QuadratureRule = DEFAULT_RULE
    weights: NDArray[np.float64] | None = None
    iterations: int = 0
    grad_norm: float = 0.0
    converged: bool = True
    at_boundary: bool = False
    history: list[float] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.design.m

    @property
    def p(self) -> int:
        return self.design.p

    def standard_errors(self) -> NDArray[np.float64]:
        return np.sqrt(np.diag(np.linalg.inv(-self.hessian)))

    def to_json(self) -> dict[str, Any]:
        return {
            "beta": [float(b) for b in self.theta_hat.beta],
            "sigma1_sq": self.theta_hat.sigma1_sq,
            "loglik": self.loglik,
            "li": [float(v) for v in self.li],
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "at_boundary": self.at_boundary,
            "terms": list(self.design.terms),
            "quadrature_order": self.rule.order,
        }


def evaluate_fit(
    data: PanelDataset | DesignMatrices,
    theta: Theta,
    rule: QuadratureRule = DEFAULT_RULE,
    weights: Any = None,
    spec: DesignSpec | None = None,
    **meta: Any,
) -> FitResult:
    """Populate a FitResult at a given theta (no optimization)."""
    design = _as_design(data, spec)
    w = _check_weights(design, weights)
    d = subject_derivatives(design, theta, rule)
    H = np.einsum("m,mpq->pq", w, d.hess)
    H = 0.5 * (H + H.T)
    mu = np.exp(design.X @ theta.beta + 0.5 * theta.sigma1_sq)
    return FitResult(
        theta_hat=theta,
        loglik=math.fsum(w * d.loglik),
        li=d.loglik,
        delta=d.score.T.copy(),
        hessian=H,
        subject_hessians=d.hess,
        eb=np.column_stack([d.b_hat, d.var_b]),
        mu_hat=mu,
        design=design,
        rule=rule,
        weights=None if weights is None else w,
        **meta,
    )


def poisson_glm(
    design: DesignMatrices, weights: Any = None, max_iter: int = 100, tol: float = 1e-10
) -> NDArray[np.float64]:
    """Fixed-effects Poisson regression by IRLS (random intercept ignored)."""
    w = np.repeat(_check_weights(design, weights), design.Xb.shape[1])
    X, y = design.X, design.y
    mu = y + 0.5
    eta = np.log(mu)
    beta = np.zeros(design.p)
    for _ in range(max_iter):
        W = w * mu
        zwork = eta + (y - mu) / mu
        beta_new = np.linalg.lstsq(X * np.sqrt(W)[:, None], zwork * np.sqrt(W), rcond=None)[0]
        eta = X @ beta_new
        mu = np.exp(eta)
        if np.max(np.abs(beta_new - beta)) < tol:
            return beta_new
        beta = beta_new
    return beta


def _to_working(theta: Theta, parameterization: str) -> NDArray[np.float64]:
    v = theta.vector()
    if parameterization == "log":
        v[-1] = math.log(v[-1])
    return v


def _from_working(v: NDArray[np.float64], parameterization: str) -> Theta:
    v = np.array(v, dtype=float)
    if parameterization == "log":
        v[-1] = math.exp(v[-1])
    return Theta.from_vector(v)


def _ascent_direction(g: NDArray[np.float64], H: NDArray[np.float64]) -> NDArray[np.float64]:
    """Newton direction, with -H eigenvalues floored when H is not negative definite."""
    try:
        L = np.linalg.cholesky(-H)
        return np.linalg.solve(L.T, np.linalg.solve(L, g))
    except np.linalg.LinAlgError:
        lam, Q = np.linalg.eigh(-H)
        floor = 1e-8 * max(float(np.max(np.abs(lam))), 1.0)
        lam = np.maximum(np.abs(lam), floor)
        return Q @ ((Q.T @ g) / lam)


def fit_ml(
    data: PanelDataset | DesignMatrices,
    spec: DesignSpec | None = None,
    rule: QuadratureRule = DEFAULT_RULE,
    init: Theta | None = None,
    *,
    weights: Any = None,
    parameterization: Literal["log", "direct"] = "log",
    grad_tol: float = 1e-6,
    step_tol: float = 1e-8,
    max_iter: int = 200,
    check_concavity: bool = True,
) -> FitResult:
    """Maximum-likelihood fit by Newton-Raphson with step halving.

    Optimizes over ``(beta, log sigma1_sq)`` by default.  Convergence
    requires the sup-norm of the working-scale gradient below ``grad_tol``
    and the Newton step below ``step_tol``.  If the variance is driven
    below ``SIGMA2_FLOOR`` with the gradient still pointing down, the fit
    stops there with ``at_boundary=True``.
    """
    design = _as_design(data, spec)
    w = _check_weights(design, weights)
    if design.n <= design.p + 1:
        raise ValueError("not enough observations for the number of parameters")
    if init is None:
        init = Theta(poisson_glm(design, w), 0.1)
    _check_theta(design, init)

    def evaluate(v: NDArray[np.float64]) -> tuple[float, NDArray[np.float64], NDArray[np.float64]]:
        d = subject_derivatives(design, _from_working(v, parameterization), rule, parameterization)
        return math.fsum(w * d.loglik), w @ d.score, np.einsum("m,mpq->pq", w, d.hess)

    def loglik_at(v: NDArray[np.float64]) -> float:
        th = _from_working(v, parameterization)
        return math.fsum(w * subject_logliks(design, th, rule))

    v = _to_working(init, parameterization)
    ll, g, H = evaluate(v)
    history = [ll]
    converged = at_boundary = False
    gnorm = float(np.max(np.abs(g)))
    it = 0
    for it in range(1, max_iter + 1):
        step = _ascent_direction(g, H)
        gnorm = float(np.max(np.abs(g)))
        if gnorm < grad_tol and float(np.max(np.abs(step))) < step_tol:
            converged = True
            break
        slack = 1e-12 * (1.0 + abs(ll))
        t = 1.0
        accepted = False
        for _ in range(40):
            cand = v + t * step
            if parameterization == "direct" and cand[-1] <= 0:
                t *= 0.5
                continue
            if parameterization == "log" and cand[-1] < math.log(SIGMA2_FLOOR):
                cand[-1] = math.log(SIGMA2_FLOOR)
            try:
                ll_new = loglik_at(cand)
            except (QuadratureDegenerate, NonFiniteDerivative, FloatingPointError, ValueError):
                ll_new = -math.inf
            if np.isfinite(ll_new) and ll_new >= ll - slack:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if gnorm < grad_tol:
                converged = True
                break
            raise NonConvergence(
                f"line search failed at iteration {it} (gradient norm {gnorm:.3g})",
                iterations=it,
                grad_norm=gnorm,
            )
        v = cand
        ll, g, H = evaluate(v)
        history.append(ll)
        if parameterization == "log" and v[-1] <= math.log(SIGMA2_FLOOR) + 1e-12 and g[-1] <= 0:
            at_boundary = converged = True
            gnorm = float(np.max(np.abs(g[:-1]))) if len(g) > 1 else 0.0
            break
    if not converged:
        raise NonConvergence(
            f"no convergence after {max_iter} iterations (gradient norm {gnorm:.3g})",
            iterations=max_iter,
            grad_norm=gnorm,
        )

    theta_hat = _from_working(v, parameterization)
    fit = evaluate_fit(
        design,
        theta_hat,
        rule,
        weights=weights,
        iterations=it,
        grad_norm=gnorm,
        converged=True,
        at_boundary=at_boundary,
        history=history,
    )
    if check_concavity and not at_boundary:
        eig = np.linalg.eigvalsh(fit.hessian)
        if np.any(eig >= 0):
            raise NonConcaveAtOptimum(f"Hessian eigenvalues at optimum: {eig}")
    logger.debug("fit converged in %d iterations, loglik %.6f", it, fit.loglik)
    return fit


def fit_result_from_json(
    doc: dict[str, Any], data: PanelDataset, rule: QuadratureRule | None = None
) -> FitResult:
    """Rebuild a FitResult for ``data`` at the stored estimate."""
    terms = tuple(doc.get("terms", DEFAULT_DESIGN.terms))
    rule = rule or QuadratureRule(int(doc.get("quadrature_order", DEFAULT_RULE.order)))
    theta = Theta(np.asarray(doc["beta"], dtype=float), float(doc["sigma1_sq"]))
    return evaluate_fit(
        data,
        theta,
        rule,
        spec=DesignSpec(terms),
        iterations=int(doc.get("iterations", 0)),
        grad_norm=float(doc.get("grad_norm", 0.0)),
        converged=bool(doc.get("converged", True)),
        at_boundary=bool(doc.get("at_boundary", False)),
    )
