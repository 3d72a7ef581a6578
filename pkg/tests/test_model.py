from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar
from scipy.special import gammaln
from scipy.stats import norm

from oracles import random_cases, trapezoid_loglik, trapezoid_posterior
from pmelm.data import DesignMatrices, DesignSpec, PanelDataset, build_design
from pmelm.errors import LengthMismatch, NonConvergence, QuadratureDegenerate
from pmelm.model import (
    FitResult,
    QuadratureRule,
    Theta,
    eb_estimate,
    fit_ml,
    fit_result_from_json,
    score_and_hessian,
    subject_derivatives,
    subject_logliks,
    subject_loglik,
    total_loglik,
)
from pmelm.simulate import GenSpec, generate


def one_subject(X_i, y_i):
    return DesignMatrices(X_i[None], np.asarray(y_i, float)[None], np.array([1]),
                          np.array([0]), ("x",) * X_i.shape[1])


# ---------------------------------------------------------------- quadrature


@pytest.mark.parametrize("order", [5, 10, 25, 50])
def test_scaled_rule_normalizes_gaussian(order):
    rule = QuadratureRule(order)
    x, w = rule.nodes, rule.weights
    total = np.sum(w * np.exp(x**2) * math.sqrt(2) * norm.pdf(math.sqrt(2) * x))
    assert abs(total - 1.0) < 1e-12


def test_adaptive_gh_matches_dense_trapezoid():
    for X_i, y_i, theta in random_cases(10, seed=1):
        ref = trapezoid_loglik(X_i, y_i, theta)
        got = subject_loglik(X_i, y_i, theta)
        assert abs(got - ref) <= 1e-8 * abs(ref)


def test_one_node_rule_is_laplace():
    for X_i, y_i, theta in random_cases(5, seed=2):
        eta, s2 = X_i @ theta.beta, theta.sigma1_sq

        def neg_f(u):
            lin = eta + u
            return -(np.sum(y_i * lin - np.exp(lin) - gammaln(y_i + 1))
                     - 0.5 * u * u / s2 - 0.5 * math.log(2 * math.pi * s2))

        u_hat = minimize_scalar(neg_f, bracket=(-1, 1), tol=1e-12).x
        h = np.exp(eta + u_hat).sum() + 1.0 / s2
        laplace = -neg_f(u_hat) + 0.5 * math.log(2 * math.pi / h)
        got = subject_loglik(X_i, y_i, theta, QuadratureRule(1))
        assert got == pytest.approx(laplace, rel=1e-10, abs=1e-10)


def test_vanishing_variance_gives_poisson_loglik():
    for X_i, y_i, theta in random_cases(5, seed=3):
        lin = X_i @ theta.beta
        plain = float(np.sum(y_i * lin - np.exp(lin) - gammaln(y_i + 1)))
        got = subject_loglik(X_i, y_i, Theta(theta.beta, 1e-12))
        assert abs(got - plain) <= 1e-6


def test_quadrature_order_converged_by_25():
    for sigma1 in (0.25, 0.5, 1.0):
        for seed in range(3):
            panel = generate(GenSpec(sigma1=sigma1, seed=seed))
            d = build_design(panel)
            theta = Theta([1.6, 0.9, -0.3, 0.35, 0.5], sigma1**2)
            a = subject_logliks(d, theta, QuadratureRule(25))
            b = subject_logliks(d, theta, QuadratureRule(50))
            assert np.max(np.abs(a - b)) <= 1e-8


def test_non_finite_predictor_raises():
    X = np.ones((4, 1))
    with pytest.raises(QuadratureDegenerate):
        subject_loglik(X, [1, 1, 1, 1], Theta([np.nan], 0.5))


# ---------------------------------------------------------------- weights


def test_case_weights(clean_panel):
    theta = Theta([1.5, 0.8, -0.2, 0.3, 0.4], 0.3)
    d = build_design(clean_panel)
    li = subject_logliks(d, theta)
    full = total_loglik(clean_panel, theta)
    assert total_loglik(clean_panel, theta, np.ones(d.m)) == full
    assert full == math.fsum(li)
    e = np.zeros(d.m)
    e[7] = 1.0
    assert total_loglik(clean_panel, theta, e) == li[7]
    w = np.ones(d.m)
    w[7] = 0.0
    assert abs(total_loglik(clean_panel, theta, w) - (full - li[7])) <= 1e-10


def test_case_weights_linear(clean_panel, rng):
    theta = Theta([1.5, 0.8, -0.2, 0.3, 0.4], 0.3)
    w1, w2 = rng.uniform(0, 2, 59), rng.uniform(0, 2, 59)
    a, b = 0.7, -1.3
    lhs = total_loglik(clean_panel, theta, a * w1 + b * w2)
    rhs = a * total_loglik(clean_panel, theta, w1) + b * total_loglik(clean_panel, theta, w2)
    assert lhs == pytest.approx(rhs, rel=1e-13)


def test_weight_length_mismatch(clean_panel):
    with pytest.raises(LengthMismatch):
        total_loglik(clean_panel, Theta(np.zeros(5), 0.1), np.ones(3))


# ---------------------------------------------------------------- derivatives


def _fd_score(X_i, y_i, theta, h=1e-5):
    v = theta.vector()
    out = np.empty_like(v)
    for k in range(len(v)):
        step = h * (1 + abs(v[k]))
        up, dn = v.copy(), v.copy()
        up[k] += step
        dn[k] -= step
        out[k] = (subject_loglik(X_i, y_i, Theta.from_vector(up))
                  - subject_loglik(X_i, y_i, Theta.from_vector(dn))) / (2 * step)
    return out


def test_score_matches_finite_differences():
    for X_i, y_i, theta in random_cases(10, seed=4):
        got = subject_derivatives(one_subject(X_i, y_i), theta).score[0]
        ref = _fd_score(X_i, y_i, theta)
        np.testing.assert_allclose(got, ref, rtol=1e-4, atol=1e-6)


def test_score_limit_is_poisson_score(clean_panel):
    d = build_design(clean_panel)
    beta = np.array([1.5, 0.8, -0.2, 0.3, 0.4])
    got = subject_derivatives(d, Theta(beta, 1e-10)).score[:, :-1]
    mu = np.exp(d.Xb @ beta)
    ref = np.einsum("mj,mjp->mp", d.Yb - mu, d.Xb)
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-6)


def test_log_and_direct_derivatives_agree(clean_panel):
    d = build_design(clean_panel)
    theta = Theta([1.5, 0.8, -0.2, 0.3, 0.4], 0.3)
    direct = subject_derivatives(d, theta, parameterization="direct")
    log = subject_derivatives(d, theta, parameterization="log")
    np.testing.assert_allclose(log.score[:, -1], direct.score[:, -1] * 0.3, rtol=1e-12)
    np.testing.assert_allclose(log.score[:, :-1], direct.score[:, :-1], rtol=1e-12)


def test_hessian_symmetric_and_matches_fd(clean_fit, clean_panel):
    _, H = score_and_hessian(clean_panel, clean_fit.theta_hat)
    assert np.max(np.abs(H - H.T)) <= 1e-8
    _, H_fd = score_and_hessian(clean_panel, clean_fit.theta_hat, method="fd")
    np.testing.assert_allclose(H, H_fd, rtol=1e-5, atol=1e-6 * np.abs(H).max())


def test_stationarity_at_estimate(clean_fit, clean_panel):
    delta, H = score_and_hessian(clean_panel, clean_fit.theta_hat)
    assert np.max(np.abs(delta.sum(axis=1))) <= 1e-5 * np.abs(H).sum(axis=1).max()


# ---------------------------------------------------------------- fitting


def test_fit_result_invariants(clean_fit):
    f: FitResult = clean_fit
    assert f.converged and not f.at_boundary
    assert abs(math.fsum(f.li) - f.loglik) <= 1e-8 * abs(f.loglik)
    assert np.all(np.linalg.eigvalsh(f.hessian) < 0)
    assert f.delta.shape == (6, 59)
    assert f.eb.shape == (59, 2)
    assert f.mu_hat.shape == (236,)


def test_newton_history_monotone(method4_fit):
    hist = np.asarray(method4_fit.history)
    slack = 1e-12 * (1 + np.abs(hist[:-1]))
    assert np.all(np.diff(hist) >= -slack)


def test_refit_is_fixed_point(clean_fit, clean_panel):
    again = fit_ml(clean_panel, init=clean_fit.theta_hat)
    assert again.iterations <= 2
    np.testing.assert_allclose(again.theta_hat.vector(), clean_fit.theta_hat.vector(),
                               rtol=0, atol=1e-8)


def test_reparameterization_consistency():
    for sigma1, seed in ((0.5, 1), (1.0, 2)):
        panel = generate(GenSpec(sigma1=sigma1, seed=seed))
        a = fit_ml(panel, parameterization="log")
        b = fit_ml(panel, parameterization="direct")
        assert not a.at_boundary
        np.testing.assert_allclose(a.theta_hat.vector(), b.theta_hat.vector(),
                                   rtol=0, atol=1e-6)


def test_recovery_one_panel():
    panel = generate(GenSpec(sigma1=0.5, m1=500, beta=(1.0, 0, 0, 0, 0), seed=99))
    fit = fit_ml(panel)
    se = fit.standard_errors()
    z = (fit.theta_hat.vector() - np.array([1.0, 0, 0, 0, 0, 0.25])) / se
    assert np.all(np.abs(z) < 3.0)


def test_degenerate_variance_recovery():
    panel = generate(GenSpec(sigma1=1e-6, m1=500, beta=(1.0, 0, 0, 0, 0), seed=5))
    fit = fit_ml(panel)
    assert fit.theta_hat.sigma1_sq <= 0.01


def test_nonconvergence_reports_iterations(clean_panel):
    with pytest.raises(NonConvergence) as info:
        fit_ml(clean_panel, max_iter=1)
    assert info.value.iterations == 1
    assert info.value.grad_norm > 0


def test_json_round_trip(clean_fit, clean_panel):
    doc = clean_fit.to_json()
    for key in ("beta", "sigma1_sq", "loglik", "li", "iterations", "grad_norm"):
        assert key in doc
    back = fit_result_from_json(doc, clean_panel)
    np.testing.assert_array_equal(back.theta_hat.vector(), clean_fit.theta_hat.vector())
    assert back.loglik == clean_fit.loglik


# ---------------------------------------------------------------- empirical Bayes


def test_eb_matches_dense_grid():
    for X_i, y_i, theta in random_cases(10, seed=5):
        b, v = eb_estimate(X_i, y_i, theta)
        mb, mv = trapezoid_posterior(X_i, y_i, theta)
        assert abs(b - mb) <= 1e-6
        assert abs(v - mv) <= 1e-6


def test_eb_no_pull_at_fitted_mean():
    X = np.ones((4, 1))
    b, _ = eb_estimate(X, [3, 3, 3, 3], Theta([math.log(3.0)], 1e-4))
    assert abs(b) <= 1e-3


def test_eb_posterior_contraction(clean_fit):
    assert np.all(clean_fit.eb[:, 1] < clean_fit.theta_hat.sigma1_sq)


def test_intercept_only_design_fits():
    panel = generate(GenSpec(sigma1=0.5, beta=(1.2,), seed=4), DesignSpec(("intercept",)))
    fit = fit_ml(panel, DesignSpec(("intercept",)))
    assert fit.theta_hat.p == 1
    assert isinstance(panel, PanelDataset)
