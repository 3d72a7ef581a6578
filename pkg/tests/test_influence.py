from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from pmelm.influence import (
    CSV_HEADER,
    block_diagonal_curvature,
    component_norms,
    curvature,
    curvature_factors,
    decompose,
    decompose_all,
    diagnose,
    displacement_curvature,
    fit_curvatures,
    local_curvature,
    marginal_covariance,
    one_step_deletion,
    rank_of,
    read_records,
    records_from_csv,
    records_to_csv,
    refit_cook_distances,
    residual_stats,
    stat_vector,
    variance_curvature_closed_form,
    write_records,
)
from pmelm.model import evaluate_fit, fit_ml, subject_logliks, total_loglik
from pmelm.simulate import ContaminationSpec, GenSpec, contaminate, generate


@pytest.fixture(scope="module")
def clean_records(clean_fit):
    return diagnose(clean_fit)


# ---------------------------------------------------------------- curvature


def test_curvature_is_quadratic_form(clean_fit):
    H = clean_fit.hessian
    delta = clean_fit.delta
    C = curvature(delta, H)
    ref = np.array([2 * d @ np.linalg.solve(-H, d) for d in delta.T])
    np.testing.assert_allclose(C, ref, rtol=1e-10)
    assert np.all(C >= 0)
    assert local_curvature(clean_fit, 3) == pytest.approx(C[3], rel=1e-14)


def test_zero_score_and_homogeneity(clean_fit):
    H = clean_fit.hessian
    d = clean_fit.delta[:, :3].copy()
    d[:, 0] = 0.0
    C = curvature(d, H)
    assert C[0] == 0.0
    np.testing.assert_allclose(curvature(2.5 * d, H), 2.5**2 * C, rtol=1e-12)


def test_factorized_form_reproduces_curvature(clean_fit):
    hinv_norm, dd, cos_phi = curvature_factors(clean_fit)
    C = fit_curvatures(clean_fit)
    np.testing.assert_allclose(2 * hinv_norm * dd * cos_phi, C, rtol=1e-12)
    assert np.all(np.abs(cos_phi) <= 1)


def test_curvature_matches_displacement_second_difference(clean_fit):
    C = fit_curvatures(clean_fit)
    for i in (0, 5, int(np.argmax(C))):
        fd = displacement_curvature(clean_fit, i, t=1e-3)
        assert fd == pytest.approx(C[i], rel=0.05)


# ---------------------------------------------------------------- decomposition


def test_block_parts_add_up(clean_fit):
    C1, C2 = decompose_all(clean_fit)
    block = block_diagonal_curvature(clean_fit)
    np.testing.assert_allclose(C1 + C2, block, rtol=1e-10)
    assert decompose(clean_fit, 4) == (pytest.approx(C1[4]), pytest.approx(C2[4]))


def test_zero_variance_score_gives_zero_variance_part(clean_fit):
    d = clean_fit.delta.copy()
    d[-1] = 0.0
    fit = dataclasses.replace(clean_fit, delta=d)
    C1, C2 = decompose_all(fit)
    np.testing.assert_array_equal(C2, 0.0)
    np.testing.assert_allclose(block_diagonal_curvature(fit), C1, rtol=1e-12)


def test_variance_part_matches_scalar_trace_form(clean_fit):
    _, C2 = decompose_all(clean_fit)
    np.testing.assert_allclose(C2, variance_curvature_closed_form(clean_fit), rtol=1e-9)


def test_boundary_fit_drops_variance_part():
    panel = generate(GenSpec(sigma1=0.5, seed=11, baseline="shared"))
    fit = fit_ml(panel)
    assert fit.at_boundary
    records = diagnose(fit)
    assert all(r.C2_i == 0.0 for r in records)
    assert all(r.C_i >= 0 and r.cook_onestep >= 0 for r in records)


# ---------------------------------------------------------------- residuals


def test_rounded_mean_has_small_residual(clean_fit, clean_panel):
    J = 4
    y = clean_panel.y.copy()
    y[0] = np.round(clean_fit.mu_hat[:J]).astype(int)
    fit = evaluate_fit(clean_panel.replace(y=y), clean_fit.theta_hat)
    _, rr, _ = residual_stats(fit)
    assert rr[0] <= 1.0


def test_residuals_partition_by_subject(clean_fit):
    res, rr, _ = residual_stats(clean_fit)
    assert res.r.shape == (236,)
    np.testing.assert_array_equal(np.concatenate([res.subject(i) for i in range(59)]), res.r)
    np.testing.assert_allclose(rr, [res.subject(i) @ res.subject(i) for i in range(59)])


def test_method4_target_has_largest_residual(method4_fit):
    _, rr, _ = residual_stats(method4_fit)
    assert int(np.argmax(rr)) == 0
    assert rr[0] >= 4 * (100 - method4_fit.mu_hat[:4].max()) ** 2


def test_cos_alpha_bounded_over_seeds():
    for seed in range(20):
        fit = fit_ml(generate(GenSpec(sigma1=0.5, seed=seed)))
        _, rr, cos_alpha = residual_stats(fit)
        assert np.all(rr >= 0)
        assert np.all((cos_alpha >= -1) & (cos_alpha <= 1))


def test_method3_residual_exceeds_method1():
    for seed in range(10):
        clean = generate(GenSpec(sigma1=0.5, seed=seed))
        rr = [residual_stats(fit_ml(contaminate(clean, ContaminationSpec(m))))[1][0]
              for m in (1, 3)]
        assert rr[1] > rr[0]


# ---------------------------------------------------------------- deletion


def test_zero_scores_give_zero_cook(clean_fit):
    fit = dataclasses.replace(clean_fit, delta=np.zeros_like(clean_fit.delta))
    theta1, cook = one_step_deletion(fit, 2)
    np.testing.assert_array_equal(theta1.vector(), clean_fit.theta_hat.vector())
    assert cook == 0.0


def test_one_step_tracks_refit(clean_fit):
    one = np.array([one_step_deletion(clean_fit, i)[1] for i in range(clean_fit.m)])
    full = refit_cook_distances(clean_fit)
    assert spearmanr(one, full).statistic >= 0.8


def test_deletion_weights_match_deleted_likelihood(clean_fit):
    w = np.ones(clean_fit.m)
    w[9] = 0.0
    li = subject_logliks(clean_fit.design, clean_fit.theta_hat)
    deleted = math.fsum(np.delete(li, 9))
    assert total_loglik(clean_fit.design, clean_fit.theta_hat, w) == deleted


def test_duplicate_subject_less_influential_than_outlier(method4_panel):
    y = np.vstack([method4_panel.y, method4_panel.y[1]])
    panel = method4_panel.replace(
        ids=np.append(method4_panel.ids, 60), trt=np.append(method4_panel.trt, method4_panel.trt[1]),
        base=np.append(method4_panel.base, method4_panel.base[1]),
        age=np.append(method4_panel.age, method4_panel.age[1]), y=y)
    fit = fit_ml(panel)
    _, cook_dup = one_step_deletion(fit, 59)
    _, cook_out = one_step_deletion(fit, 0)
    assert cook_dup < cook_out


# ---------------------------------------------------------------- component norms


def test_component_norm_limits(clean_fit):
    mu = clean_fit.mu_hat[:4]
    np.testing.assert_allclose(marginal_covariance(mu, 1e-14), np.diag(mu), atol=1e-10)
    assert component_norms(clean_fit, 0)[2] == pytest.approx(4.0)
    mu_hat = clean_fit.mu_hat.copy()
    mu_hat[:4] = clean_fit.design.y[:4]
    fit = dataclasses.replace(clean_fit, mu_hat=mu_hat)
    xx, r, zz, ir, vinv = component_norms(fit, 0)
    assert r == 0.0
    assert ir == pytest.approx(2.0)


def test_marginal_covariance_monte_carlo(clean_fit):
    theta = clean_fit.theta_hat
    i = 3
    eta = clean_fit.design.Xb[i] @ theta.beta
    rng = np.random.default_rng(7)
    u = rng.normal(0, math.sqrt(theta.sigma1_sq), 1_000_000)
    y = rng.poisson(np.exp(eta[None, :] + u[:, None]))
    emp = np.cov(y, rowvar=False)
    V = marginal_covariance(clean_fit.mu_hat[4 * i: 4 * i + 4], theta.sigma1_sq)
    np.testing.assert_allclose(emp, V, rtol=0.02)


# ---------------------------------------------------------------- table


def test_diagnose_table(clean_records, clean_fit):
    assert len(clean_records) == 59
    for r in clean_records:
        assert r.C_i >= 0 and r.cook_onestep >= 0 and r.rr_i >= 0
        assert -1 <= r.cos_alpha_i <= 1 and -1 <= r.cos_phi_i <= 1
        assert all(math.isfinite(v) for v in dataclasses.astuple(r))
    assert [r.subject_id for r in clean_records] == list(range(1, 60))
    assert diagnose(clean_fit) == clean_records


def test_method4_target_ranks_first_by_rr(method4_fit):
    records = diagnose(method4_fit)
    assert rank_of(records, "rri", 1) == 1
    assert int(np.argmax(stat_vector(records, "rri"))) == 0


def test_csv_round_trip(clean_records, tmp_path):
    text = records_to_csv(clean_records)
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    assert records_from_csv(text) == clean_records
    path = tmp_path / "x_diag.csv"
    write_records(clean_records, path)
    assert read_records(path) == clean_records

