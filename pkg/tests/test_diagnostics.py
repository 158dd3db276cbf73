import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_points
from ngvi.data import synth
from ngvi.diagnostics import (
    UnsupportedModelError,
    assumption2_linear1d,
    bfbe,
    boundary_direction_sweep,
    certify_relative_smoothness,
    cholesky_vector,
    coercivity_scan,
    descent_audit,
    hessian_elbo,
    midpoint_slack,
    moduli,
    optimal_value,
    pl_residual,
    stein_bound_check,
    sufficient_constants,
)
from ngvi.geometry import (
    CholeskyParams,
    DomainBox,
    DomainError,
    ExpectationParams,
    StandardParams,
    hessian_A_star,
    to_expectation,
    to_standard,
)
from ngvi.models import Dataset, EstimatorConfig, LikelihoodModel, elbo, exact_grad, objective
from ngvi.optimizers import StepSchedule, run


def fd_hessian(f, v, h=1e-4):
    n = v.size
    H = np.empty((n, n))
    E = np.eye(n) * h
    for i in range(n):
        for j in range(n):
            H[i, j] = (f(v + E[i] + E[j]) - f(v + E[i] - E[j]) - f(v - E[i] + E[j]) + f(v - E[i] - E[j])) / (4 * h * h)
    return H


# --- Hessians --------------------------------------------------------------------------


def test_linear_1d_loglik_hessian_vanishes():
    model = LikelihoodModel("linear", Dataset([[1.3]], [0.4]))
    w = to_expectation(StandardParams([0.2], [0.8]))
    np.testing.assert_allclose(hessian_elbo(w, model, part="loglik"), 0.0, atol=1e-12)
    np.testing.assert_allclose(hessian_elbo(w, model), hessian_A_star(w)[0], atol=1e-12)


def test_hessian_matches_finite_differences(logistic_2d, rng):
    for w in random_points(rng, 5, d=2, U=1.5, D=2):
        H = hessian_elbo(w, logistic_2d)
        fd = fd_hessian(lambda v: elbo(ExpectationParams.from_vector(v), logistic_2d), w.as_vector())
        np.testing.assert_allclose(H, fd, atol=1e-4)
        assert np.max(np.abs(H - H.T)) <= 1e-12


def test_hessian_poisson_matches_finite_differences(rng):
    model = LikelihoodModel("poisson", Dataset(rng.uniform(-0.5, 0.5, (4, 2)), [0.0, 1.0, 3.0, 2.0]))
    for w in random_points(rng, 3, d=2, U=1.0, D=2):
        fd = fd_hessian(lambda v: elbo(ExpectationParams.from_vector(v), model, "closed_form"), w.as_vector())
        np.testing.assert_allclose(hessian_elbo(w, model), fd, atol=1e-4)


def test_hessian_rejects_bad_part(logistic_1d):
    with pytest.raises(ValueError):
        hessian_elbo(ExpectationParams([0.0], [1.0]), logistic_1d, part="kl")


# --- relative smoothness certificates ------------------------------------------------------


def test_linear_certificate_is_exactly_one():
    model = LikelihoodModel("linear", Dataset([[1.0]], [2.0]))
    cert = certify_relative_smoothness(model, DomainBox(3.0, 4.0))
    assert cert.alpha == pytest.approx(1.0, abs=1e-9)
    assert cert.beta == pytest.approx(1.0, abs=1e-9)
    assert cert.passed and cert.iff_agreement


def test_logistic_certificate_below_sufficient_bound(logistic_1d):
    box = DomainBox(1.0, 2.0)
    cert = certify_relative_smoothness(logistic_1d, box, part="loglik")
    bound = sufficient_constants("logistic", logistic_1d.data, box)
    assert bound.beta == pytest.approx(1.25)
    assert 0 < cert.beta <= bound.beta
    assert cert.passed and cert.min_slack >= -1e-9


def test_certificate_is_grid_stable(logistic_2d):
    box = DomainBox(1.0, 2.0)
    coarse = certify_relative_smoothness(logistic_2d, box, points_per_axis=5)
    fine = certify_relative_smoothness(logistic_2d, box, points_per_axis=9)
    assert abs(fine.beta - coarse.beta) <= 0.05 * fine.beta
    assert abs(fine.alpha - coarse.alpha) <= 0.05 * abs(fine.alpha) + 1e-9


@pytest.mark.parametrize("data", [Dataset([[1.0]], [1.0]), Dataset([[-2.0], [0.5]], [1.0, -1.0])])
def test_univariate_iff_conditions_agree_with_eigen_check(data):
    model = LikelihoodModel("logistic", data)
    for box in (DomainBox(1.0, 2.0), DomainBox(2.0, 3.0)):
        cert = certify_relative_smoothness(model, box, part="loglik")
        assert cert.iff_agreement, cert.iff_disagreements


def test_given_pair_is_checked(logistic_1d):
    box = DomainBox(1.0, 2.0)
    tight = certify_relative_smoothness(logistic_1d, box)
    ok = certify_relative_smoothness(logistic_1d, box, alpha_beta=(tight.alpha - 0.01, tight.beta + 0.01))
    assert ok.passed and ok.min_slack >= 0
    bad = certify_relative_smoothness(logistic_1d, box, alpha_beta=(tight.alpha, 0.5 * tight.beta))
    assert not bad.passed


def test_coarse_grid_is_flagged(logistic_1d):
    cert = certify_relative_smoothness(logistic_1d, DomainBox(1.0, 2.0), points_per_axis=3)
    assert cert.warnings


def test_large_dimension_switches_to_sampling():
    model = LikelihoodModel("logistic", synth("logistic", n=10, d=3, seed=0))
    cert = certify_relative_smoothness(model, DomainBox(1.0, 2.0), n_samples=500)
    assert cert.sampled and cert.grid.shape == (500, 2, 3)
    assert cert.iff_agreement is None


def test_sufficient_constants_examples():
    box = DomainBox(1.0, 2.0)
    c = sufficient_constants("logistic", Dataset([[1.0]], [1.0]), box)
    assert (c.L1, c.L2) == (1.0, 0.25) and not c.heuristic
    z = sufficient_constants("logistic", Dataset([[0.0]], [1.0]), box)
    assert (z.L1, z.L2, z.beta) == (0.0, 0.0, 0.0)
    lin = sufficient_constants("linear", Dataset([[1.0]], [1.0]), box)
    assert lin.beta == 0.0
    with pytest.raises(UnsupportedModelError):
        sufficient_constants("poisson", Dataset([[1.0]], [1.0]), box)
    multi = sufficient_constants("logistic", synth("logistic", n=5, d=3, seed=0), box)
    assert multi.heuristic and multi.beta > 0


# --- moduli and hidden convexity -------------------------------------------------------------


def test_moduli_examples():
    m = moduli(DomainBox(4.0, 25.0))
    assert m.mu_C == pytest.approx(165**-0.5, abs=1e-7)
    assert m.mu_B == pytest.approx(m.mu_C**2 / (9 * 16 * 625))
    m1 = moduli(DomainBox(1.0, 1.0))
    assert m1.C_S == pytest.approx(1 / 7, abs=1e-7)
    assert m1.C_L == 4.5
    assert m1.mu_H == 1.0


def test_mirror_eigenvalues_within_moduli(rng):
    box = DomainBox(2.0, 3.0)
    m = moduli(box)
    pts = random_points(rng, 1000, d=1, U=box.U, D=box.D)
    ev = np.array([np.linalg.eigvalsh(hessian_A_star(w)[0]) for w in pts])
    assert ev.min() >= m.C_S and ev.max() <= m.C_L


def test_cholesky_map_inverse_lipschitz(rng):
    box = DomainBox(2.0, 3.0)
    mu_C = moduli(box).mu_C
    a = random_points(rng, 1000, d=2, U=box.U, D=box.D)
    b = random_points(rng, 1000, d=2, U=box.U, D=box.D)
    for wa, wb in zip(a, b):
        lhs = np.linalg.norm(cholesky_vector(wa) - cholesky_vector(wb))
        assert lhs >= mu_C * np.linalg.norm(wa.as_vector() - wb.as_vector())


def test_cholesky_objective_is_one_strongly_convex(logistic_2d, rng):
    for _ in range(100):
        a = CholeskyParams(rng.uniform(-2, 2, 2), rng.uniform(0.3, 2, 2))
        b = CholeskyParams(rng.uniform(-2, 2, 2), rng.uniform(0.3, 2, 2))
        assert midpoint_slack(logistic_2d, a, b, modulus=1.0) >= -1e-9


# --- BFBE -------------------------------------------------------------------------------------


def test_bfbe_zero_at_interior_stationary_point():
    model = LikelihoodModel("linear", Dataset([[1.0]], [2.0]))
    w = to_expectation(StandardParams([1.0], [0.5]))
    res = bfbe(w, 3.0, model, DomainBox(3.0, 4.0))
    assert res.value == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(res.minimizer.as_vector(), w.as_vector(), atol=1e-12)


def test_bfbe_minimizer_matches_grid_search(logistic_1d, rng):
    box = DomainBox(2.0, 4.0)
    M, S = np.meshgrid(np.linspace(-box.U, box.U, 401), np.linspace(1 / box.D, box.D, 401), indexing="ij")
    for w in random_points(rng, 5, d=1, U=box.U, D=box.D):
        sp = to_standard(w)
        g = exact_grad(w, logistic_1d)
        for rho in (0.3, 2.0):
            res = bfbe(w, rho, logistic_1d, box)

            def inner(m, s):
                kl = 0.5 * (np.log(sp.sigma2[0] / s) + (s + (m - sp.mu[0]) ** 2) / sp.sigma2[0] - 1)
                lin = g.g_xi[0] * (m - w.xi[0]) + g.g_Xi[0] * (s + m**2 - w.Xi[0])
                return lin + rho * kl

            best = float(inner(M, S).min())
            got = to_standard(res.minimizer)
            value = float(inner(got.mu[0], got.sigma2[0]))
            assert value <= best + 1e-9
            assert res.value == pytest.approx(-2 * rho * value, rel=1e-6, abs=1e-12)
            assert box.contains(res.minimizer)


def test_bfbe_dominates_scaled_gradient_norm(logistic_2d, rng):
    box = DomainBox(2.0, 3.0)
    C_L = moduli(box).C_L
    for w in random_points(rng, 20, d=2, U=1.5, D=2.5):
        g = exact_grad(w, logistic_2d)
        assert bfbe(w, 1e6, logistic_2d, box).value >= g.norm() ** 2 / (2 * C_L)


def test_bfbe_rejects_nonpositive_rho(logistic_1d):
    with pytest.raises(ValueError):
        bfbe(ExpectationParams([0.0], [1.0]), 0.0, logistic_1d, DomainBox(1.0, 2.0))


# --- PL inequality ------------------------------------------------------------------------------


def test_pl_residual_on_logistic_1d(logistic_1d):
    box = DomainBox(2.0, 3.0)
    opt = optimal_value(logistic_1d, box)
    assert opt.converged
    assert box.is_interior(opt.params)
    assert pl_residual(opt.params, logistic_1d, box, opt.value) == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    pts = random_points(rng, 1000, d=1, U=box.U * 0.999, D=box.D * 0.999)
    res = np.array([pl_residual(w, logistic_1d, box, opt.value) for w in pts])
    assert res.min() >= -1e-9
    w = pts[0]
    full = pl_residual(w, logistic_1d, box, opt.value)
    smaller = pl_residual(w, logistic_1d, box, opt.value, mu_C=0.5 * moduli(box).mu_C)
    assert smaller > full


def test_pl_residual_rejects_boundary(logistic_1d):
    box = DomainBox(2.0, 3.0)
    with pytest.raises(DomainError):
        pl_residual(to_expectation(StandardParams([2.0], [1.0])), logistic_1d, box, 0.0)


def test_optimal_value_matches_linear_posterior():
    model = LikelihoodModel("linear", Dataset([[1.0]], [2.0]))
    opt = optimal_value(model, DomainBox(3.0, 4.0))
    sp = to_standard(opt.params)
    assert sp.mu[0] == pytest.approx(1.0, abs=1e-10) and sp.sigma2[0] == pytest.approx(0.5, abs=1e-10)
    exact = objective(to_expectation(StandardParams([1.0], [0.5])), model)
    assert opt.value == pytest.approx(exact, abs=1e-12)


# --- boundary assumption --------------------------------------------------------------------------


def test_assumption2_examples():
    assert assumption2_linear1d(1, 1, 1, 3)
    assert not assumption2_linear1d(1, 3, 1, 3)
    assert assumption2_linear1d(0, 0, 1, 2)


def test_boundary_sweep_agrees_with_linear_condition():
    ok = boundary_direction_sweep(LikelihoodModel("linear", Dataset([[1.0]], [1.0])), DomainBox(1.0, 3.0), 300)
    assert ok.fraction_ok == 1.0 and ok.worst < 0
    bad = boundary_direction_sweep(LikelihoodModel("linear", Dataset([[1.0]], [3.0])), DomainBox(1.0, 3.0), 300)
    assert bad.fraction_ok < 1.0


# --- descent audit --------------------------------------------------------------------------------


def test_descent_audit_linear_unit_step():
    model = LikelihoodModel("linear", Dataset([[1.0]], [2.0]))
    trace = run("proj_sngd", model, StandardParams([-2.0], [3.0]), StepSchedule.constant(1.0), T=10,
                box=DomainBox(3.0, 4.0))
    report = descent_audit(trace, L=1.0)
    assert report.passed and report.violations == []


def test_descent_audit_flags_poisson_sngd(poisson_point):
    trace = run("sngd", poisson_point, StandardParams([-1.5], [2.0]), StepSchedule.constant(0.3), T=5)
    report = descent_audit(trace)
    assert not report.passed
    assert report.violations[0][0] == 0
    assert report.implied_smoothness_exceeds == pytest.approx(1 / 0.3)


def test_descent_audit_logistic_certificate_step(logistic_1d):
    box = DomainBox(2.0, 3.0)
    beta = certify_relative_smoothness(logistic_1d, box).beta
    for mu0 in (-1.5, 0.0, 1.8):
        trace = run("proj_sngd", logistic_1d, StandardParams([mu0], [2.5]), StepSchedule.constant(1 / beta), T=100,
                    box=box)
        assert descent_audit(trace, L=beta).passed


def test_descent_audit_rejects_stochastic_trace(logistic_1d):
    trace = run("proj_sngd", logistic_1d, StandardParams([0.0], [1.0]), StepSchedule.constant(0.1), T=3,
                box=DomainBox(2.0, 3.0), estimator=EstimatorConfig(1, 2))
    with pytest.raises(ValueError):
        descent_audit(trace)


# --- coercivity and Stein bounds -----------------------------------------------------------------


def test_coercivity_examples(logistic_2d, poisson_point):
    assert coercivity_scan(LikelihoodModel("linear", Dataset([[1.0]], [1.0])), "sigma_to_zero").increasing_tail
    assert coercivity_scan(logistic_2d, "mu_ray", direction=[0.6, -0.8]).increasing_tail
    report = coercivity_scan(poisson_point, "sigma_to_inf")
    assert report.increasing_tail and report.values.shape == (20,)
    with pytest.raises(ValueError):
        coercivity_scan(poisson_point, "spiral")


@settings(max_examples=100)
@given(st.floats(-4, 4), st.floats(0.05, 20))
def test_stein_bound_logistic_1d(mu, s2):
    model = LikelihoodModel("logistic", Dataset([[1.0]], [1.0]))
    check = stein_bound_check(model, to_expectation(StandardParams([mu], [s2])), 0, 0)
    assert check.holds and check.rhs == pytest.approx(1 / s2)


def test_stein_bound_edge_cases(poisson_point, logistic_2d, rng):
    zero = LikelihoodModel("logistic", Dataset([[0.0]], [1.0]))
    check = stein_bound_check(zero, ExpectationParams([0.0], [1.0]), 0, 0)
    assert check.lhs == 0.0 and check.rhs == 0.0 and check.holds
    with pytest.raises(UnsupportedModelError):
        stein_bound_check(poisson_point, ExpectationParams([0.0], [1.0]), 0, 0)
    for w in random_points(rng, 100, d=2, U=2, D=4):
        for i in range(2):
            for j in range(2):
                assert stein_bound_check(logistic_2d, w, i, j).holds


def test_coercivity_scan_uses_unit_direction():
    model = LikelihoodModel("linear", Dataset([[1.0, 1.0]], [1.0]))
    report = coercivity_scan(model, "mu_ray")
    assert report.scale[0] == 1.0 and report.scale[-1] == pytest.approx(100.0)
    assert math.isfinite(report.values[-1])
