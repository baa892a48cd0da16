import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs
from oracles import central_gradient
from scipy import stats as st

from conftest import make_data
from massive.errors import ApproximationError, HyperparameterError
from massive.likelihood import conditional_moments
from massive.manifold import ml_given_confounding
from massive.posterior import (
    GRAD_TOL,
    LOG_2PI,
    ManifoldChart,
    PosteriorProblem,
    empirical_hyperparams,
    grad_log_posterior,
    laplace_from_hessian,
    log_posterior,
    log_prior,
    model_evidence,
    solve_spike_ratio,
    spike_equation,
)
from massive.types import Hyperparams, ModelIndicator, ScaledParams


# -- hyperparameters ----------------------------------------------------------


@settings(max_examples=100)
@given(hs.integers(2, 10**7), hs.floats(1e-6, 50.0))
def test_spike_root_residual_and_above_one(n, a):
    c = solve_spike_ratio(n, a)
    assert c > 1
    # the best any double can do is about a * ulp(c) / 2
    assert abs(spike_equation(c, n, a)) <= 2 * a * math.ulp(c) + 1e-13


def test_spike_root_rejects_bad_coefficient():
    with pytest.raises(HyperparameterError):
        solve_spike_ratio(100, 0.0)


def test_equal_strengths_give_101_times_d2():
    # one instrument: D^2 is trivially the same for every candidate
    _, _, stats = make_data(n=2000, j=1, seed=4)
    cm = conditional_moments(stats)
    d2 = stats.sd_g[0] ** 2 * cm.rx[0] ** 2 / cm.var_x_g
    h = empirical_hyperparams(stats)
    assert h.sd_slab**2 == pytest.approx(101 * d2, rel=1e-14)
    h2 = empirical_hyperparams(stats, weak_factor="derived")
    assert h2.sd_slab**2 == pytest.approx(11 * d2, rel=1e-14)
    assert 0 < h.sd_spike < h.sd_slab


def test_unknown_weak_factor():
    _, _, stats = make_data(n=100, j=1)
    with pytest.raises(Exception):
        empirical_hyperparams(stats, weak_factor="bogus")


# -- prior and posterior -------------------------------------------------------


def test_log_prior_matches_scipy():
    h = Hyperparams(2.0, 0.1, var_weak=10.0)
    m = ModelIndicator.from_string("10")
    p = ScaledParams(np.array([0.3, -1.0]), np.array([0.5, 0.02]), 0.4, 1.0, -2.0, 1.5, -0.5)
    expected = (
        st.norm(0, 2.0).logpdf([0.3, -1.0]).sum()
        + st.norm(0, 2.0).logpdf(0.5)
        + st.norm(0, 0.1).logpdf(0.02)
        + st.norm(0, math.sqrt(10)).logpdf([0.4, 1.5, -0.5]).sum()
    )
    assert log_prior(p, m, h) == pytest.approx(expected, rel=1e-12)


def test_posterior_gradient(small_problem, rng):
    stats, h = small_problem.stats, small_problem.hyper
    for mask in range(4):
        m = ModelIndicator(3, mask)
        theta = rng.normal(scale=0.5, size=11)
        g = grad_log_posterior(stats, ScaledParams.from_vector(theta), m, h)
        fd = central_gradient(lambda t: log_posterior(stats, ScaledParams.from_vector(t), m, h), theta)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * np.max(np.abs(fd)))


@settings(max_examples=30, deadline=None)
@given(hs.lists(hs.floats(-2, 2), min_size=11, max_size=11), hs.integers(0, 7))
def test_log_posterior_sign_symmetry(values, mask):
    _, _, stats = make_data(n=200, j=3, seed=9)
    h = Hyperparams(1.0, 0.05)
    p = ScaledParams.from_vector(np.array(values))
    m = ModelIndicator(3, mask)
    a = log_posterior(stats, p, m, h)
    b = log_posterior(stats, p.flip_confounding(), m, h)
    assert b == pytest.approx(a, rel=1e-12, abs=1e-9)


def test_chart_pullback_is_chain_rule(small_problem, rng):
    chart = small_problem.chart
    obj = small_problem.objective(ModelIndicator(3, 5))
    psi = np.array([[0.05, -0.1, 0.02, 0.8, -0.4]])

    def f(x):
        val, _, _ = obj.profile(chart.to_phi(x[None, :]))
        return val[0]

    _, grad, _ = obj.profile(chart.to_phi(psi))
    pulled = chart.pullback(psi, grad[:, 6:])[0]
    fd = central_gradient(f, psi[0])
    np.testing.assert_allclose(pulled, fd, rtol=1e-5, atol=1e-6 * np.max(np.abs(fd)))


def test_chart_base_is_ml_manifold(small_problem):
    stats = small_problem.stats
    chart = ManifoldChart(conditional_moments(stats))
    phi = chart.to_phi(np.array([[0.0, 0.0, 0.0, 1.2, -0.7]]))[0]
    p = ml_given_confounding(stats, 1.2, -0.7)
    np.testing.assert_allclose(phi, p.to_vector()[-5:], rtol=1e-12)


def test_inner_solution_maximizes(small_problem, rng):
    obj = small_problem.objective(ModelIndicator(3, 2))
    phi = np.array([[0.3, 0.2, 0.1, 0.5, 0.5]])
    theta = obj.inner_solution(phi)
    _, g = obj.value_and_grad(theta)
    assert np.max(np.abs(g[0, :6])) < 1e-8 * max(1.0, small_problem.stats.n)


# -- optima and Laplace ----------------------------------------------------------


def test_local_optima_are_stationary_and_mirrored(small_problem):
    for m in ModelIndicator.enumerate(3):
        modes = small_problem.local_optima(m)
        assert 1 <= len(modes) <= 5
        obj = small_problem.objective(m)
        for mode in modes:
            _, g = obj.value_and_grad(mode.theta)
            assert np.max(np.abs(g)) < GRAD_TOL
            if np.linalg.norm(mode.gamma) > 1e-4:
                assert any(np.allclose(other.gamma, -mode.gamma) for other in modes)


def test_laplace_is_exact_for_gaussian():
    # a normalized Gaussian log density has evidence exactly 1
    d = 7
    cov = np.eye(d)
    cov[:2, :2] = [[2.0, 0.3], [0.3, 0.5]]
    prec = np.linalg.inv(cov)
    log_peak = -0.5 * (d * LOG_2PI + np.linalg.slogdet(cov)[1])
    comp = laplace_from_hessian(np.zeros(d), log_peak, prec)
    assert comp.log_mass == pytest.approx(0.0, abs=1e-12)
    assert comp.floored == 0
    np.testing.assert_allclose(comp.covariance, cov, atol=1e-12)


def test_laplace_floors_flat_directions():
    d = 7
    prec = np.diag([1.0] * (d - 1) + [0.0])
    comp = laplace_from_hessian(np.zeros(d), 0.0, prec)
    assert comp.floored == 1
    assert np.all(np.linalg.eigvalsh(comp.hessian) > 0)


def test_laplace_rejects_nonstationary(small_problem):
    p = ml_given_confounding(small_problem.stats, 2.0, 2.0)
    with pytest.raises(ApproximationError):
        small_problem.laplace(ModelIndicator(3, 0), p.to_vector())


def test_evidence_symmetry_and_functional_api(small_problem):
    m = ModelIndicator(3, 1)
    ev = small_problem.evidence(m)
    again = model_evidence(small_problem.stats, m, small_problem.hyper)
    assert again.log_evidence == pytest.approx(ev.log_evidence, rel=1e-12)
    for c in ev.components:
        flipped = small_problem.laplace(m, c.mode.flip_confounding().to_vector())
        assert flipped.log_mass == pytest.approx(c.log_mass, abs=1e-9)


def test_profile_grid_symmetric_and_bounded(small_problem):
    m = ModelIndicator(3, 0)
    axis = np.linspace(-2, 2, 5)
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), -1)
    vals = small_problem.profile_grid(m, grid)
    assert vals.shape == (5, 5)
    np.testing.assert_allclose(vals, vals[::-1, ::-1], rtol=1e-10)
    best = max(mode.log_post for mode in small_problem.local_optima(m))
    assert np.nanmax(vals) <= best + 1e-6


def test_profile_grid_rejects_bad_shape(small_problem):
    with pytest.raises(Exception):
        small_problem.profile_grid(ModelIndicator(3, 0), np.zeros((3, 3)))
