from __future__ import annotations

import numpy as np
import pytest

from uaro.nlp import (NlpConfig, NlpProblem, NlpStatus, fd_gradient, multistart, solve_nlp,
                      solve_nlp_in_basis)

METHODS = ["auglag", "slsqp"]


def box(lo, hi):
    return np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))


@pytest.mark.parametrize("method", METHODS)
def test_active_inequality(method):
    lo, hi = box(-2, 2)
    p = NlpProblem(1, lambda v: float((v[0] - 1) ** 2), lo, hi,
                   inequalities=lambda v: np.array([v[0] - 0.5]))
    r = solve_nlp(p, np.zeros(1), NlpConfig(method=method))
    assert r.status == NlpStatus.LOCAL_OPTIMUM
    assert r.point[0] == pytest.approx(0.5, abs=1e-6)
    assert r.objective_value == pytest.approx(0.25, abs=1e-6)
    assert r.max_inequality <= 1e-6


@pytest.mark.parametrize("method", METHODS)
def test_unconstrained_minimum(method):
    lo, hi = box(-1, 1)
    p = NlpProblem(1, lambda v: float(v[0] ** 2), lo, hi)
    r = solve_nlp(p, np.array([0.7]), NlpConfig(method=method))
    assert r.ok
    assert abs(r.point[0]) < 1e-6
    assert r.objective_value == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("method", METHODS)
def test_epigraph_of_two_numbers(method):
    lo, hi = box([0.3, -10], [0.3, 10])
    p = NlpProblem(2, lambda v: float(v[1]), lo, hi,
                   inequalities=lambda v: np.array([(v[0] - w) ** 2 - v[1] for w in (-1.0, 1.0)]))
    r = solve_nlp(p, np.array([0.3, 0.0]), NlpConfig(method=method))
    assert r.ok
    assert r.objective_value == pytest.approx(1.69, abs=1e-6)


def test_multistart_finds_box_corner():
    lo, hi = box(-1, 1)
    p = NlpProblem(1, lambda v: -float((0.5 - v[0]) ** 2), lo, hi)
    r = multistart(p, 8, seed=0)
    grid = np.linspace(-1, 1, 1001)
    best = grid[np.argmax((0.5 - grid) ** 2)]
    assert r.point[0] == pytest.approx(best, abs=1e-9)
    assert -r.objective_value == pytest.approx(2.25, abs=1e-9)


def test_multistart_toy_worst_case():
    lo, hi = box([-0.5, -0.5], [0.5, 0.5])
    p = NlpProblem(2, lambda w: -abs(w[0] + w[1]), lo, hi)
    r = multistart(p, 8, seed=1)
    assert -r.objective_value == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(np.abs(r.point), 0.5)


def test_multistart_single_start():
    lo, hi = box(-1, 1)
    p = NlpProblem(1, lambda v: float(v[0] ** 2), lo, hi)
    r = multistart(p, 1, seed=0, x0=np.zeros(1))
    assert r.objective_value == 0.0
    with pytest.raises(ValueError):
        multistart(p, 0)


def test_multistart_is_deterministic():
    lo, hi = box([-2, -2], [2, 2])
    p = NlpProblem(2, lambda v: float(np.sin(3 * v[0]) + (v[1] - 0.3) ** 2 + 0.1 * v[0] ** 2), lo, hi)
    a = multistart(p, 6, seed=4)
    b = multistart(p, 6, seed=4)
    np.testing.assert_array_equal(a.point, b.point)


def test_infeasible_problem_reports_infeasible():
    lo, hi = box(-1, 1)
    p = NlpProblem(1, lambda v: float(v[0]), lo, hi,
                   inequalities=lambda v: np.array([1.5 - v[0]]))
    for method in METHODS:
        r = solve_nlp(p, np.zeros(1), NlpConfig(method=method))
        assert r.status == NlpStatus.INFEASIBLE


def test_evaluation_error_on_nan():
    lo, hi = box(-1, 1)
    p = NlpProblem(1, lambda v: float("nan"), lo, hi)
    r = solve_nlp(p, np.zeros(1))
    assert r.status == NlpStatus.EVALUATION_ERROR


def test_start_shape_checked():
    lo, hi = box(-1, 1)
    with pytest.raises(ValueError):
        solve_nlp(NlpProblem(1, lambda v: 0.0, lo, hi), np.zeros(2))


def test_local_optimum_contract_on_random_qps():
    rng = np.random.default_rng(0)
    cfg = NlpConfig()
    for _ in range(20):
        c = rng.normal(size=3)
        a = rng.normal(size=3)
        lo, hi = box(-np.ones(3), np.ones(3))
        p = NlpProblem(3, lambda v, c=c: float(np.sum((v - c) ** 2)), lo, hi,
                       objective_grad=lambda v, c=c: 2 * (v - c),
                       inequalities=lambda v, a=a: np.array([a @ v - 0.2]),
                       inequalities_jac=lambda v, a=a: a[None, :])
        for method in METHODS:
            r = solve_nlp(p, np.zeros(3), NlpConfig(method=method))
            if r.status == NlpStatus.LOCAL_OPTIMUM:
                assert r.max_inequality <= cfg.feas_tol


def test_basis_change_preserves_solution():
    lo, hi = box([-2, -2], [2, 2])
    target = np.array([1.9, -0.4])
    p = NlpProblem(2, lambda v: float(np.sum((v - target) ** 2)), lo, hi,
                   inequalities=lambda v: np.array([v[0] + v[1] - 1.0]))
    T = np.array([[0.5, 0.05], [0.5, -0.05]])
    r = solve_nlp_in_basis(p, np.zeros(2), T, NlpConfig(method="slsqp"))
    direct = solve_nlp(p, np.zeros(2), NlpConfig(method="slsqp"))
    assert r.ok
    np.testing.assert_allclose(r.point, direct.point, atol=1e-5)
    assert np.all(r.point >= lo - 1e-12) and np.all(r.point <= hi + 1e-12)


def test_fd_gradient_matches_analytic():
    rng = np.random.default_rng(5)
    lo, hi = -np.ones(4), np.ones(4)
    f = lambda v: float(np.sum(np.sin(v) * v ** 2))
    g = lambda v: np.cos(v) * v ** 2 + 2 * v * np.sin(v)
    for _ in range(100):
        v = rng.uniform(-0.9, 0.9, 4)
        fd = fd_gradient(f, v, lo, hi)
        assert np.max(np.abs(fd - g(v))) / max(1.0, np.max(np.abs(g(v)))) < 1e-5
