from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uaro.model import History, build_quadrotor, build_toy_feas, build_toy_integrator
from uaro.sip import (ScenarioSet, SipConfig, SipProblem, SipStatus, certify, max_violation,
                      robust_rollout_problem, scenario_candidates, solve_open_loop, solve_sip)


def centre_problem():
    return SipProblem(np.array([-1.0, -10.0]), np.array([1.0, 10.0]), lambda v: float(v[1]),
                      np.array([-1.0]), np.array([1.0]),
                      lambda v, w: np.array([(v[0] - w[0]) ** 2 - v[1]]), 1)


def test_symmetric_problem_converges_to_centre():
    sol = solve_sip(centre_problem(), [], SipConfig())
    assert sol.status == SipStatus.CONVERGED
    assert sol.decision[0] == pytest.approx(0.0, abs=1e-5)
    assert sol.objective_value == pytest.approx(1.0, abs=1e-5)
    assert len(sol.scenarios) <= 2


def test_max_violation_examples():
    p = centre_problem()
    w, v = max_violation(p, np.array([0.5, 1.0]))
    assert w[0] == pytest.approx(-1.0)
    assert v == pytest.approx(1.25, abs=1e-9)
    w, v = max_violation(p, np.array([0.0, 1.0]))
    assert v == pytest.approx(0.0, abs=1e-12)
    assert abs(w[0]) == pytest.approx(1.0)


def test_toy_integrator_open_loop():
    m = build_toy_integrator()
    sol = solve_open_loop(m, History.initial(m))
    assert sol.status == SipStatus.CONVERGED
    assert sol.objective_value == pytest.approx(1.0, abs=1e-4)
    assert sol.decision[0] + sol.decision[1] == pytest.approx(0.0, abs=1e-3)


def test_toy_feas_open_loop_infeasible():
    m = build_toy_feas()
    sol = solve_open_loop(m, History.initial(m))
    assert sol.status == SipStatus.INFEASIBLE


def test_toy_feas_witness():
    m = build_toy_feas()
    p = robust_rollout_problem(m, History.initial(m), include_cost=False)
    w, v = max_violation(p, np.zeros(2))
    assert v == pytest.approx(0.2, abs=1e-12)
    assert np.allclose(np.abs(w), 0.3) and w[0] * w[1] > 0
    cert = certify(p, np.zeros(2))
    assert not cert.certified
    np.testing.assert_allclose(np.abs(cert.witness), [0.3, 0.3])
    assert "local" in cert.note


def test_toy_integrator_certified():
    m = build_toy_integrator()
    p = robust_rollout_problem(m, History.initial(m), include_cost=False)
    cert = certify(p, np.zeros(2))
    assert cert.certified and cert.witness is None
    assert cert.violation == pytest.approx(-1.0)


def test_quadrotor_hover_not_robustly_feasible():
    # a constant vertex torque spins the vehicle far outside the corridor
    m = build_quadrotor(1.0, 0.001)
    p = robust_rollout_problem(m, History.initial(m), include_cost=False)
    cert = certify(p, np.full(10, 0.73575))
    assert not cert.certified
    assert cert.violation > 1.0


def test_quadrotor_hover_certified_without_disturbance():
    m = build_quadrotor(1.0, 0.0)
    p = robust_rollout_problem(m, History.initial(m), include_cost=False)
    assert certify(p, np.full(10, 0.73575)).certified


def test_master_values_nondecreasing_and_sound():
    for m in (build_toy_integrator(), build_quadrotor(1.0, 0.001, horizon=3)):
        sol = solve_open_loop(m, History.initial(m))
        assert sol.status == SipStatus.CONVERGED
        vals = np.array(sol.master_values)
        assert np.all(np.diff(vals) >= -1e-6)
        p = robust_rollout_problem(m, History.initial(m))
        rng = np.random.default_rng(11)
        W = rng.uniform(p.scenario_lower, p.scenario_upper, size=(10_000, p.scenario_dim))
        rows = p.rows_at(sol.decision, W)
        assert rows.max() <= SipConfig().sip_tol + 1e-8


def test_appended_scenarios_were_violated():
    p = centre_problem()
    cfg = SipConfig()
    sol = solve_sip(p, [], cfg)
    # replay: each added scenario must violate the master iterate before it
    scen = list(sol.scenarios)
    for i in range(1, len(scen)):
        partial = solve_sip(p, scen[:i], SipConfig(max_outer=1))
        assert p.constraint(partial.decision, scen[i]).max() > cfg.sip_tol


def test_scenario_set_rejects_duplicates():
    s = ScenarioSet()
    assert s.add([0.1, 0.2])
    assert not s.add([0.1 + 5e-10, 0.2])
    assert s.add([0.1 + 1e-6, 0.2])
    assert len(s) == 2
    assert s.as_array().shape == (2, 2)


def test_candidates_include_vertices():
    rng = np.random.default_rng(0)
    c = scenario_candidates([-1, -1], [1, 1], 3, 6, rng)
    for v in ([-1, -1], [-1, 1], [1, -1], [1, 1]):
        assert any(np.allclose(row, v) for row in c)


@pytest.mark.parametrize("make,h", [
    (lambda: build_quadrotor(1.0, 0.001), 0),
    (lambda: build_quadrotor(1.0, 0.01, horizon=4), 1),
    (build_toy_integrator, 0),
    (build_toy_feas, 1),
])
def test_rollout_problem_jacobians(make, h):
    m = make()
    hist = History.initial(m)
    rng = np.random.default_rng(7)
    for _ in range(h):
        u = rng.uniform(m.u_lower, m.u_upper)
        w = rng.uniform(m.w_lower, m.w_upper)
        hist = hist.extend(m.dynamics(hist.level, hist.state, u, w), u, w)
    p = robust_rollout_problem(m, hist)
    for _ in range(100):
        v = rng.uniform(p.decision_lower, p.decision_upper)
        w = rng.uniform(p.scenario_lower, p.scenario_upper)
        Jv, Jw = p.constraint_jac_v(v, w), p.constraint_jac_w(v, w)
        for J, base, which in ((Jv, v, "v"), (Jw, w, "w")):
            fd = np.empty_like(J)
            for i in range(len(base)):
                # torque enters through 1/I, so curvature in w is large
                step = 1e-8 if which == "w" else 1e-6 * max(1.0, abs(base[i]))
                e = np.zeros(len(base))
                e[i] = step
                if which == "v":
                    fd[:, i] = (p.constraint(v + e, w) - p.constraint(v - e, w)) / (2 * step)
                else:
                    fd[:, i] = (p.constraint(v, w + e) - p.constraint(v, w - e)) / (2 * step)
            scale = max(1.0, float(np.max(np.abs(J))))
            assert np.max(np.abs(J - fd)) / scale < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.floats(-1, 1), st.floats(0, 3))
def test_max_violation_dominates_random_scenarios(v0, g):
    p = centre_problem()
    _, worst = max_violation(p, np.array([v0, g]))
    W = np.linspace(-1, 1, 201)[:, None]
    assert worst >= p.rows_at(np.array([v0, g]), W).max() - 1e-9
