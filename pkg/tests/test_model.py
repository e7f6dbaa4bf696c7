from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uaro.model import (ModelEvaluationError, History, build_quadrotor, build_toy_feas,
                        build_toy_integrator, eval_constraints, eval_cost, rollout, step)

HOVER = 0.15 * 9.81 / 2


@pytest.fixture(scope="module")
def quad():
    return build_quadrotor(1.0, 0.001)


def test_hover_is_fixed_point(quad):
    for k in range(quad.N):
        x = step(quad, k, np.zeros(6), np.array([HOVER, HOVER]), np.zeros(1))
        assert np.all(np.abs(x) < 1e-14)
    assert HOVER == pytest.approx(0.73575, abs=1e-12)


def test_full_thrust_single_step(quad):
    x = step(quad, 0, np.zeros(6), np.array([2.0, 2.0]), np.zeros(1))
    a = 4 / 0.15 - 9.81
    assert x[2] == pytest.approx(0.5 * a * 0.25, abs=1e-12)
    assert x[3] == pytest.approx(a * 0.5, abs=1e-12)
    assert x[2] == pytest.approx(2.1071, abs=1e-4)
    assert x[3] == pytest.approx(8.4285, abs=1e-3)


def test_differential_thrust_angular_channel(quad):
    x = step(quad, 0, np.zeros(6), np.array([2.0, 0.0]), np.zeros(1))
    assert x[5] == pytest.approx(80.0, abs=1e-9)
    assert x[4] == pytest.approx(20.0, abs=1e-9)


def test_full_thrust_rollout_height(quad):
    tr = rollout(quad, np.full((5, 2), 2.0), np.zeros(5))
    a = 4 / 0.15 - 9.81
    for k in range(6):
        t = 0.5 * k
        assert tr.states[k, 2] == pytest.approx(0.5 * a * t * t, abs=1e-10)
        assert tr.states[k, 3] == pytest.approx(a * t, abs=1e-10)
    assert tr.states[5, 2] == pytest.approx(52.68, abs=5e-3)
    assert eval_cost(quad, tr) == pytest.approx(-tr.states[5, 2])


def test_hover_rollout_and_residuals(quad):
    tr = rollout(quad, np.full((5, 2), HOVER), np.zeros(5))
    assert np.all(tr.states == 0)
    res = eval_constraints(quad, tr)
    assert len(res) == 5
    for r in res:
        np.testing.assert_array_equal(r, [-1.0, -1.0, -0.0])


def test_residual_ordering(quad):
    x = np.zeros(6)
    x[0] = 1.2
    np.testing.assert_allclose(quad.constraint_rows(3, x), [0.2, -2.2, 0.0], atol=1e-15)


def test_quadrotor_rejects_bad_parameters():
    with pytest.raises(ValueError):
        build_quadrotor(0.0, 0.001)
    with pytest.raises(ValueError):
        build_quadrotor(1.0, -1.0)


def test_quadrotor_dimensions(quad):
    assert (quad.N, quad.n_x, quad.n_u, quad.n_w) == (5, 6, 2, 1)
    np.testing.assert_array_equal(quad.u_lower, [-2, -2])
    np.testing.assert_array_equal(quad.w_upper, [0.001])


def test_toy_rollouts():
    ti = build_toy_integrator()
    tr = rollout(ti, [1, -1], [0.5, -0.5])
    np.testing.assert_allclose(tr.states[:, 0], [0, 1.5, 0])
    tr = rollout(ti, [0, 0], [0.5, 0.5])
    assert tr.states[2, 0] == pytest.approx(1.0)
    assert eval_cost(ti, tr) == pytest.approx(1.0)
    tr = rollout(ti, [1, -1], [0, 0])
    np.testing.assert_allclose(tr.states[:, 0], [0, 1, 0])
    assert eval_cost(ti, tr) == 0.0
    tf = build_toy_feas()
    tr = rollout(tf, [0, 0], [0.3, 0.3])
    assert tr.states[2, 0] == pytest.approx(0.6)
    assert max(eval_constraints(tf, tr)[-1]) == pytest.approx(0.2)


def test_toy_feas_terminal_violation():
    tf = build_toy_feas()
    rows = tf.constraint_rows(2, np.array([0.41]))
    assert max(rows) == pytest.approx(0.01)


def test_toy_cost_values():
    ti = build_toy_integrator()
    tr = rollout(ti, [0.5, 0.0], [0.0, 0.0])
    assert eval_cost(ti, tr) == pytest.approx(0.25)


def test_step_domain_errors(quad):
    with pytest.raises(ValueError):
        step(quad, 5, np.zeros(6), np.zeros(2), np.zeros(1))
    with pytest.raises(ValueError):
        step(quad, 0, np.zeros(6), np.array([3.0, 0.0]), np.zeros(1))
    with pytest.raises(ValueError):
        step(quad, 0, np.zeros(6), np.zeros(2), np.array([0.1]))


def test_non_finite_state_is_reported(quad):
    with pytest.raises(ModelEvaluationError) as err:
        step(quad, 2, np.full(6, np.nan), np.zeros(2), np.zeros(1))
    assert "2" in str(err.value)


def test_history_bookkeeping():
    ti = build_toy_integrator()
    h = History.initial(ti)
    assert h.level == 0
    h = h.extend(np.array([0.5]), np.array([0.0]), np.array([0.5]))
    assert h.level == 1
    assert h.state[0] == 0.5
    assert h.key() != History.initial(ti).key()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=10, max_size=10),
       st.lists(st.floats(-0.001, 0.001), min_size=5, max_size=5))
def test_rollout_composition(u, w):
    quad = build_quadrotor(1.0, 0.001)
    U, W = np.reshape(u, (5, 2)), np.reshape(w, (5, 1))
    tr = rollout(quad, U, W)
    for k in range(5):
        np.testing.assert_array_equal(tr.states[k + 1], step(quad, k, tr.states[k], U[k], W[k]))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6),
       st.floats(-2, 2), st.floats(-2, 2), st.floats(-0.001, 0.001))
def test_angular_channel_is_affine(x, u1, u2, w):
    quad = build_quadrotor(1.0, 0.001)
    x = np.asarray(x)
    base = quad.dynamics(0, x, np.array([u1, u2]), np.array([w]))[4:]
    h = 1e-4
    du = quad.dynamics(0, x, np.array([u1 + h, u2]), np.array([w]))[4:] - base
    dw = quad.dynamics(0, x, np.array([u1, u2]), np.array([w + 1e-5]))[4:] - base
    # slopes are the constant discrete-time gains
    np.testing.assert_allclose(du / h, [0.5 * 0.25 * 0.1 / 0.00125, 0.5 * 0.1 / 0.00125], rtol=1e-9)
    np.testing.assert_allclose(dw / 1e-5, [0.5 * 0.25 / 0.00125, 0.5 / 0.00125], rtol=1e-6)


@pytest.mark.parametrize("builder", [lambda: build_quadrotor(1.0, 0.001), build_toy_integrator,
                                     build_toy_feas])
def test_dynamics_jacobian_matches_finite_differences(builder):
    m = builder()
    rng = np.random.default_rng(3)
    for _ in range(100):
        x = rng.uniform(-1, 1, m.n_x)
        u = rng.uniform(m.u_lower, m.u_upper)
        w = rng.uniform(m.w_lower, m.w_upper)
        A, B, E = m.dynamics_jac(0, x, u, w)
        for J, base, arg in ((A, x, 0), (B, u, 1), (E, w, 2)):
            fd = np.empty_like(J)
            for i in range(len(base)):
                e = np.zeros(len(base))
                e[i] = 1e-6
                args_p = [x, u, w]
                args_m = [x, u, w]
                args_p[arg] = base + e
                args_m[arg] = base - e
                fd[:, i] = (m.dynamics(0, *args_p) - m.dynamics(0, *args_m)) / 2e-6
            scale = max(1.0, np.max(np.abs(J)))
            assert np.max(np.abs(J - fd)) / scale < 1e-5
