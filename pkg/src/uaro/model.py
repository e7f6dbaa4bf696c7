"""System models: dynamics, path/terminal constraints, cost and uncertainty boxes.

All model callables broadcast over leading batch dimensions so that scenario
trees and oracle grids can be propagated in one vectorised call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray


class ModelEvaluationError(RuntimeError):
    """A model callback produced a non-finite value."""

    def __init__(self, what: str, k: Optional[int] = None):
        self.k = k
        where = "" if k is None else f" at k={k}"
        super().__init__(f"non-finite {what}{where}")


@dataclass(frozen=True)
class SystemModel:
    """Discrete-time system with explicit transition ``x[k+1] = step(k, x, u, w)``.

    ``path_constraint(k, x)`` applies to the state after each step, k in 1..N.
    ``terminal_constraint(x)`` adds rows at k = N only.  Residuals are
    satisfied when nonpositive.  ``cost`` maps batched full trajectories
    ``(states (...,N+1,nx), controls (...,N,nu), disturbances (...,N,nw))`` to
    a batch of scalars.

    ``control_basis`` is an optional invertible ``(n_u, n_u)`` matrix ``M``;
    optimisers then work in coordinates ``z`` with ``u = M z``, which helps
    when controls act through badly scaled combinations.
    """

    name: str
    N: int
    n_x: int
    n_u: int
    n_w: int
    dynamics: Callable[[int, Array, Array, Array], Array]
    dynamics_jac: Callable[[int, Array, Array, Array], tuple[Array, Array, Array]]
    cost: Callable[[Array, Array, Array], Array]
    cost_grad: Callable[[Array, Array, Array], tuple[Array, Array]]
    u_lower: Array
    u_upper: Array
    w_lower: Array
    w_upper: Array
    x0: Array
    path_constraint: Optional[Callable[[int, Array], Array]] = None
    path_constraint_jac: Optional[Callable[[int, Array], Array]] = None
    n_path: int = 0
    terminal_constraint: Optional[Callable[[Array], Array]] = None
    terminal_constraint_jac: Optional[Callable[[Array], Array]] = None
    n_terminal: int = 0
    cost_bound: float = 1e3
    u_guess: Optional[Array] = None
    control_basis: Optional[Array] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for lo, hi, label in ((self.u_lower, self.u_upper, "control"),
                              (self.w_lower, self.w_upper, "disturbance")):
            lo, hi = np.asarray(lo, float), np.asarray(hi, float)
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                raise ValueError(f"{label} box must be bounded")
            if np.any(lo > hi):
                raise ValueError(f"{label} box is empty")
        if self.N < 1:
            raise ValueError("horizon N must be at least 1")

    # -- constraint bookkeeping -------------------------------------------
    def n_rows(self, k: int) -> int:
        """Number of constraint rows attached to the state at index k."""
        if k < 1 or k > self.N:
            return 0
        return self.n_path + (self.n_terminal if k == self.N else 0)

    def constraint_rows(self, k: int, x: Array) -> Array:
        x = np.asarray(x, float)
        parts = []
        if self.n_path:
            parts.append(self.path_constraint(k, x))
        if k == self.N and self.n_terminal:
            parts.append(self.terminal_constraint(x))
        if not parts:
            return np.zeros(x.shape[:-1] + (0,))
        return np.concatenate(parts, axis=-1)

    def constraint_rows_jac(self, k: int, x: Array) -> Array:
        x = np.asarray(x, float)
        parts = []
        if self.n_path:
            parts.append(self.path_constraint_jac(k, x))
        if k == self.N and self.n_terminal:
            parts.append(self.terminal_constraint_jac(x))
        if not parts:
            return np.zeros(x.shape[:-1] + (0, self.n_x))
        return np.concatenate(parts, axis=-2)

    def with_disturbance_box(self, lower, upper) -> "SystemModel":
        from dataclasses import replace
        return replace(self, w_lower=np.asarray(lower, float),
                       w_upper=np.asarray(upper, float))

    @property
    def w_center(self) -> Array:
        return 0.5 * (self.w_lower + self.w_upper)

    @property
    def initial_control(self) -> Array:
        if self.u_guess is not None:
            return np.asarray(self.u_guess, float)
        return 0.5 * (self.u_lower + self.u_upper)


@dataclass(frozen=True)
class Trajectory:
    states: Array
    controls: Array
    disturbances: Array


@dataclass(frozen=True)
class History:
    """Realised information up to time k: x_0..x_k, u_0..u_{k-1}, w_0..w_{k-1}."""

    states: Array
    controls: Array
    disturbances: Array

    def __post_init__(self):
        k = len(self.controls)
        if len(self.states) != k + 1 or len(self.disturbances) != k:
            raise ValueError("history lengths inconsistent: need k+1 states, "
                             "k controls, k disturbances")

    @classmethod
    def initial(cls, model: SystemModel) -> "History":
        return cls(np.asarray(model.x0, float).reshape(1, model.n_x),
                   np.zeros((0, model.n_u)), np.zeros((0, model.n_w)))

    @property
    def level(self) -> int:
        return len(self.controls)

    @property
    def state(self) -> Array:
        return self.states[-1]

    def extend(self, x_next, u, w) -> "History":
        return History(np.vstack([self.states, np.reshape(x_next, (1, -1))]),
                       np.vstack([self.controls, np.reshape(u, (1, -1))]),
                       np.vstack([self.disturbances, np.reshape(w, (1, -1))]))

    def key(self, decimals: int = 9) -> bytes:
        parts = [np.round(a, decimals) + 0.0 for a in
                 (self.states, self.controls, self.disturbances)]
        return b"|".join(p.tobytes() for p in parts)


def _check_finite(value, what: str, k: Optional[int] = None):
    if not np.all(np.isfinite(value)):
        raise ModelEvaluationError(what, k)
    return value


def _in_box(v, lo, hi, tol=1e-9) -> bool:
    v = np.asarray(v, float)
    return bool(np.all(v >= lo - tol) and np.all(v <= hi + tol))


def step(model: SystemModel, k: int, x, u, w) -> Array:
    """Successor state of ``x`` under control ``u`` and disturbance ``w``."""
    if not 0 <= k < model.N:
        raise ValueError(f"time index {k} outside 0..{model.N - 1}")
    if not _in_box(u, model.u_lower, model.u_upper):
        raise ValueError(f"control {u} outside control box")
    if not _in_box(w, model.w_lower, model.w_upper):
        raise ValueError(f"disturbance {w} outside disturbance box")
    x_next = model.dynamics(k, np.asarray(x, float), np.asarray(u, float),
                            np.asarray(w, float))
    return _check_finite(x_next, "state", k)


def rollout(model: SystemModel, controls, disturbances, x0=None) -> Trajectory:
    controls = np.asarray(controls, float).reshape(model.N, model.n_u)
    disturbances = np.asarray(disturbances, float).reshape(model.N, model.n_w)
    states = np.empty((model.N + 1, model.n_x))
    states[0] = model.x0 if x0 is None else x0
    for k in range(model.N):
        states[k + 1] = step(model, k, states[k], controls[k], disturbances[k])
    return Trajectory(states, controls, disturbances)


def eval_constraints(model: SystemModel, traj: Trajectory) -> list[Array]:
    """Residual vectors for k = 1..N (entry i belongs to state index i+1)."""
    out = []
    for k in range(1, model.N + 1):
        rows = model.constraint_rows(k, traj.states[k])
        out.append(_check_finite(rows, "constraint", k))
    return out


def eval_cost(model: SystemModel, traj: Trajectory) -> float:
    value = model.cost(traj.states, traj.controls, traj.disturbances)
    return float(_check_finite(value, "cost"))


# ---------------------------------------------------------------------------
# Planar quadrotor
# ---------------------------------------------------------------------------

QUAD_MASS = 0.15
QUAD_INERTIA = 0.00125
QUAD_ARM = 0.1
GRAVITY = 9.81
QUAD_TS = 0.5


def _quad_rhs(x, u, w, p):
    m, inertia, arm, g = p
    psi = x[..., 4]
    thrust = u[..., 0] + u[..., 1]
    return np.stack([
        x[..., 1],
        np.sin(psi) * thrust / m,
        x[..., 3],
        np.cos(psi) * thrust / m - g,
        x[..., 5],
        (arm * (u[..., 0] - u[..., 1]) + w[..., 0]) / inertia,
    ], axis=-1)


def _quad_rhs_jac(x, u, p):
    m, inertia, arm, _ = p
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    psi = np.broadcast_to(x[..., 4], batch)
    thrust = np.broadcast_to(u[..., 0] + u[..., 1], batch)
    A = np.zeros(batch + (6, 6))
    A[..., 0, 1] = 1.0
    A[..., 1, 4] = np.cos(psi) * thrust / m
    A[..., 2, 3] = 1.0
    A[..., 3, 4] = -np.sin(psi) * thrust / m
    A[..., 4, 5] = 1.0
    B = np.zeros(batch + (6, 2))
    B[..., 1, :] = (np.sin(psi) / m)[..., None]
    B[..., 3, :] = (np.cos(psi) / m)[..., None]
    B[..., 5, 0] = arm / inertia
    B[..., 5, 1] = -arm / inertia
    E = np.zeros(batch + (6, 1))
    E[..., 5, 0] = 1.0 / inertia
    return A, B, E


def build_quadrotor(c: float, wmax: float, horizon: int = 5,
                    ts: float = QUAD_TS) -> SystemModel:
    """Planar quadrotor with explicit-midpoint discretisation.

    State ``[r, r_dot, s, s_dot, psi, psi_dot]``, controls are the two motor
    thrusts in [-2, 2], the disturbance is a torque in [-wmax, wmax].
    Constraint rows at every k in 1..N are ``[r - c, -r - c, -s]`` and the
    cost is the negated final height.
    """
    if not c > 0:
        raise ValueError("corridor half-width c must be positive")
    if wmax < 0:
        raise ValueError("wmax must be nonnegative")
    p = (QUAD_MASS, QUAD_INERTIA, QUAD_ARM, GRAVITY)
    h = float(ts)
    N = int(horizon)

    def dynamics(k, x, u, w):
        xm = x + 0.5 * h * _quad_rhs(x, u, w, p)
        return x + h * _quad_rhs(xm, u, w, p)

    def dynamics_jac(k, x, u, w):
        f0 = _quad_rhs(x, u, w, p)
        xm = x + 0.5 * h * f0
        A0, B0, E0 = _quad_rhs_jac(x, u, p)
        Am, Bm, Em = _quad_rhs_jac(xm, u, p)
        eye = np.eye(6)
        A = eye + h * Am @ (eye + 0.5 * h * A0)
        B = h * (Am @ (0.5 * h * B0) + Bm)
        E = h * (Am @ (0.5 * h * E0) + Em)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], w.shape[:-1])
        return (np.broadcast_to(A, batch + (6, 6)),
                np.broadcast_to(B, batch + (6, 2)),
                np.broadcast_to(E, batch + (6, 1)))

    def path_constraint(k, x):
        return np.stack([x[..., 0] - c, -x[..., 0] - c, -x[..., 2]], axis=-1)

    G = np.zeros((3, 6))
    G[0, 0], G[1, 0], G[2, 2] = 1.0, -1.0, -1.0

    def path_constraint_jac(k, x):
        return np.broadcast_to(G, x.shape[:-1] + (3, 6))

    def cost(states, controls, disturbances):
        return -states[..., N, 2]

    def cost_grad(states, controls, disturbances):
        ds = np.zeros_like(states)
        ds[..., N, 2] = -1.0
        return ds, np.zeros_like(controls)

    return SystemModel(
        name="quadrotor", N=N, n_x=6, n_u=2, n_w=1,
        dynamics=dynamics, dynamics_jac=dynamics_jac,
        cost=cost, cost_grad=cost_grad,
        u_lower=np.full(2, -2.0), u_upper=np.full(2, 2.0),
        w_lower=np.array([-float(wmax)]), w_upper=np.array([float(wmax)]),
        x0=np.zeros(6),
        path_constraint=path_constraint, path_constraint_jac=path_constraint_jac,
        n_path=3, cost_bound=1e3,
        # total thrust and torque-scaled differential thrust
        control_basis=np.array([[0.5, 0.5 * QUAD_INERTIA / QUAD_ARM],
                                [0.5, -0.5 * QUAD_INERTIA / QUAD_ARM]]),
        params={"c": float(c), "wmax": float(wmax), "ts": h, "m": QUAD_MASS,
                "I": QUAD_INERTIA, "l": QUAD_ARM, "b": GRAVITY},
    )


# ---------------------------------------------------------------------------
# Scalar toy systems with brute-force ground truth
# ---------------------------------------------------------------------------

def _integrator(k, x, u, w):
    return x + u + w


def _integrator_jac(k, x, u, w):
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], w.shape[:-1])
    one = np.ones(batch + (1, 1))
    return one, one, one


def _final_square(N):
    def cost(states, controls, disturbances):
        return states[..., N, 0] ** 2

    def cost_grad(states, controls, disturbances):
        ds = np.zeros_like(states)
        ds[..., N, 0] = 2.0 * states[..., N, 0]
        return ds, np.zeros_like(controls)

    return cost, cost_grad


def _abs_bound_rows(limit):
    def rows(*args):
        x = args[-1]
        return np.stack([x[..., 0] - limit, -x[..., 0] - limit], axis=-1)

    J = np.array([[1.0], [-1.0]])

    def jac(*args):
        x = args[-1]
        return np.broadcast_to(J, x.shape[:-1] + (2, 1))

    return rows, jac


def build_toy_integrator(horizon: int = 2, wmax: float = 0.5,
                         xmax: float = 2.0) -> SystemModel:
    """x+ = x + u + w, U = [-1, 1], W = [-wmax, wmax], |x_k| <= xmax, J = x_N^2."""
    cost, cost_grad = _final_square(horizon)
    rows, jac = _abs_bound_rows(xmax)
    return SystemModel(
        name="toy-integrator", N=int(horizon), n_x=1, n_u=1, n_w=1,
        dynamics=_integrator, dynamics_jac=_integrator_jac,
        cost=cost, cost_grad=cost_grad,
        u_lower=np.array([-1.0]), u_upper=np.array([1.0]),
        w_lower=np.array([-float(wmax)]), w_upper=np.array([float(wmax)]),
        x0=np.zeros(1), path_constraint=rows, path_constraint_jac=jac,
        n_path=2, cost_bound=100.0,
        params={"wmax": float(wmax), "xmax": float(xmax)},
    )


def build_toy_feas(wmax: float = 0.3, terminal: float = 0.4) -> SystemModel:
    """Integrator with N = 2 and only the terminal constraint |x_2| <= 0.4.

    Open-loop robust control is infeasible here while a re-decided second
    input keeps the terminal state within bounds.
    """
    cost, cost_grad = _final_square(2)
    rows, jac = _abs_bound_rows(terminal)
    return SystemModel(
        name="toy-feas", N=2, n_x=1, n_u=1, n_w=1,
        dynamics=_integrator, dynamics_jac=_integrator_jac,
        cost=cost, cost_grad=cost_grad,
        u_lower=np.array([-1.0]), u_upper=np.array([1.0]),
        w_lower=np.array([-float(wmax)]), w_upper=np.array([float(wmax)]),
        x0=np.zeros(1), terminal_constraint=rows, terminal_constraint_jac=jac,
        n_terminal=2, cost_bound=100.0,
        params={"wmax": float(wmax), "terminal": float(terminal)},
    )
