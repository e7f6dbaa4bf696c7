"""Brute-force min-max values on control/disturbance grids.

Every control and disturbance sequence on the grids is rolled out in one
vectorised pass; the resulting cost tensor (``+inf`` where any constraint
row is violated) is then reduced in the right quantifier order:

* closed loop: ``min_{u0} max_{w0} min_{u1} ... max_{w_{N-1}} J``
* open loop:   ``min_{u0..u_{N-1}} max_{w0..w_{N-1}} J``

Only meant for the scalar toy systems; the search space grows as
``(n_u_grid * n_w_grid) ** N``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import History, SystemModel

FEAS_TOL = 1e-9


class OracleBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    control_points: int = 41
    disturbance_points: int = 5
    state_decimals: int = 9
    node_budget: int = 10_000_000

    def __post_init__(self):
        if self.control_points < 2 or self.disturbance_points < 2:
            raise ValueError("grids need at least two points per dimension (the vertices)")


def box_grid(lower, upper, points: int) -> np.ndarray:
    """Tensor grid over a box; each axis is ``linspace`` so vertices are included."""
    axes = [np.array([lo]) if lo == hi else np.linspace(lo, hi, points)
            for lo, hi in zip(np.asarray(lower, float), np.asarray(upper, float))]
    return np.array(list(itertools.product(*axes)), float)


@dataclass
class ClosedLoopResult:
    value: float
    controls: np.ndarray
    first_step_values: np.ndarray

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.value)

    def optimal_controls(self, tol: float = 1e-9) -> np.ndarray:
        return self.controls[self.first_step_values <= self.value + tol]

    def feasible_controls(self) -> np.ndarray:
        return self.controls[np.isfinite(self.first_step_values)]


def _tensor(model: SystemModel, history: History, grid: GridSpec, first=None):
    """Cost tensor with axes ``(u_k, w_k, u_{k+1}, w_{k+1}, ...)``."""
    k0 = history.level
    steps = model.N - k0
    U = box_grid(model.u_lower, model.u_upper, grid.control_points)
    W = box_grid(model.w_lower, model.w_upper, grid.disturbance_points)
    U0 = U if first is None else np.atleast_2d(np.asarray(first, float))
    size = len(U0) * len(W) * (len(U) * len(W)) ** (steps - 1)
    if size > grid.node_budget:
        raise OracleBudgetExceeded(f"{size} leaves exceed the node budget {grid.node_budget}")
    x = history.state
    states, controls, dists = [], [], []
    feas = np.ones((), bool)
    shape: tuple = ()
    for j in range(steps):
        Uj = U0 if j == 0 else U
        nd = len(shape)
        xe = x.reshape(shape + (1, 1, model.n_x))
        ue = Uj.reshape((1,) * nd + (len(Uj), 1, model.n_u))
        we = W.reshape((1,) * nd + (1, len(W), model.n_w))
        shape = shape + (len(Uj), len(W))
        x = np.broadcast_to(model.dynamics(k0 + j, xe, ue, we), shape + (model.n_x,))
        rows = model.constraint_rows(k0 + j + 1, x)
        ok = np.all(rows <= FEAS_TOL, axis=-1) if rows.shape[-1] else np.ones(shape, bool)
        feas = feas[..., None, None] & ok
        states.append(x)
        controls.append(ue)
        dists.append(we)
    full = shape

    def expand(a):
        a = a.reshape(a.shape[:-1] + (1,) * (len(full) - (a.ndim - 1)) + a.shape[-1:])
        return np.broadcast_to(a, full + a.shape[-1:])

    S = np.stack([expand(h[None]) for h in history.states] + [expand(s) for s in states], axis=-2)
    C = np.stack([expand(h[None]) for h in history.controls] + [expand(c) for c in controls], axis=-2)
    D = np.stack([expand(h[None]) for h in history.disturbances] + [expand(d) for d in dists], axis=-2)
    J = np.asarray(model.cost(S, C, D), float)
    return np.where(feas, J, np.inf), U0


def _closed_loop_reduce(T: np.ndarray) -> np.ndarray:
    """Reduce trailing ``(u, w)`` pairs down to the first control axis."""
    while T.ndim > 1:
        T = T.max(axis=-1)
        if T.ndim > 1:
            T = T.min(axis=-1)
    return T


def dp_closed_loop(model: SystemModel, grid: Optional[GridSpec] = None,
                   history: Optional[History] = None) -> ClosedLoopResult:
    """Exhaustive update-aware value on the grids (``+inf`` when infeasible)."""
    grid = grid or GridSpec()
    history = history or History.initial(model)
    T, U0 = _tensor(model, history, grid)
    first = _closed_loop_reduce(T)
    return ClosedLoopResult(float(first.min()), U0, first)


def dp_open_loop(model: SystemModel, grid: Optional[GridSpec] = None,
                 history: Optional[History] = None) -> float:
    """Exhaustive open-loop robust value on the grids (``+inf`` when infeasible)."""
    grid = grid or GridSpec()
    history = history or History.initial(model)
    T, _ = _tensor(model, history, grid)
    n = T.ndim // 2
    order = [2 * i for i in range(n)] + [2 * i + 1 for i in range(n)]
    T = T.transpose(order)
    worst = T.reshape(T.shape[:n] + (-1,)).max(axis=-1)
    return float(worst.min())


def member_ubar(model: SystemModel, k: int, history: History, control_suffix,
                grid: Optional[GridSpec] = None) -> bool:
    """Whether a fixed control suffix is feasible for every gridded disturbance sequence."""
    grid = grid or GridSpec()
    if history.level != k:
        raise ValueError("history does not end at k")
    suffix = np.asarray(control_suffix, float).reshape(model.N - k, model.n_u)
    W = box_grid(model.w_lower, model.w_upper, grid.disturbance_points)
    steps = model.N - k
    if len(W) ** steps > grid.node_budget:
        raise OracleBudgetExceeded("disturbance sequences exceed the node budget")
    seqs = np.array(list(itertools.product(range(len(W)), repeat=steps)), int)
    x = np.broadcast_to(history.state, (len(seqs), model.n_x))
    for j in range(steps):
        x = model.dynamics(k + j, x, suffix[j][None], W[seqs[:, j]])
        rows = model.constraint_rows(k + j + 1, x)
        if rows.shape[-1] and np.any(rows > FEAS_TOL):
            return False
    return True


def member_ustar(model: SystemModel, k: int, history: History, control,
                 grid: Optional[GridSpec] = None) -> bool:
    """Whether ``control`` at step k keeps a feasible continuation for every gridded w_k."""
    grid = grid or GridSpec()
    if history.level != k:
        raise ValueError("history does not end at k")
    T, _ = _tensor(model, history, grid, first=control)
    return bool(np.isfinite(_closed_loop_reduce(T)[0]))


def open_loop_feasible_suffixes(model: SystemModel, k: int, history: History,
                                grid: Optional[GridSpec] = None) -> np.ndarray:
    """All gridded control suffixes that are open-loop robustly feasible."""
    grid = grid or GridSpec()
    T, _ = _tensor(model, history, grid)
    n = T.ndim // 2
    T = T.transpose([2 * i for i in range(n)] + [2 * i + 1 for i in range(n)])
    ok = np.isfinite(T.reshape(T.shape[:n] + (-1,)).max(axis=-1))
    U = box_grid(model.u_lower, model.u_upper, grid.control_points)
    idx = np.argwhere(ok)
    return U[idx].reshape(len(idx), n * model.n_u)
