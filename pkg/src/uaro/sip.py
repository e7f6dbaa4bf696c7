"""Semi-infinite programs solved by local reduction (constraint generation).

A :class:`SipProblem` asks for decisions ``v`` in a box minimising an
objective subject to ``constraint(v, omega) <= 0`` for every ``omega`` in a
compact box.  :func:`solve_sip` alternates a finite master problem over the
stored scenarios with :func:`max_violation`, a multistart search for the
scenario that violates the master solution the most.
"""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.linalg import block_diag
from scipy.optimize import minimize

from .model import History, SystemModel
from .nlp import NlpConfig, NlpProblem, NlpStatus, fd_gradient, solve_nlp, solve_nlp_in_basis

log = logging.getLogger(__name__)

DUPLICATE_TOL = 1e-9


class ScenarioSet:
    """Ordered scenarios, rejecting near-duplicates in the max-norm."""

    def __init__(self, points: Iterable = (), tol: float = DUPLICATE_TOL):
        self.tol = tol
        self._points: list[np.ndarray] = []
        for p in points:
            self.add(p)

    def __len__(self):
        return len(self._points)

    def __iter__(self):
        return iter(self._points)

    def __getitem__(self, i):
        return self._points[i]

    def __repr__(self):
        return f"ScenarioSet({[p.tolist() for p in self._points]})"

    def contains(self, point) -> bool:
        point = np.atleast_1d(np.asarray(point, float))
        return any(np.max(np.abs(p - point)) <= self.tol for p in self._points)

    def add(self, point) -> bool:
        point = np.atleast_1d(np.asarray(point, float)).copy()
        if self.contains(point):
            return False
        self._points.append(point)
        return True

    def copy(self) -> "ScenarioSet":
        return ScenarioSet(self._points, self.tol)

    def as_array(self, dim: Optional[int] = None) -> np.ndarray:
        if not self._points:
            return np.zeros((0, dim or 0))
        return np.vstack(self._points)


@dataclass(frozen=True)
class SipProblem:
    decision_lower: np.ndarray
    decision_upper: np.ndarray
    objective: Callable[[np.ndarray], float]
    scenario_lower: np.ndarray
    scenario_upper: np.ndarray
    constraint: Callable[[np.ndarray, np.ndarray], np.ndarray]
    n_rows: int
    objective_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    constraint_jac_v: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    constraint_jac_w: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    batch: Optional[Callable[..., tuple]] = None
    decision_basis: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return len(self.decision_lower)

    @property
    def scenario_dim(self) -> int:
        return len(self.scenario_lower)

    def rows_at(self, v, omegas: np.ndarray) -> np.ndarray:
        if self.batch is not None:
            return self.batch(v, omegas)[0]
        return np.array([self.constraint(v, w) for w in omegas], float).reshape(len(omegas), -1)


@dataclass(frozen=True)
class SipConfig:
    sip_tol: float = 1e-6
    max_outer: int = 50
    n_random: int = 16
    vertex_limit: int = 6
    refine_top: int = 3
    seed: int = 0
    nlp: NlpConfig = field(default_factory=NlpConfig)


class SipStatus(str, enum.Enum):
    CONVERGED = "converged"
    INFEASIBLE = "infeasible"
    BUDGET_EXHAUSTED = "budget-exhausted"


@dataclass
class SipSolution:
    decision: np.ndarray
    objective_value: float
    scenarios: ScenarioSet
    worst_violation: float
    status: SipStatus
    outer_iterations: int
    master_values: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class Certificate:
    certified: bool
    witness: Optional[np.ndarray]
    violation: float
    note: str = "local multistart search; not a global certificate"


def scenario_candidates(lower, upper, n_random: int, vertex_limit: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Box vertices (when the dimension allows), the centre, then random draws."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    pts = []
    if len(lower) <= vertex_limit:
        for corner in itertools.product(*zip(lower, upper)):
            pts.append(corner)
    pts.append(0.5 * (lower + upper))
    if n_random:
        pts.extend(rng.uniform(lower, upper, size=(n_random, len(lower))))
    out = ScenarioSet(pts)
    return out.as_array(len(lower))


def max_violation(problem: SipProblem, candidate, cfg: Optional[SipConfig] = None,
                  seed: Optional[int] = None) -> tuple[np.ndarray, float]:
    """Multistart maximisation of ``max_r constraint_r(candidate, omega)``.

    Returns the best scenario found and its violation (positive = violated).
    Each row is refined separately from its own best starts, which is exact
    for the max-of-rows objective.
    """
    cfg = cfg or SipConfig()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    lo, hi = problem.scenario_lower, problem.scenario_upper
    cands = scenario_candidates(lo, hi, cfg.n_random, cfg.vertex_limit, rng)
    vals = problem.rows_at(candidate, cands)
    flat = vals.max(axis=1)
    i = int(np.argmax(flat))
    best_w, best_v = cands[i].copy(), float(flat[i])
    if cfg.refine_top <= 0 or np.all(hi - lo <= 0):
        return best_w, best_v
    bounds = list(zip(lo, hi))
    for r in range(vals.shape[1]):
        order = np.argsort(-vals[:, r], kind="stable")[: cfg.refine_top]

        def neg(w, r=r):
            val = -float(problem.constraint(candidate, w)[r])
            if problem.constraint_jac_w is not None:
                g = -np.asarray(problem.constraint_jac_w(candidate, w))[r]
            else:
                g = -fd_gradient(lambda z: problem.constraint(candidate, z)[r], w, lo, hi)
            return val, g

        for j in order:
            res = minimize(neg, cands[j], jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": 100})
            w = np.clip(res.x, lo, hi)
            v = float(np.max(problem.constraint(candidate, w)))
            if v > best_v + 1e-12:
                best_w, best_v = w, v
    return best_w, best_v


def _master(problem: SipProblem, scenarios: ScenarioSet) -> NlpProblem:
    pts = list(scenarios)
    ineq = jac = None
    if pts and problem.batch is not None:
        W = np.vstack(pts)
        cache: dict = {}

        def _eval(v, want_jac):
            key = v.tobytes()
            if cache.get("key") != key or (want_jac and "jac" not in cache):
                rows, Jv, _ = problem.batch(v, W, want_jac)
                cache.clear()
                cache.update(key=key, rows=rows.ravel())
                if want_jac:
                    cache["jac"] = Jv.reshape(-1, problem.dim)
            return cache

        def ineq(v):
            return _eval(v, False)["rows"]

        def jac(v):
            return _eval(v, True)["jac"]
    elif pts:
        def ineq(v):
            return np.concatenate([problem.constraint(v, w) for w in pts])

        if problem.constraint_jac_v is not None:
            def jac(v):
                return np.vstack([problem.constraint_jac_v(v, w) for w in pts])
    return NlpProblem(problem.dim, problem.objective, problem.decision_lower,
                      problem.decision_upper, ineq, problem.objective_grad, jac)


def _solve_master(problem: SipProblem, scenarios: ScenarioSet, x, cfg: NlpConfig):
    master = _master(problem, scenarios)
    if problem.decision_basis is None:
        return solve_nlp(master, x, cfg)
    return solve_nlp_in_basis(master, x, problem.decision_basis, cfg)


def controls_basis(model: SystemModel, blocks: int, extra: int = 1) -> Optional[np.ndarray]:
    """Block-diagonal change of variables for ``blocks`` controls plus ``extra`` scalars."""
    if model.control_basis is None:
        return None
    M = np.asarray(model.control_basis, float)
    return block_diag(*([M] * blocks + [np.eye(extra)] if extra else [M] * blocks))


def solve_sip(problem: SipProblem, initial_scenarios: Optional[Iterable] = None,
              cfg: Optional[SipConfig] = None, x0=None) -> SipSolution:
    """Local reduction: master solve, worst-scenario search, repeat."""
    cfg = cfg or SipConfig()
    scen = ScenarioSet(initial_scenarios or ())
    lo, hi = problem.decision_lower, problem.decision_upper
    x = np.clip(0.5 * (lo + hi) if x0 is None else np.asarray(x0, float), lo, hi)
    values: list[float] = []
    worst = np.inf
    for it in range(1, cfg.max_outer + 1):
        res = _solve_master(problem, scen, x, cfg.nlp)
        if res.status in (NlpStatus.INFEASIBLE, NlpStatus.EVALUATION_ERROR):
            return SipSolution(res.point, np.inf, scen, float(res.max_inequality),
                               SipStatus.INFEASIBLE, it, values)
        x = res.point
        values.append(float(res.objective_value))
        w, worst = max_violation(problem, x, cfg, seed=cfg.seed + it)
        if worst <= cfg.sip_tol:
            return SipSolution(x, values[-1], scen, worst, SipStatus.CONVERGED, it, values)
        if not scen.add(w):
            # the master already holds this scenario; it is only violated by
            # the NLP's own tolerance, so no further progress is possible
            log.debug("repeated witness %s (violation %.3g)", w, worst)
            status = SipStatus.CONVERGED if worst <= 10 * cfg.nlp.feas_tol else SipStatus.BUDGET_EXHAUSTED
            return SipSolution(x, values[-1], scen, worst, status, it, values)
    return SipSolution(x, values[-1] if values else np.inf, scen, worst,
                       SipStatus.BUDGET_EXHAUSTED, cfg.max_outer, values)


def certify(problem: SipProblem, candidate, cfg: Optional[SipConfig] = None) -> Certificate:
    """Robust feasibility verdict for a fixed candidate, up to search budget."""
    cfg = cfg or SipConfig()
    w, v = max_violation(problem, candidate, cfg)
    if v <= cfg.sip_tol:
        return Certificate(True, None, v)
    return Certificate(False, w, v)


# ---------------------------------------------------------------------------
# Robust rollout problems built from a SystemModel
# ---------------------------------------------------------------------------

def _batch_sensitivities(model: SystemModel, x_start, k0, U, Wb, want_jac: bool):
    """States of ``n`` disturbance suffixes and, optionally, their derivatives.

    ``U`` is either one control sequence ``(steps, nu)`` shared by all
    suffixes or one sequence per suffix ``(n, steps, nu)``.

    Returns ``xs (n, steps+1, nx)``, ``Su (n, steps+1, steps, nx, nu)`` and
    ``Sw (n, steps+1, steps, nx, nw)`` (the latter two ``None`` without jac).
    """
    n, steps = Wb.shape[0], Wb.shape[1]
    U = np.asarray(U, float)
    if U.ndim == 2:
        U = np.broadcast_to(U, (n,) + U.shape)
    nx, nu, nw = model.n_x, model.n_u, model.n_w
    xs = np.empty((n, steps + 1, nx))
    xs[:, 0] = x_start
    Su = Sw = None
    if want_jac:
        Su = np.zeros((n, steps + 1, steps, nx, nu))
        Sw = np.zeros((n, steps + 1, steps, nx, nw))
    for j in range(steps):
        u = U[:, j]
        xs[:, j + 1] = model.dynamics(k0 + j, xs[:, j], u, Wb[:, j])
        if want_jac:
            A, B, E = model.dynamics_jac(k0 + j, xs[:, j], u, Wb[:, j])
            if j:
                Su[:, j + 1, :j] = np.einsum("nab,njbc->njac", A, Su[:, j, :j])
                Sw[:, j + 1, :j] = np.einsum("nab,njbc->njac", A, Sw[:, j, :j])
            Su[:, j + 1, j] = B
            Sw[:, j + 1, j] = E
    return xs, Su, Sw


def _full_paths(history: History, xs, U, Wb):
    n = len(xs)
    U = np.broadcast_to(U, (n,) + np.shape(U)[-2:])
    S = np.concatenate([np.broadcast_to(history.states[:-1], (n,) + history.states[:-1].shape),
                        xs], axis=1)
    C = np.concatenate([np.broadcast_to(history.controls, (n,) + history.controls.shape),
                        U], axis=1)
    D = np.concatenate([np.broadcast_to(history.disturbances, (n,) + history.disturbances.shape),
                        Wb], axis=1)
    return S, C, D


def robust_rollout_problem(model: SystemModel, history: History,
                           include_cost: bool = True) -> SipProblem:
    """SIP over the remaining control sequence against the remaining disturbances.

    Decision ``[u_k, ..., u_{N-1}, gamma]`` (``gamma`` only with
    ``include_cost``); scenario ``[w_k, ..., w_{N-1}]``; rows are the path
    constraints for k+1..N followed by ``J - gamma``.  With ``k = N-1`` this
    is the terminal node problem; with ``k`` arbitrary it is the open-loop
    robust problem used by the non-update-aware baseline.
    """
    k0 = history.level
    steps = model.N - k0
    if steps < 1:
        raise ValueError("history already reaches the final time step")
    nu, nw = model.n_u, model.n_w
    nv = steps * nu
    lo = np.tile(model.u_lower, steps)
    hi = np.tile(model.u_upper, steps)
    if include_cost:
        bound = model.cost_bound
        lo, hi = np.append(lo, -bound), np.append(hi, bound)
    dim = len(lo)
    wlo, whi = np.tile(model.w_lower, steps), np.tile(model.w_upper, steps)
    n_rows = sum(model.n_rows(k) for k in range(k0 + 1, model.N + 1)) + int(include_cost)

    def batch(v, Wb, want_jv=False, want_jw=False):
        v = np.asarray(v, float)
        Wb = np.asarray(Wb, float).reshape(-1, steps, nw)
        n = len(Wb)
        U = v[:nv].reshape(steps, nu)
        want = want_jv or want_jw
        xs, Su, Sw = _batch_sensitivities(model, history.state, k0, U, Wb, want)
        rows, jv, jw = [], [], []
        for j in range(steps):
            rows.append(model.constraint_rows(k0 + j + 1, xs[:, j + 1]))
            if want:
                G = model.constraint_rows_jac(k0 + j + 1, xs[:, j + 1])
                jv.append(np.einsum("nrx,njxu->nrju", G, Su[:, j + 1]).reshape(n, -1, nv))
                jw.append(np.einsum("nrx,njxw->nrjw", G, Sw[:, j + 1]).reshape(n, -1, steps * nw))
        if include_cost:
            paths = _full_paths(history, xs, U, Wb)
            rows.append((model.cost(*paths) - v[-1])[:, None])
            if want:
                dS, dC = model.cost_grad(*paths)
                dS = dS[:, k0:]
                gu = np.einsum("nkx,nkjxu->nju", dS, Su) + dC[:, k0:]
                gw = np.einsum("nkx,nkjxw->njw", dS, Sw)
                jv.append(gu.reshape(n, 1, nv))
                jw.append(gw.reshape(n, 1, steps * nw))
        rows = np.concatenate(rows, axis=1)
        Jv = Jw = None
        if want_jv:
            Jv = np.zeros((n, n_rows, dim))
            Jv[:, :, :nv] = np.concatenate(jv, axis=1)
            if include_cost:
                Jv[:, -1, -1] = -1.0
        if want_jw:
            Jw = np.concatenate(jw, axis=1)
        return rows, Jv, Jw

    def constraint(v, w):
        return batch(v, np.asarray(w, float)[None])[0][0]

    if include_cost:
        e = np.zeros(dim)
        e[-1] = 1.0

        def objective(v):
            return float(v[-1])

        def objective_grad(v):
            return e
    else:
        def objective(v):
            return 0.0

        def objective_grad(v):
            return np.zeros(dim)

    return SipProblem(lo, hi, objective, wlo, whi, constraint, n_rows,
                      objective_grad=objective_grad,
                      constraint_jac_v=lambda v, w: batch(v, np.asarray(w, float)[None], True)[1][0],
                      constraint_jac_w=lambda v, w: batch(v, np.asarray(w, float)[None], False, True)[2][0],
                      batch=batch,
                      decision_basis=controls_basis(model, steps, int(include_cost)))


def solve_open_loop(model: SystemModel, history: History, cfg: Optional[SipConfig] = None,
                    x0=None) -> SipSolution:
    """Best worst-case cost of a single control sequence over the remaining steps."""
    cfg = cfg or SipConfig()
    prob = robust_rollout_problem(model, history)
    steps = model.N - history.level
    if x0 is None:
        x0 = np.append(np.tile(model.initial_control, steps), 0.0)
    center = np.tile(model.w_center, steps)
    return solve_sip(prob, [center], cfg, x0)
