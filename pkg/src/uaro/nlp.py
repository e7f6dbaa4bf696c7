"""Local smooth NLP solver used by every master and scenario subproblem.

Problems have the form::

    minimise f(x)  subject to  c(x) <= 0,  lower <= x <= upper

The default method is a PHR augmented Lagrangian whose bound-constrained
inner problems are minimised with L-BFGS-B.  ``method="slsqp"`` delegates to
scipy's SLSQP instead; it is usually faster on small dense masters.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

log = logging.getLogger(__name__)


class NlpStatus(str, enum.Enum):
    LOCAL_OPTIMUM = "local-optimum"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration-limit"
    EVALUATION_ERROR = "evaluation-error"


class _EvalError(Exception):
    pass


@dataclass(frozen=True)
class NlpProblem:
    dim: int
    objective: Callable[[np.ndarray], float]
    lower: np.ndarray
    upper: np.ndarray
    inequalities: Optional[Callable[[np.ndarray], np.ndarray]] = None
    objective_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    inequalities_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def clip(self, x):
        return np.clip(np.asarray(x, float), self.lower, self.upper)


@dataclass(frozen=True)
class NlpConfig:
    feas_tol: float = 1e-6
    stat_tol: float = 1e-6
    max_outer: int = 200
    max_inner: int = 500
    fd_step: float = 1e-6
    method: str = "auglag"
    rho0: float = 10.0
    rho_max: float = 1e10


@dataclass
class NlpResult:
    point: np.ndarray
    objective_value: float
    max_inequality: float
    status: NlpStatus
    iterations: int
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stationarity: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.status == NlpStatus.LOCAL_OPTIMUM


def fd_gradient(fun, x, lower, upper, step=1e-6):
    """Forward differences with relative step, flipped at upper bounds."""
    x = np.asarray(x, float)
    f0 = np.asarray(fun(x), float)
    out = np.empty(f0.shape + (x.size,))
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        if x[i] + h > upper[i]:
            h = -h
        xp = x.copy()
        xp[i] += h
        out[..., i] = (np.asarray(fun(xp), float) - f0) / h
    return out


class _Evaluator:
    def __init__(self, p: NlpProblem, cfg: NlpConfig):
        self.p, self.cfg = p, cfg
        self.m = 0 if p.inequalities is None else None

    def f(self, x):
        v = float(self.p.objective(x))
        if not np.isfinite(v):
            raise _EvalError("objective")
        return v

    def df(self, x):
        if self.p.objective_grad is not None:
            g = np.asarray(self.p.objective_grad(x), float)
        else:
            g = fd_gradient(self.p.objective, x, self.p.lower, self.p.upper,
                            self.cfg.fd_step)
        if not np.all(np.isfinite(g)):
            raise _EvalError("objective gradient")
        return g

    def c(self, x):
        if self.p.inequalities is None:
            return np.zeros(0)
        v = np.atleast_1d(np.asarray(self.p.inequalities(x), float))
        if not np.all(np.isfinite(v)):
            raise _EvalError("inequalities")
        return v

    def dc(self, x):
        if self.p.inequalities is None:
            return np.zeros((0, self.p.dim))
        if self.p.inequalities_jac is not None:
            J = np.asarray(self.p.inequalities_jac(x), float)
        else:
            J = fd_gradient(self.c, x, self.p.lower, self.p.upper, self.cfg.fd_step)
        J = J.reshape(-1, self.p.dim)
        if not np.all(np.isfinite(J)):
            raise _EvalError("inequality jacobian")
        return J


def _projected_gradient(x, g, lower, upper):
    return np.abs(np.clip(x - g, lower, upper) - x).max(initial=0.0)


def _finish(ev, x, lam, iters, status_hint):
    f = ev.f(x)
    c = ev.c(x)
    maxc = float(c.max(initial=-np.inf)) if c.size else -np.inf
    grad = ev.df(x) + (ev.dc(x).T @ lam if c.size else 0.0)
    stat = _projected_gradient(x, grad, ev.p.lower, ev.p.upper)
    return NlpResult(x, f, maxc, status_hint, iters, lam, stat)


def _solve_auglag(p: NlpProblem, x0, cfg: NlpConfig) -> NlpResult:
    ev = _Evaluator(p, cfg)
    x = p.clip(x0)
    c = ev.c(x)
    m = c.size
    lam = np.zeros(m)
    rho = cfg.rho0
    bounds = list(zip(p.lower, p.upper))
    prev_infeas = np.inf
    total_inner = 0
    inner_tol = 1e-3
    for outer in range(1, cfg.max_outer + 1):
        def aug(z, lam=lam, rho=rho):
            fz = ev.f(z)
            gz = ev.df(z)
            if m:
                cz = ev.c(z)
                shifted = np.maximum(0.0, lam + rho * cz)
                fz += (shifted @ shifted - lam @ lam) / (2.0 * rho)
                gz = gz + ev.dc(z).T @ shifted
            return fz, gz

        res = minimize(aug, x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": cfg.max_inner, "gtol": inner_tol,
                                "ftol": 1e-16, "maxcor": 20})
        total_inner += res.nit
        x = p.clip(res.x)
        if not m:
            r = _finish(ev, x, lam, total_inner, NlpStatus.LOCAL_OPTIMUM)
            if r.stationarity <= cfg.stat_tol or inner_tol <= 1e-12:
                return r
            inner_tol = max(inner_tol * 1e-2, 1e-12)
            continue
        c = ev.c(x)
        lam_new = np.maximum(0.0, lam + rho * c)
        infeas = float(np.abs(np.minimum(-c, lam / rho)).max())
        maxc = float(c.max())
        grad = ev.df(x) + ev.dc(x).T @ lam_new
        stat = _projected_gradient(x, grad, p.lower, p.upper)
        lam = lam_new
        if maxc <= cfg.feas_tol and stat <= cfg.stat_tol and infeas <= max(cfg.feas_tol, 1e-4):
            return NlpResult(x, ev.f(x), maxc, NlpStatus.LOCAL_OPTIMUM,
                             total_inner, lam, stat)
        if infeas > 0.25 * prev_infeas:
            if rho >= cfg.rho_max:
                if maxc > cfg.feas_tol:
                    return _finish(ev, x, lam, total_inner, NlpStatus.INFEASIBLE)
                return _finish(ev, x, lam, total_inner, NlpStatus.ITERATION_LIMIT)
            rho = min(10.0 * rho, cfg.rho_max)
        prev_infeas = infeas
        inner_tol = max(min(inner_tol * 0.1, 0.1 * stat + 1e-12), 1e-12)
    status = NlpStatus.ITERATION_LIMIT
    r = _finish(ev, x, lam, total_inner, status)
    if r.max_inequality > 1e3 * cfg.feas_tol:
        r.status = NlpStatus.INFEASIBLE
    return r


def _solve_slsqp(p: NlpProblem, x0, cfg: NlpConfig) -> NlpResult:
    ev = _Evaluator(p, cfg)
    x = p.clip(x0)
    m = ev.c(x).size
    cons = []
    if m:
        cons = [{"type": "ineq", "fun": lambda z: -ev.c(z), "jac": lambda z: -ev.dc(z)}]
    res = minimize(ev.f, x, jac=ev.df, method="SLSQP", bounds=list(zip(p.lower, p.upper)),
                   constraints=cons,
                   options={"maxiter": cfg.max_outer * 5, "ftol": 1e-12})
    x = p.clip(res.x)
    c = ev.c(x)
    maxc = float(c.max()) if m else -np.inf
    lam = _estimate_multipliers(ev, x, c, cfg) if m else np.zeros(0)
    grad = ev.df(x) + (ev.dc(x).T @ lam if m else 0.0)
    stat = _projected_gradient(x, grad, p.lower, p.upper)
    if maxc > cfg.feas_tol:
        # SLSQP exits on incompatible linearisations; give the AL a chance
        # before calling the problem infeasible.
        al = _solve_auglag(p, x, cfg)
        if al.max_inequality <= cfg.feas_tol or al.status == NlpStatus.INFEASIBLE:
            al.iterations += res.nit
            return al
        status = NlpStatus.INFEASIBLE
    elif res.status in (0, 8) or stat <= cfg.stat_tol:
        status = NlpStatus.LOCAL_OPTIMUM if stat <= max(cfg.stat_tol, 1e-4) else NlpStatus.ITERATION_LIMIT
    else:
        status = NlpStatus.ITERATION_LIMIT
    return NlpResult(x, ev.f(x), maxc, status, res.nit, lam, stat)


def _estimate_multipliers(ev, x, c, cfg):
    """Least-squares KKT multipliers over the near-active set."""
    active = c >= -1e-7
    lam = np.zeros(c.size)
    if not active.any():
        return lam
    g = ev.df(x)
    J = ev.dc(x)[active]
    free = (x > ev.p.lower + 1e-9) & (x < ev.p.upper - 1e-9)
    if not free.any():
        return lam
    sol, *_ = np.linalg.lstsq(J[:, free].T, -g[free], rcond=None)
    lam[active] = np.maximum(sol, 0.0)
    return lam


def solve_nlp(problem: NlpProblem, x0, cfg: Optional[NlpConfig] = None) -> NlpResult:
    """Locally solve ``problem`` from ``x0``; deterministic in its inputs."""
    cfg = cfg or NlpConfig()
    x0 = np.asarray(x0, float)
    if x0.shape != (problem.dim,):
        raise ValueError(f"start point has shape {x0.shape}, expected ({problem.dim},)")
    try:
        if cfg.method == "auglag":
            return _solve_auglag(problem, x0, cfg)
        if cfg.method == "slsqp":
            return _solve_slsqp(problem, x0, cfg)
        raise ValueError(f"unknown NLP method {cfg.method!r}")
    except _EvalError as exc:
        log.debug("evaluation error: %s", exc)
        return NlpResult(problem.clip(x0), float("nan"), float("nan"),
                         NlpStatus.EVALUATION_ERROR, 0)


def solve_nlp_in_basis(problem: NlpProblem, x0, T, cfg: Optional[NlpConfig] = None) -> NlpResult:
    """Solve ``problem`` in coordinates ``z`` with ``x = T z``.

    Box bounds on coordinates mixed by ``T`` become inequality rows; the
    ``z`` box is the bounding box of the image of the ``x`` box.  The result
    is reported in the original coordinates.
    """
    T = np.asarray(T, float)
    Tinv = np.linalg.inv(T)
    lo, hi = problem.lower, problem.upper
    mixed = np.flatnonzero(np.count_nonzero(T, axis=1) > 1)
    centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    zc = Tinv @ centre
    zr = np.abs(Tinv) @ half
    Tm = T[mixed]

    def ineq(z):
        x = T @ z
        parts = [] if problem.inequalities is None else [np.atleast_1d(problem.inequalities(x))]
        parts += [x[mixed] - hi[mixed], lo[mixed] - x[mixed]]
        return np.concatenate(parts)

    jac = None
    if problem.inequalities is None or problem.inequalities_jac is not None:
        def jac(z):
            x = T @ z
            parts = [] if problem.inequalities is None else [
                np.asarray(problem.inequalities_jac(x), float).reshape(-1, problem.dim) @ T]
            parts += [Tm, -Tm]
            return np.vstack(parts)

    grad = None
    if problem.objective_grad is not None:
        def grad(z):
            return T.T @ problem.objective_grad(T @ z)

    zp = NlpProblem(problem.dim, lambda z: problem.objective(T @ z), zc - zr, zc + zr,
                    ineq, grad, jac)
    r = solve_nlp(zp, np.clip(Tinv @ np.asarray(x0, float), zc - zr, zc + zr), cfg)
    x = problem.clip(T @ r.point)
    m = 0 if problem.inequalities is None else len(r.multipliers) - 2 * len(mixed)
    return NlpResult(x, r.objective_value, r.max_inequality, r.status, r.iterations,
                     r.multipliers[:m], r.stationarity)


def _better(a: NlpResult, b: Optional[NlpResult]) -> bool:
    """Strict preference used for multistart; ties keep the earlier result."""
    if b is None:
        return True
    a_feas = a.status == NlpStatus.LOCAL_OPTIMUM or (
        a.status == NlpStatus.ITERATION_LIMIT and a.max_inequality <= 0)
    b_feas = b.status == NlpStatus.LOCAL_OPTIMUM or (
        b.status == NlpStatus.ITERATION_LIMIT and b.max_inequality <= 0)
    if a_feas != b_feas:
        return a_feas
    if not a_feas:
        return np.nan_to_num(a.max_inequality, nan=np.inf) < np.nan_to_num(b.max_inequality, nan=np.inf)
    return a.objective_value < b.objective_value


def multistart(problem: NlpProblem, starts: int, seed: int = 0,
               cfg: Optional[NlpConfig] = None, x0=None) -> NlpResult:
    """Best local solution over ``starts`` seeded uniform starts in the box.

    If ``x0`` is given it is used as start 0.  Ties are broken by the lowest
    start index.
    """
    if starts < 1:
        raise ValueError("need at least one start")
    rng = np.random.default_rng(seed)
    points = rng.uniform(problem.lower, problem.upper, size=(starts, problem.dim))
    if x0 is not None:
        points[0] = x0
    best = None
    for pt in points:
        r = solve_nlp(problem, pt, cfg)
        if _better(r, best):
            best = r
    return best
