"""Decreasing-horizon MPC drivers and the Monte Carlo harness.

``run_uaro_mpc`` re-solves the update-aware nested problem at every step;
``run_ro_mpc`` re-solves the open-loop robust problem over the remaining
horizon (or, with ``hold_plan``, applies the step-0 plan unchanged).  Both
apply the first input, realise a disturbance from a
:class:`DisturbanceSource`, and record an :class:`MpcTrace`.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import History, SystemModel, step
from .nested import NestedConfig, NestedSolver, NestedStatus, NodeContext, TreeNode
from .nlp import NlpConfig
from .sip import SipConfig, SipStatus, robust_rollout_problem, solve_open_loop

__all__ = ["History", "DisturbanceSource", "MpcConfig", "StepRecord", "MpcTrace",
           "ProblemInfeasible", "SolverFailure", "run_uaro_mpc", "run_ro_mpc",
           "monte_carlo", "McSummary"]

log = logging.getLogger(__name__)


class ProblemInfeasible(RuntimeError):
    """No robustly feasible control exists at the reported step."""


class SolverFailure(RuntimeError):
    """A solve failed where the theory guarantees feasibility."""


class SourceMode(str, enum.Enum):
    SEEDED_RANDOM = "seeded-random"
    FIXED_SEQUENCE = "fixed-sequence"
    ADVERSARIAL_REPLAY = "adversarial-replay"


@dataclass(frozen=True)
class DisturbanceSource:
    """Where realised disturbances come from.

    ``seeded-random`` draws uniformly from the box, independently per step.
    ``fixed-sequence`` replays ``sequence``.  ``adversarial-replay`` replays
    the worst-case disturbance predicted by the controller's own solution at
    each step (falling back to the box centre when none is available).
    """

    mode: SourceMode = SourceMode.SEEDED_RANDOM
    seed: int = 0
    sequence: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", SourceMode(self.mode))
        if self.mode == SourceMode.FIXED_SEQUENCE and self.sequence is None:
            raise ValueError("fixed-sequence source needs a sequence")

    @classmethod
    def zeros(cls, model: SystemModel) -> "DisturbanceSource":
        return cls(SourceMode.FIXED_SEQUENCE, sequence=np.tile(model.w_center, (model.N, 1)))

    def generator(self, model: SystemModel):
        rng = np.random.default_rng(self.seed)
        seq = None if self.sequence is None else np.asarray(self.sequence, float).reshape(-1, model.n_w)

        def draw(k: int, hint=None) -> np.ndarray:
            if self.mode == SourceMode.SEEDED_RANDOM:
                w = rng.uniform(model.w_lower, model.w_upper)
            elif self.mode == SourceMode.FIXED_SEQUENCE:
                w = seq[k]
            else:
                w = model.w_center if hint is None else np.asarray(hint, float)
            return np.clip(w, model.w_lower, model.w_upper)

        return draw


@dataclass(frozen=True)
class MpcConfig:
    nested: NestedConfig = field(default_factory=NestedConfig)
    sip: SipConfig = field(default_factory=lambda: SipConfig(nlp=NlpConfig(method="slsqp")))
    hold_plan: bool = False
    uaro_incumbent: bool = False
    warm_start: bool = True


@dataclass
class StepRecord:
    k: int
    gamma: float
    control: np.ndarray
    disturbance: np.ndarray
    next_state: np.ndarray
    node_solves: int
    wall_ms: float
    status: str = "converged"


@dataclass
class MpcTrace:
    controller: str
    model_name: str
    x0: np.ndarray
    steps: list[StepRecord] = field(default_factory=list)
    status: str = "ok"
    failure_step: Optional[int] = None
    message: str = ""

    @property
    def completed(self) -> bool:
        return self.status == "ok"

    @property
    def gammas(self) -> np.ndarray:
        return np.array([s.gamma for s in self.steps])

    @property
    def states(self) -> np.ndarray:
        return np.vstack([self.x0] + [s.next_state for s in self.steps])

    @property
    def controls(self) -> np.ndarray:
        return np.array([s.control for s in self.steps])

    @property
    def disturbances(self) -> np.ndarray:
        return np.array([s.disturbance for s in self.steps])

    def cost(self, model: SystemModel) -> float:
        if not self.completed:
            return math.nan
        return float(model.cost(self.states[None], self.controls[None], self.disturbances[None])[0])

    def gap(self, model: SystemModel) -> float:
        return self.steps[0].gamma - self.cost(model) if self.completed else math.nan

    def max_violation(self, model: SystemModel) -> float:
        """Largest constraint residual along the realised trajectory."""
        xs = self.states
        vals = [model.constraint_rows(k, xs[k]).max(initial=-math.inf) for k in range(1, len(xs))]
        return float(max(vals, default=-math.inf))

    def wall_seconds(self) -> float:
        return sum(s.wall_ms for s in self.steps) / 1e3

    def raise_for_status(self):
        if self.status == "infeasible":
            raise ProblemInfeasible(self.message)
        if self.status == "solver-failure":
            raise SolverFailure(self.message)

    def check_integrity(self, model: SystemModel, tol: float = 0.0) -> bool:
        """Recorded states equal the rollout of recorded controls/disturbances."""
        n = len(self.steps)
        if n == 0:
            return True
        x = self.x0
        for s in self.steps:
            x = model.dynamics(s.k, x, s.control, s.disturbance)
            if np.max(np.abs(x - s.next_state)) > tol:
                return False
        return True


def _fail(trace: MpcTrace, k: int, status: str, message: str) -> MpcTrace:
    trace.status, trace.failure_step, trace.message = status, k, message
    log.info("%s run stopped at k=%d: %s", trace.controller, k, message)
    return trace


def _worst_branch(tree: TreeNode, model: SystemModel, history: History) -> Optional[np.ndarray]:
    """Root scenario whose subtree holds the largest leaf cost."""
    from .nested import ScenarioTree
    if tree is None:
        return None
    st = ScenarioTree(model, history, tree)
    costs = st.leaf_costs(st.vector(0.0))
    p = int(np.argmax(costs))
    return st.layout.omegas[p, 0].copy()


def _retry_from_siblings(solver: NestedSolver, ctx: NodeContext, sol, siblings, incumbent):
    """Re-solve ``ctx`` from the other subtrees of the previous step's tree.

    The previous step certified a bound for every disturbance, so a bound
    above it only means the local solver settled badly from the nearest
    subtree.  The lowest converged bound wins and replaces the memo entry.
    """
    best = sol
    for tpl in siblings:
        before = solver.node_solves
        alt = solver.solve_node(ctx, tpl, incumbent)
        alt.node_solves = solver.node_solves - before
        if alt.status == NestedStatus.CONVERGED and (
                best.status != NestedStatus.CONVERGED or alt.bound < best.bound):
            best = alt
    if best is not sol and solver.cfg.memoize:
        solver.memo[ctx.history.key()] = best
    return best


def run_uaro_mpc(model: SystemModel, source: DisturbanceSource, cfg: Optional[MpcConfig] = None,
                 solver: Optional[NestedSolver] = None) -> MpcTrace:
    """Update-aware robust MPC over the decreasing horizon."""
    cfg = cfg or MpcConfig()
    solver = solver or NestedSolver(model, cfg.nested)
    draw = source.generator(model)
    hist = History.initial(model)
    trace = MpcTrace("uaro", model.name, hist.state.copy())
    template, siblings = None, []
    for k in range(model.N):
        t0 = time.perf_counter()
        before = solver.node_solves
        incumbent = None
        if cfg.uaro_incumbent:
            ol = solve_open_loop(model, hist, cfg.sip)
            if ol.status == SipStatus.CONVERGED:
                incumbent = (ol.decision[:-1], ol.objective_value)
        ctx = NodeContext(model, hist)
        sol = solver.solve_cached(ctx, template, incumbent)
        if k > 0 and (sol.status != NestedStatus.CONVERGED or
                      sol.bound > trace.steps[-1].gamma + solver.cfg.tol):
            sol = _retry_from_siblings(solver, ctx, sol, siblings, incumbent)
        if sol.status == NestedStatus.INFEASIBLE:
            if k == 0:
                return _fail(trace, k, "infeasible", "infeasible at k = 0")
            return _fail(trace, k, "solver-failure",
                         f"update-aware problem reported infeasible at k = {k} after a feasible start")
        u = sol.control
        hint = _worst_branch(sol.tree, model, hist) if source.mode == SourceMode.ADVERSARIAL_REPLAY else None
        w = draw(k, hint)
        x1 = step(model, k, hist.state, u, w)
        if cfg.warm_start and sol.tree is not None and k < model.N - 1:
            near = sol.tree.nearest(w)
            template = near.child if near is not None else None
            siblings = [b.child for b in sol.tree.branches if b is not near and b.child is not None]
        hist = hist.extend(x1, u, w)
        trace.steps.append(StepRecord(k, float(sol.bound), u.copy(), np.asarray(w, float).copy(),
                                      x1.copy(), solver.node_solves - before,
                                      1e3 * (time.perf_counter() - t0), sol.status.value))
    return trace


def run_ro_mpc(model: SystemModel, source: DisturbanceSource, cfg: Optional[MpcConfig] = None) -> MpcTrace:
    """Baseline: open-loop robust plan over the remaining horizon, first input applied."""
    cfg = cfg or MpcConfig()
    draw = source.generator(model)
    hist = History.initial(model)
    trace = MpcTrace("ro", model.name, hist.state.copy())
    plan, gamma, x0 = None, math.nan, None
    for k in range(model.N):
        t0 = time.perf_counter()
        solved = 0
        hint = None
        if plan is None or not cfg.hold_plan:
            sol = solve_open_loop(model, hist, cfg.sip, x0)
            solved = 1
            if sol.status == SipStatus.INFEASIBLE:
                return _fail(trace, k, "infeasible", f"infeasible at k = {k}")
            if sol.status != SipStatus.CONVERGED:
                log.warning("open-loop solve at k=%d ended with %s", k, sol.status.value)
            steps = model.N - k
            plan = sol.decision[:-1].reshape(steps, model.n_u)
            gamma = float(sol.objective_value)
            if source.mode == SourceMode.ADVERSARIAL_REPLAY and len(sol.scenarios):
                W = sol.scenarios.as_array()
                rows = robust_rollout_problem(model, hist).rows_at(sol.decision, W)
                hint = W[int(np.argmax(rows.max(axis=1)))][: model.n_w]
            offset = k
        u = plan[k - offset]
        w = draw(k, hint)
        x1 = step(model, k, hist.state, u, w)
        hist = hist.extend(x1, u, w)
        if not cfg.hold_plan and k < model.N - 1:
            x0 = np.append(plan[1:].ravel(), gamma)
        trace.steps.append(StepRecord(k, gamma, u.copy(), np.asarray(w, float).copy(), x1.copy(),
                                      solved, 1e3 * (time.perf_counter() - t0)))
    return trace


@dataclass
class McSummary:
    controller: str
    runs: int
    traces: list[MpcTrace]
    neg_cost_mean: float
    neg_cost_min: float
    neg_cost_max: float
    gap_mean: float
    gamma0_mean: float
    per_step: list[tuple[int, float, float, float]]
    infeasible: int
    solver_failures: int
    max_violation: float
    wall_seconds: float


def summarize(controller: str, traces: Sequence[MpcTrace], model: SystemModel,
              wall_seconds: float = 0.0) -> McSummary:
    ok = [t for t in traces if t.completed]
    negj = np.array([-t.cost(model) for t in ok])
    gaps = np.array([t.gap(model) for t in ok])
    g0 = np.array([t.steps[0].gamma for t in ok])
    per_step = []
    for k in range(model.N):
        g = np.array([t.steps[k].gamma for t in ok if len(t.steps) > k])
        if g.size:
            per_step.append((k, float(g.mean()), float(g.min()), float(g.max())))

    def stat(a, f):
        return float(f(a)) if a.size else math.nan

    viol = max((t.max_violation(model) for t in ok), default=math.nan)
    return McSummary(controller, len(traces), list(traces), stat(negj, np.mean), stat(negj, np.min),
                     stat(negj, np.max), stat(gaps, np.mean), stat(g0, np.mean), per_step,
                     sum(t.status == "infeasible" for t in traces),
                     sum(t.status == "solver-failure" for t in traces), viol, wall_seconds)


def monte_carlo(model: SystemModel, runner: str, runs: int, seed: int = 0,
                cfg: Optional[MpcConfig] = None, source: Optional[DisturbanceSource] = None,
                solver: Optional[NestedSolver] = None) -> McSummary:
    """Independent seeded runs of one controller, summarised.

    Run ``i`` draws disturbances from ``seeded-random`` with seed
    ``(seed, i)`` unless an explicit ``source`` is given.  Update-aware runs
    share one solver so identical nodes (step 0 in particular) are solved
    once.
    """
    if runs < 1:
        raise ValueError("runs must be at least 1")
    if runner not in ("uaro", "ro"):
        raise ValueError(f"unknown controller {runner!r}")
    cfg = cfg or MpcConfig()
    if runner == "uaro" and solver is None:
        solver = NestedSolver(model, cfg.nested)
    traces = []
    t0 = time.perf_counter()
    for i in range(runs):
        src = source or DisturbanceSource(SourceMode.SEEDED_RANDOM,
                                          seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
        if runner == "uaro":
            tr = run_uaro_mpc(model, src, cfg, solver)
        else:
            tr = run_ro_mpc(model, src, cfg)
        traces.append(tr)
    return summarize(runner, traces, model, time.perf_counter() - t0)
