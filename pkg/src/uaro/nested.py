"""Update-aware nested robust problems solved by local reduction.

The value of a node at time ``j`` with realised history ``zeta_j`` is

    P_j(zeta_j) = min_{u_j, gamma} gamma
                  s.t. for all w_j:  g_{j+1}(x_{j+1}) <= 0,
                                     P~_{j+1}(zeta_j, x_{j+1}, u_j, w_j) <= gamma

with ``P~ = P`` where the child problem is feasible and ``-inf`` where it is
not.  The last level (``j = N-1``) is a flat semi-infinite program over
``(u_{N-1}, delta)`` bounding the final cost.

Masters are solved in lifted form: every scenario kept at a node owns a
child node with its own control, so one finite NLP over the whole scenario
tree stands in for the nested finite masters.  Scenario generation at inner
nodes evaluates ``P~`` directly by recursive solves (memoised); the smoothed
disjunctive rewrite is provided separately for cross-checking.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import History, SystemModel, step
from .nlp import NlpConfig, NlpProblem, NlpStatus, solve_nlp, solve_nlp_in_basis
from .sip import (ScenarioSet, SipConfig, SipStatus, _batch_sensitivities, _full_paths, controls_basis,
                  max_violation, robust_rollout_problem, scenario_candidates, solve_sip)

log = logging.getLogger(__name__)

NEG_INF = -math.inf


def is_neg_inf(value: float) -> bool:
    return value == NEG_INF


# ---------------------------------------------------------------------------
# smoothing of the scenario-generation disjunction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimplexWeights:
    """Nonnegative weights summing to one, one per disjunct."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a nonempty vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must lie on the unit simplex")
        object.__setattr__(self, "weights", w)

    @classmethod
    def vertex(cls, size: int, i: int) -> "SimplexWeights":
        w = np.zeros(size)
        w[i] = 1.0
        return cls(w)


def smoothed_disjunction(terms, lam: SimplexWeights) -> float:
    """Weighted sum of disjunct residuals; nonpositive iff the weighting proves one."""
    terms = np.asarray(terms, float)
    if terms.shape != lam.weights.shape:
        raise ValueError("one weight per disjunct required")
    return float(lam.weights @ terms)


def simplex_minimum(terms) -> tuple[float, SimplexWeights]:
    """Minimise ``lam . terms`` over the simplex; attained at the smallest term."""
    terms = np.asarray(terms, float)
    i = int(np.argmin(terms))
    return float(terms[i]), SimplexWeights.vertex(terms.size, i)


def disjunct_terms(sigma: float, delta: float, gamma: float, continuation: float,
                   rows, eps: float) -> np.ndarray:
    """Residuals of the three disjunct families, ``<= 0`` meaning satisfied.

    1. ``sigma - delta + gamma``: the trial bound ``delta`` already covers sigma.
    2. ``delta - P~ + eps``: the continuation value exceeds ``delta``.  An
       infeasible continuation (``P~ = -inf``) disqualifies the control, so
       the disjunct holds.
    3. ``-g_r + eps`` per row: the control violates a constraint row.
    """
    t2 = -np.inf if is_neg_inf(continuation) else delta - continuation + eps
    return np.concatenate([[sigma - delta + gamma, t2], eps - np.asarray(rows, float)])


# ---------------------------------------------------------------------------
# tree and results
# ---------------------------------------------------------------------------

@dataclass
class Branch:
    omega: np.ndarray
    child: Optional["TreeNode"] = None


@dataclass
class TreeNode:
    control: np.ndarray
    branches: list[Branch] = field(default_factory=list)

    def nearest(self, omega) -> Optional[Branch]:
        if not self.branches:
            return None
        d = [np.max(np.abs(b.omega - omega)) for b in self.branches]
        return self.branches[int(np.argmin(d))]

    def has(self, omega, tol: float = 1e-9) -> bool:
        return any(np.max(np.abs(b.omega - omega)) <= tol for b in self.branches)


@dataclass(frozen=True)
class NodeContext:
    model: SystemModel
    history: History

    def __post_init__(self):
        if not 0 <= self.history.level < self.model.N:
            raise ValueError(f"node level {self.history.level} outside 0..{self.model.N - 1}")

    @property
    def level(self) -> int:
        return self.history.level


class NestedStatus(str, enum.Enum):
    CONVERGED = "converged"
    INFEASIBLE = "infeasible"
    BUDGET_EXHAUSTED = "budget-exhausted"


@dataclass
class NestedSolution:
    control: np.ndarray
    bound: float
    status: NestedStatus
    scenarios: dict[int, ScenarioSet]
    node_solves: int
    tree: Optional[TreeNode] = None
    outer_iterations: int = 0
    worst_violation: float = math.nan

    @property
    def feasible(self) -> bool:
        return self.status != NestedStatus.INFEASIBLE

    @property
    def value(self) -> float:
        """Extended value: the bound, or ``NEG_INF`` when infeasible."""
        return NEG_INF if self.status == NestedStatus.INFEASIBLE else self.bound


@dataclass(frozen=True)
class NestedConfig:
    """Tolerances and search budgets for nested solves.

    ``n_random`` and ``include_center`` shape the candidate set used by the
    inner-node scenario search (box vertices are always included when the
    disturbance dimension is at most ``vertex_limit``).
    """

    sip: SipConfig = field(default_factory=lambda: SipConfig(nlp=NlpConfig(method="slsqp")))
    max_outer: int = 30
    n_random: int = 2
    include_center: bool = True
    vertex_limit: int = 6
    epsilon: float = 1e-6
    sentinel: float = 1e9
    memoize: bool = True
    seed: int = 0

    @property
    def tol(self) -> float:
        return self.sip.sip_tol


# ---------------------------------------------------------------------------
# lifted master over a scenario tree
# ---------------------------------------------------------------------------

class _Layout:
    """Flattened tree: node order, root-to-leaf paths and edge ownership."""

    def __init__(self, root: TreeNode, steps: int):
        self.nodes: list[TreeNode] = []
        self.depth: list[int] = []
        self.first_path: list[int] = []
        paths, omegas = [], []

        def visit(node, d, prefix_nodes, prefix_w):
            idx = len(self.nodes)
            self.nodes.append(node)
            self.depth.append(d)
            self.first_path.append(len(paths))
            if not node.branches:
                raise ValueError("tree node without scenarios")
            for b in node.branches:
                if d == steps - 1:
                    paths.append(prefix_nodes + [idx])
                    omegas.append(prefix_w + [b.omega])
                else:
                    if b.child is None:
                        raise ValueError("inner scenario without child node")
                    visit(b.child, d + 1, prefix_nodes + [idx], prefix_w + [b.omega])

        visit(root, 0, [], [])
        self.paths = np.asarray(paths, int)
        self.omegas = np.asarray(omegas, float)
        # an edge (path prefix up to step d) is owned by the first path using it
        L = len(self.paths)
        self.owner = np.zeros((L, steps), bool)
        for d in range(steps):
            seen = set()
            for p in range(L):
                key = (tuple(self.paths[p, : d + 1]), self.omegas[p, d].tobytes())
                if key not in seen:
                    seen.add(key)
                    self.owner[p, d] = True

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


class ScenarioTree:
    """Lifted master: one control per tree node plus a shared bound."""

    def __init__(self, model: SystemModel, history: History, root: TreeNode):
        self.model, self.history, self.root = model, history, root
        self.steps = model.N - history.level
        self.refresh()

    def refresh(self):
        self.layout = _Layout(self.root, self.steps)

    # variables ----------------------------------------------------------
    def controls(self) -> np.ndarray:
        return np.vstack([n.control for n in self.layout.nodes])

    def set_controls(self, C):
        for node, u in zip(self.layout.nodes, np.asarray(C, float).reshape(self.layout.n_nodes, -1)):
            node.control = u.copy()

    def vector(self, gamma: float) -> np.ndarray:
        return np.append(self.controls().ravel(), gamma)

    # evaluation ---------------------------------------------------------
    def evaluate(self, v, want_jac: bool = False):
        m, lay = self.model, self.layout
        nu, k0, steps = m.n_u, self.history.level, self.steps
        nn = lay.n_nodes
        C = np.asarray(v[:-1], float).reshape(nn, nu)
        U = C[lay.paths]
        xs, Su, _ = _batch_sensitivities(m, self.history.state, k0, U, lay.omegas, want_jac)
        rows, jacs = [], []
        for d in range(steps):
            sel = np.flatnonzero(lay.owner[:, d])
            x = xs[sel, d + 1]
            r = m.constraint_rows(k0 + d + 1, x)
            if r.shape[-1] == 0:
                continue
            rows.append(r.reshape(-1))
            if want_jac:
                G = m.constraint_rows_jac(k0 + d + 1, x)
                J = np.zeros((len(sel), nn, r.shape[-1], nu))
                for i in range(d + 1):
                    contrib = np.einsum("mrx,mxu->mru", G, Su[sel, d + 1, i])
                    J[np.arange(len(sel)), lay.paths[sel, i]] += contrib
                J = J.transpose(0, 2, 1, 3).reshape(-1, nn * nu)
                jacs.append(np.hstack([J, np.zeros((len(J), 1))]))
        S, Cf, D = _full_paths(self.history, xs, U, lay.omegas)
        cost = m.cost(S, Cf, D)
        rows.append(cost - v[-1])
        if want_jac:
            dS, dC = m.cost_grad(S, Cf, D)
            gu = np.einsum("lkx,lkjxu->lju", dS[:, k0:], Su) + dC[:, k0:]
            L = len(cost)
            J = np.zeros((L, nn, nu))
            for i in range(steps):
                J[np.arange(L), lay.paths[:, i]] += gu[:, i]
            jacs.append(np.hstack([J.reshape(L, -1), -np.ones((L, 1))]))
        out = np.concatenate(rows)
        return (out, np.vstack(jacs)) if want_jac else (out, None)

    def leaf_costs(self, v) -> np.ndarray:
        m, lay = self.model, self.layout
        U = np.asarray(v[:-1], float).reshape(lay.n_nodes, m.n_u)[lay.paths]
        xs, _, _ = _batch_sensitivities(m, self.history.state, self.history.level, U,
                                        lay.omegas, False)
        return m.cost(*_full_paths(self.history, xs, U, lay.omegas))

    def node_histories(self, v) -> list[History]:
        """Realised history at every node, following its first path."""
        m, lay = self.model, self.layout
        U = np.asarray(v[:-1], float).reshape(lay.n_nodes, m.n_u)[lay.paths]
        xs, _, _ = _batch_sensitivities(m, self.history.state, self.history.level, U,
                                        lay.omegas, False)
        out = []
        for i, d in enumerate(lay.depth):
            p = lay.first_path[i]
            h = self.history
            for j in range(d):
                h = h.extend(xs[p, j + 1], U[p, j], lay.omegas[p, j])
            out.append(h)
        return out

    def master(self) -> NlpProblem:
        m, nn = self.model, self.layout.n_nodes
        lo = np.append(np.tile(m.u_lower, nn), -m.cost_bound)
        hi = np.append(np.tile(m.u_upper, nn), m.cost_bound)
        cache: dict = {}

        def ev(v, want_jac):
            key = v.tobytes()
            if cache.get("key") != key or (want_jac and cache.get("jac") is None):
                rows, jac = self.evaluate(v, want_jac)
                cache.clear()
                cache.update(key=key, rows=rows, jac=jac)
            return cache

        grad = np.zeros(len(lo))
        grad[-1] = 1.0
        return NlpProblem(len(lo), lambda v: float(v[-1]), lo, hi,
                          lambda v: ev(v, False)["rows"], lambda v: grad,
                          lambda v: ev(v, True)["jac"])

    def solve_master(self, v, cfg: NlpConfig):
        T = controls_basis(self.model, self.layout.n_nodes)
        if T is None:
            return solve_nlp(self.master(), v, cfg)
        return solve_nlp_in_basis(self.master(), v, T, cfg)

    def scenarios_by_level(self) -> dict[int, ScenarioSet]:
        out: dict[int, ScenarioSet] = {}
        for node, d in zip(self.layout.nodes, self.layout.depth):
            s = out.setdefault(self.history.level + d, ScenarioSet())
            for b in node.branches:
                s.add(b.omega)
        return out


def _fit(model: SystemModel, node: TreeNode, keep: int) -> TreeNode:
    """Deep copy of ``node`` reshaped to span exactly ``keep`` levels.

    Deeper levels are dropped; missing children are filled by nominal chains
    reusing the parent's control.
    """
    out = TreeNode(node.control.copy())
    for b in node.branches:
        child = None
        if keep > 1:
            child = (_fit(model, b.child, keep - 1) if b.child is not None
                     else nominal_chain(model, keep - 1, node.control))
        out.branches.append(Branch(b.omega.copy(), child))
    return out


def nominal_chain(model: SystemModel, levels: int, control=None) -> TreeNode:
    """One-scenario tree at the box centre spanning ``levels`` levels."""
    u = model.initial_control if control is None else np.asarray(control, float)
    node = TreeNode(u.copy(), [Branch(model.w_center.copy())])
    root = node
    for _ in range(levels - 1):
        child = TreeNode(u.copy(), [Branch(model.w_center.copy())])
        node.branches[0].child = child
        node = child
    return root


def _chain_from_plan(model: SystemModel, node: TreeNode, plan, d: int = 0):
    """Assign the open-loop control ``plan[d]`` to every node at depth ``d``."""
    node.control = np.asarray(plan[d], float).copy()
    for b in node.branches:
        if b.child is not None:
            _chain_from_plan(model, b.child, plan, d + 1)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

class NestedSolver:
    """Recursive solver for the update-aware problems of one model.

    The memo of ``P~`` values is shared by every solve made through this
    object, so repeated roots (for example step 0 across Monte Carlo runs)
    are solved once.
    """

    def __init__(self, model: SystemModel, cfg: Optional[NestedConfig] = None):
        self.model = model
        self.cfg = cfg or NestedConfig()
        self.memo: dict[bytes, NestedSolution] = {}
        self.node_solves = 0
        self._stack: list[int] = []

    # -- public operations -------------------------------------------------
    def solve_terminal(self, ctx: NodeContext, x0=None) -> NestedSolution:
        """Flat SIP over ``(u_{N-1}, delta)`` at the last decision level."""
        m = self.model
        if ctx.level != m.N - 1:
            raise ValueError("terminal problems live at level N-1")
        self.node_solves += 1
        prob = robust_rollout_problem(m, ctx.history)
        start = np.append(m.initial_control, 0.0) if x0 is None else np.asarray(x0, float)
        sol = solve_sip(prob, [m.w_center], self.cfg.sip, start)
        status = {SipStatus.CONVERGED: NestedStatus.CONVERGED,
                  SipStatus.INFEASIBLE: NestedStatus.INFEASIBLE}.get(sol.status,
                                                                    NestedStatus.BUDGET_EXHAUSTED)
        u = sol.decision[: m.n_u]
        tree = TreeNode(u.copy(), [Branch(w.copy()) for w in sol.scenarios])
        return NestedSolution(u, float(sol.objective_value) if status != NestedStatus.INFEASIBLE else math.inf,
                              status, {ctx.level: sol.scenarios}, 1, tree,
                              sol.outer_iterations, sol.worst_violation)

    def solve_node(self, ctx: NodeContext, template: Optional[TreeNode] = None,
                   incumbent=None) -> NestedSolution:
        """Update-aware problem at ``ctx``.

        ``template`` warm-starts the scenario tree (structure and controls);
        ``incumbent`` is an optional open-loop plan ``(controls, bound)`` used
        as a fallback start if the lifted master settles above its bound.
        """
        m = self.model
        if self._stack and ctx.level <= self._stack[-1]:
            raise AssertionError("nested solve must descend in time")
        if ctx.level == m.N - 1:
            x0 = None
            if template is not None:
                x0 = np.append(template.control, 0.0)
            return self.solve_terminal(ctx, x0)
        self._stack.append(ctx.level)
        try:
            return self._solve_lifted(ctx, template, incumbent)
        finally:
            self._stack.pop()

    def eval_ptilde(self, ctx: NodeContext, template: Optional[TreeNode] = None) -> float:
        """``P~`` at ``ctx``: the node bound, or ``NEG_INF`` if infeasible."""
        return self.solve_cached(ctx, template).value

    def solve_cached(self, ctx: NodeContext, template: Optional[TreeNode] = None,
                     incumbent=None) -> NestedSolution:
        key = ctx.history.key()
        if self.cfg.memoize and key in self.memo:
            return self.memo[key]
        before = self.node_solves
        sol = self.solve_node(ctx, template, incumbent)
        sol.node_solves = self.node_solves - before
        if self.cfg.memoize:
            self.memo[key] = sol
        return sol

    def scenario_gen(self, ctx: NodeContext, control, gamma: float,
                     exclude: Optional[TreeNode] = None, seed: int = 0):
        """Worst disturbance for ``(control, gamma)`` at ``ctx``.

        Returns ``(omega, sigma, child)`` where ``sigma`` is the largest of
        the next-step constraint rows and ``P~ - gamma`` (an infeasible
        continuation scores ``cfg.sentinel``), and ``child`` is the nested
        solution found for ``omega`` if one was computed.  Candidates already
        present as branches of ``exclude`` are skipped.
        """
        m, cfg = self.model, self.cfg
        j = ctx.level
        u = np.asarray(control, float)
        rng = np.random.default_rng([cfg.seed, seed, j])
        cands = scenario_candidates(m.w_lower, m.w_upper, cfg.n_random, cfg.vertex_limit, rng)
        if not cfg.include_center:
            center = m.w_center
            cands = np.array([c for c in cands if np.max(np.abs(c - center)) > 1e-12 or
                              np.all(m.w_lower == m.w_upper)]).reshape(-1, m.n_w)
        best = (None, -math.inf, None)
        for w in cands:
            if exclude is not None and exclude.has(w):
                continue
            x1 = step(m, j, ctx.history.state, u, w)
            rows = m.constraint_rows(j + 1, x1)
            sigma = float(rows.max(initial=-math.inf))
            child = None
            if sigma <= cfg.tol:
                h1 = ctx.history.extend(x1, u, w)
                if j + 1 == m.N:
                    sigma = max(sigma, float(m.cost(h1.states[None], h1.controls[None],
                                                    h1.disturbances[None])[0]) - gamma)
                else:
                    tmpl = None
                    if exclude is not None and exclude.nearest(w) is not None:
                        tmpl = exclude.nearest(w).child
                    child = self.solve_cached(NodeContext(m, h1), tmpl)
                    p = child.value
                    sigma = max(sigma, cfg.sentinel if is_neg_inf(p) else p - gamma)
            if sigma > best[1]:
                best = (w.copy(), sigma, child)
        return best

    # -- lifted local reduction ----------------------------------------------
    def _solve_lifted(self, ctx: NodeContext, template, incumbent) -> NestedSolution:
        m, cfg = self.model, self.cfg
        steps = m.N - ctx.level
        self.node_solves += 1
        root = _fit(m, template, steps) if template is not None else nominal_chain(m, steps)
        tree = ScenarioTree(m, ctx.history, root)
        gamma0 = float(np.max(tree.leaf_costs(tree.vector(0.0))))
        v = tree.vector(min(max(gamma0, -m.cost_bound), m.cost_bound))
        used_incumbent = incumbent is None
        worst = math.inf
        for it in range(1, cfg.max_outer + 1):
            res = tree.solve_master(v, cfg.sip.nlp)
            if res.status in (NlpStatus.INFEASIBLE, NlpStatus.EVALUATION_ERROR):
                log.debug("level %d master infeasible at iteration %d", ctx.level, it)
                return NestedSolution(res.point[: m.n_u], math.inf, NestedStatus.INFEASIBLE,
                                      tree.scenarios_by_level(), 0, tree.root, it,
                                      float(res.max_inequality))
            v = res.point
            tree.set_controls(v[:-1])
            if not used_incumbent and v[-1] > incumbent[1] + cfg.tol:
                used_incumbent = True
                _chain_from_plan(m, tree.root, np.asarray(incumbent[0], float).reshape(steps, m.n_u))
                alt = tree.solve_master(tree.vector(incumbent[1]), cfg.sip.nlp)
                if alt.status == NlpStatus.LOCAL_OPTIMUM and alt.objective_value < v[-1]:
                    v = alt.point
                tree.set_controls(v[:-1])
            added, worst, stalled = self._verify(tree, v, it)
            if not added:
                status = NestedStatus.BUDGET_EXHAUSTED if stalled else NestedStatus.CONVERGED
                return NestedSolution(v[: m.n_u].copy(), float(v[-1]), status,
                                      tree.scenarios_by_level(), 0, tree.root, it, worst)
            tree.refresh()
            v = tree.vector(v[-1])
            v[-1] = max(v[-1], float(np.max(tree.leaf_costs(v))))
        return NestedSolution(v[: m.n_u].copy(), float(v[-1]), NestedStatus.BUDGET_EXHAUSTED,
                              tree.scenarios_by_level(), 0, tree.root, cfg.max_outer, worst)

    def _verify(self, tree: ScenarioTree, v, it: int):
        """Bottom-up scenario search; returns (added, worst violation, stalled).

        Levels are checked from the last decision upwards and the search stops
        at the first level where a witness was added, so the master is
        re-solved before any higher level is examined.
        """
        m, cfg = self.model, self.cfg
        lay = tree.layout
        hists = tree.node_histories(v)
        gamma = float(v[-1])
        worst, stalled = -math.inf, False
        for d in range(tree.steps - 1, -1, -1):
            added = False
            for i, node in enumerate(lay.nodes):
                if lay.depth[i] != d:
                    continue
                h = hists[i]
                if d == tree.steps - 1:
                    prob = robust_rollout_problem(m, h)
                    w, viol = max_violation(prob, np.append(node.control, gamma), cfg.sip,
                                            seed=cfg.seed + 7919 * it + i)
                    worst = max(worst, viol)
                    if viol > cfg.tol:
                        if node.has(w):
                            stalled |= viol > 10 * cfg.sip.nlp.feas_tol
                        else:
                            node.branches.append(Branch(w.copy()))
                            added = True
                else:
                    w, viol, child = self.scenario_gen(NodeContext(m, h), node.control, gamma,
                                                       exclude=node, seed=it * 1009 + i)
                    if w is None:
                        continue
                    worst = max(worst, viol)
                    if viol > cfg.tol:
                        near = node.nearest(w)
                        keep = tree.steps - d - 1
                        if child is not None and child.tree is not None and child.feasible:
                            sub = _fit(m, child.tree, keep)
                        else:
                            sub = _fit(m, near.child, keep)
                        node.branches.append(Branch(w.copy(), sub))
                        added = True
            if added:
                return True, worst, stalled
        return False, worst, stalled


# ---------------------------------------------------------------------------
# smoothed scenario generation (cross-check of the direct path)
# ---------------------------------------------------------------------------

def smoothed_constraint_min(solver: NestedSolver, ctx_next: NodeContext, control_next,
                            sigma: float, delta: float, gamma: float,
                            omegas=None) -> float:
    """Minimum over ``(omega_{j+1}, lambda)`` of the smoothed disjunction.

    ``ctx_next`` is the history after the candidate disturbance; the
    minimisation over ``omega_{j+1}`` runs over ``omegas`` (default: the
    inner-node candidate set) and the simplex minimum is exact.
    """
    m, cfg = solver.model, solver.cfg
    j1 = ctx_next.level
    u = np.asarray(control_next, float)
    if omegas is None:
        rng = np.random.default_rng([cfg.seed, j1])
        omegas = scenario_candidates(m.w_lower, m.w_upper, cfg.n_random, cfg.vertex_limit, rng)
    best = math.inf
    for w in omegas:
        x2 = step(m, j1, ctx_next.history.state, u, w)
        h2 = ctx_next.history.extend(x2, u, w)
        rows = m.constraint_rows(j1 + 1, x2)
        if j1 + 1 == m.N:
            cont = float(m.cost(h2.states[None], h2.controls[None], h2.disturbances[None])[0])
        else:
            cont = solver.eval_ptilde(NodeContext(m, h2))
        val, _ = simplex_minimum(disjunct_terms(sigma, delta, gamma, cont, rows, cfg.epsilon))
        best = min(best, val)
    return best


def smoothed_accepts_sigma(solver: NestedSolver, ctx: NodeContext, control, gamma: float,
                           omega, sigma: float, controls_next, deltas, omegas=None) -> bool:
    """Whether ``sigma`` is a feasible violation bound for disturbance ``omega``.

    The universal quantifiers over the next control and the trial bound
    ``delta`` are checked on the supplied grids; the critical value
    ``delta = sigma + gamma - epsilon/2`` is always added.
    """
    m = solver.model
    u = np.asarray(control, float)
    x1 = step(m, ctx.level, ctx.history.state, u, omega)
    nxt = NodeContext(m, ctx.history.extend(x1, u, omega))
    grid = list(deltas) + [sigma + gamma - 0.5 * solver.cfg.epsilon]
    for un in controls_next:
        for delta in grid:
            if smoothed_constraint_min(solver, nxt, un, sigma, delta, gamma, omegas) > 0:
                return False
    return True
