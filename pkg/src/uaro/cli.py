"""Command line: ``run``, ``compare`` and ``certify``.

Configs are flat ``key = value`` files (``#`` comments allowed).  Exit codes:
0 success, 1 configuration or input error, 2 problem infeasible (or a
certification witness found), 3 solver failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .model import (History, SystemModel, build_quadrotor, build_toy_feas, build_toy_integrator,
                    step)
from .mpc import DisturbanceSource, McSummary, MpcConfig, SourceMode, monte_carlo
from .nested import NestedConfig, NestedSolver
from .nlp import NlpConfig
from .sip import SipConfig, certify, robust_rollout_problem

log = logging.getLogger("uaro")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_SOLVER = 0, 1, 2, 3

SUMMARY_FIELDS = ["controller", "runs", "completed", "neg_J_mean", "neg_J_min", "neg_J_max",
                  "gap_mean", "gamma0_mean", "infeasible", "solver_failures", "max_violation",
                  "t_comp_s"]
GAMMA_FIELDS = ["k", "mean_gamma", "min_gamma", "max_gamma"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    system: str = "quadrotor"
    c: float = 1.0
    wmax: Optional[float] = None
    controller: str = "both"
    runs: int = 20
    seed: int = 0
    horizon: Optional[int] = None
    disturbance: str = "random"
    sip_tol: float = 1e-6
    feas_tol: float = 1e-6
    epsilon: float = 1e-6
    n_random: int = 16
    nested_random: int = 2
    include_center: bool = True
    max_outer: int = 50
    nested_max_outer: int = 30
    nlp_method: str = "slsqp"
    hold_plan: bool = False
    uaro_incumbent: bool = False
    out: str = "results"


def _positive_int(v: str) -> int:
    n = int(v)
    if n < 1:
        raise ValueError("must be at least 1")
    return n


def _nonneg_int(v: str) -> int:
    n = int(v)
    if n < 0:
        raise ValueError("must be nonnegative")
    return n


def _positive_float(v: str) -> float:
    x = float(v)
    if not (x > 0 and math.isfinite(x)):
        raise ValueError("must be a positive number")
    return x


def _nonneg_float(v: str) -> float:
    x = float(v)
    if not (x >= 0 and math.isfinite(x)):
        raise ValueError("must be a nonnegative number")
    return x


def _choice(*options):
    def parse(v: str) -> str:
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return parse


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("must be true or false")


PARSERS = {
    "system": _choice("quadrotor", "toy-integrator", "toy-feas"),
    "c": _positive_float,
    "wmax": _nonneg_float,
    "controller": _choice("uaro", "ro", "both"),
    "runs": _positive_int,
    "seed": _nonneg_int,
    "horizon": _positive_int,
    "disturbance": _choice("random", "zero", "worst-vertex", "adversarial"),
    "sip_tol": _positive_float,
    "feas_tol": _positive_float,
    "epsilon": _positive_float,
    "n_random": _nonneg_int,
    "nested_random": _nonneg_int,
    "include_center": _bool,
    "max_outer": _positive_int,
    "nested_max_outer": _positive_int,
    "nlp_method": _choice("slsqp", "auglag"),
    "hold_plan": _bool,
    "uaro_incumbent": _bool,
    "out": str,
}


def parse_config(path) -> ExperimentConfig:
    """Read and validate a flat config; errors name the file, line and field."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    lines = text.splitlines()

    def line_of(key: str) -> int:
        for i, line in enumerate(lines, 1):
            if line.split("=", 1)[0].strip().lower() == key:
                return i
        return 0

    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string("[experiment]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
    values = {}
    for key, raw in cp["experiment"].items():
        if key not in PARSERS:
            raise ConfigError(f"{path}:{line_of(key)}: unknown key '{key}'")
        try:
            values[key] = PARSERS[key](raw.strip())
        except ValueError as exc:
            raise ConfigError(f"{path}:{line_of(key)}: field '{key}': {exc} (got '{raw}')") from None
    return ExperimentConfig(**values)


def build_model(cfg: ExperimentConfig) -> SystemModel:
    if cfg.system == "quadrotor":
        wmax = 0.001 if cfg.wmax is None else cfg.wmax
        return build_quadrotor(cfg.c, wmax, horizon=cfg.horizon or 5)
    if cfg.system == "toy-integrator":
        return build_toy_integrator(horizon=cfg.horizon or 2,
                                    wmax=0.5 if cfg.wmax is None else cfg.wmax)
    if cfg.horizon not in (None, 2):
        raise ConfigError("toy-feas has a fixed horizon of 2")
    return build_toy_feas(wmax=0.3 if cfg.wmax is None else cfg.wmax)


def mpc_config(cfg: ExperimentConfig) -> MpcConfig:
    nlp = NlpConfig(feas_tol=cfg.feas_tol, method=cfg.nlp_method)
    sip = SipConfig(sip_tol=cfg.sip_tol, max_outer=cfg.max_outer, n_random=cfg.n_random,
                    seed=cfg.seed, nlp=nlp)
    nested = NestedConfig(sip=sip, max_outer=cfg.nested_max_outer, n_random=cfg.nested_random,
                          include_center=cfg.include_center, epsilon=cfg.epsilon, seed=cfg.seed)
    return MpcConfig(nested=nested, sip=sip, hold_plan=cfg.hold_plan,
                     uaro_incumbent=cfg.uaro_incumbent)


def disturbance_source(cfg: ExperimentConfig, model: SystemModel) -> Optional[DisturbanceSource]:
    if cfg.disturbance == "zero":
        return DisturbanceSource.zeros(model)
    if cfg.disturbance == "worst-vertex":
        return DisturbanceSource(SourceMode.FIXED_SEQUENCE,
                                 sequence=np.tile(model.w_upper, (model.N, 1)))
    if cfg.disturbance == "adversarial":
        return DisturbanceSource(SourceMode.ADVERSARIAL_REPLAY)
    return None


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_trace(path: Path, summary: McSummary, model: SystemModel):
    header = (["run", "k", "gamma"] + [f"u{i}" for i in range(model.n_u)] +
              [f"w{i}" for i in range(model.n_w)] + [f"x_next{i}" for i in range(model.n_x)] +
              ["node_solves", "step_wall_ms"])
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for run, tr in enumerate(summary.traces):
            for s in tr.steps:
                out.writerow([run, s.k, _fmt(s.gamma)] + [_fmt(v) for v in s.control] +
                             [_fmt(v) for v in s.disturbance] + [_fmt(v) for v in s.next_state] +
                             [s.node_solves, format(s.wall_ms, ".3f")])


def write_gamma(path: Path, summary: McSummary):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(GAMMA_FIELDS)
        for k, mean, lo, hi in summary.per_step:
            out.writerow([k, _fmt(mean), _fmt(lo), _fmt(hi)])


def summary_row(s: McSummary) -> list[str]:
    completed = sum(t.completed for t in s.traces)
    return [s.controller, str(s.runs), str(completed), _fmt(s.neg_cost_mean), _fmt(s.neg_cost_min),
            _fmt(s.neg_cost_max), _fmt(s.gap_mean), _fmt(s.gamma0_mean), str(s.infeasible),
            str(s.solver_failures), _fmt(s.max_violation), format(s.wall_seconds / s.runs, ".3f")]


def write_summary(path: Path, summaries: list[McSummary]):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(SUMMARY_FIELDS)
        for s in summaries:
            out.writerow(summary_row(s))


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != SUMMARY_FIELDS:
        raise ConfigError(f"{path}: not a summary file (header mismatch)")
    return [dict(zip(SUMMARY_FIELDS, r)) for r in rows[1:]]


def validate_trace(path, model: SystemModel, tol: float = 1e-12) -> bool:
    """Rollout of the control/disturbance columns reproduces the state columns."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    runs: dict[str, list] = {}
    for r in rows:
        runs.setdefault(r["run"], []).append(r)
    for steps in runs.values():
        x = np.asarray(model.x0, float)
        for r in steps:
            k = int(r["k"])
            u = np.array([float(r[f"u{i}"]) for i in range(model.n_u)])
            w = np.array([float(r[f"w{i}"]) for i in range(model.n_w)])
            x = step(model, k, x, u, w)
            rec = np.array([float(r[f"x_next{i}"]) for i in range(model.n_x)])
            if np.max(np.abs(x - rec)) > tol:
                return False
            x = rec
    return True


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    over = {k: getattr(args, k) for k in ("runs", "seed", "controller", "horizon", "out",
                                          "disturbance")
            if getattr(args, k, None) is not None}
    cfg = replace(cfg, **over)
    model = build_model(cfg)
    mcfg = mpc_config(cfg)
    src = disturbance_source(cfg, model)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    controllers = ["uaro", "ro"] if cfg.controller == "both" else [cfg.controller]
    summaries, code = [], EXIT_OK
    for name in controllers:
        log.info("running %s: %d runs on %s", name, cfg.runs, model.name)
        solver = NestedSolver(model, mcfg.nested) if name == "uaro" else None
        s = monte_carlo(model, name, cfg.runs, cfg.seed, mcfg, src, solver)
        summaries.append(s)
        write_trace(out / f"trace_{name}.csv", s, model)
        write_gamma(out / f"gamma_{name}.csv", s)
        for t in s.traces:
            if not t.completed:
                print(f"{name} run {s.traces.index(t)}: {t.status}: {t.message}")
        if s.solver_failures:
            code = max(code, EXIT_SOLVER)
        elif s.infeasible:
            code = max(code, EXIT_INFEASIBLE)
        print(f"{name}: -J mean {s.neg_cost_mean:.4f}, gap mean {s.gap_mean:.4f}, "
              f"gamma0 mean {s.gamma0_mean:.4f}, infeasible {s.infeasible}, "
              f"solver failures {s.solver_failures}")
    write_summary(out / "summary.csv", summaries)
    return code


COMPARE_METRICS = ["neg_J_mean", "gap_mean", "gamma0_mean", "t_comp_s", "infeasible",
                   "solver_failures"]


def compare_rows(a: list[dict], b: list[dict]) -> list[tuple]:
    """Pairs of summary rows: single rows pair directly, otherwise by controller."""
    if len(a) == 1 and len(b) == 1:
        pairs = [(a[0], b[0])]
    else:
        bmap = {r["controller"]: r for r in b}
        if set(bmap) != {r["controller"] for r in a}:
            raise ConfigError("summary files list different controllers")
        pairs = [(r, bmap[r["controller"]]) for r in a]
    table = []
    for ra, rb in pairs:
        for m in COMPARE_METRICS:
            va, vb = float(ra[m]), float(rb[m])
            ratio = vb / va if va != 0 else math.nan
            table.append((f"{ra['controller']}/{rb['controller']}", m, va, vb, vb - va, ratio))
    return table


def cmd_compare(args) -> int:
    table = compare_rows(read_summary(args.a), read_summary(args.b))
    print(f"{'pair':<12}{'metric':<18}{'a':>14}{'b':>14}{'b-a':>14}{'b/a':>12}")
    for pair, m, va, vb, d, r in table:
        print(f"{pair:<12}{m:<18}{va:>14.6g}{vb:>14.6g}{d:>14.6g}{r:>12.6g}")
    return EXIT_OK


def load_controls(path, model: SystemModel) -> np.ndarray:
    try:
        vals = np.loadtxt(path, delimiter=",", ndmin=1, comments="#")
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{path}: cannot read control sequence ({exc})") from None
    vals = np.atleast_1d(vals).ravel()
    if vals.size != model.N * model.n_u:
        raise ConfigError(f"{path}: expected {model.N}x{model.n_u} control values, got {vals.size}")
    U = vals.reshape(model.N, model.n_u)
    if np.any(U < model.u_lower - 1e-12) or np.any(U > model.u_upper + 1e-12):
        raise ConfigError(f"{path}: controls outside the control box")
    return U


def cmd_certify(args) -> int:
    cfg = parse_config(args.config)
    model = build_model(cfg)
    U = load_controls(args.controls, model)
    prob = robust_rollout_problem(model, History.initial(model), include_cost=False)
    cert = certify(prob, U.ravel(), mpc_config(cfg).sip)
    if cert.certified:
        print(f"certified: worst violation {cert.violation:.6g} ({cert.note})")
        return EXIT_OK
    w = ", ".join(_fmt(v) for v in cert.witness)
    print(f"violated: worst violation {cert.violation:.6g} at disturbance ({w}) ({cert.note})")
    return EXIT_INFEASIBLE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uaro", description="Update-aware robust MPC experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run Monte Carlo experiments from a config")
    r.add_argument("--config", required=True)
    r.add_argument("--runs", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--controller", choices=["uaro", "ro", "both"])
    r.add_argument("--horizon", type=int)
    r.add_argument("--out")
    r.add_argument("--disturbance", choices=["random", "zero", "worst-vertex", "adversarial"])
    r.set_defaults(func=cmd_run)
    c = sub.add_parser("compare", help="compare two summary files")
    c.add_argument("a")
    c.add_argument("b")
    c.set_defaults(func=cmd_compare)
    z = sub.add_parser("certify", help="robustly certify a control sequence")
    z.add_argument("--config", required=True)
    z.add_argument("--controls", required=True)
    z.set_defaults(func=cmd_certify)
    return p


def main(argv=None) -> int:
    level = os.environ.get("UARO_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "runs", None) is not None and args.runs < 1:
        print("error: --runs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
