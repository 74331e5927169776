"""Near-optimality studies: cost of quantized policies against a fine reference.

Each study solves the HJB problem once at the finest configured resolution
(``schedule.reference_n`` action atoms per unit, or ``schedule.reference_dt``
for the time study), quantizes the optimal policy at every coarser schedule
entry, evaluates it by PDE (and by Monte Carlo when ``[mc]`` is present),
and records

    gap = cost_pde - reference

together with the pseudo-distance to the reference policy.  Action grids
of the schedule are sublattices of the reference grid, so every quantized
policy is admissible for the reference problem and the gap is nonnegative
up to solver tolerance.

CSV output has a fixed header and 17-significant-digit doubles.  The first
line is a ``#`` comment carrying the generation time and wall-clock runtime;
everything after it depends only on the configuration.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from . import pde
from .borkar import pseudo_distance
from .config import ExperimentConfig
from .errors import ConfigError
from .grid import Grid
from .policy import (FiniteActionPolicy, SimplexGrid, build_action_grid, discretize_policy_time,
                     policy_id, quantize_policy_actions, quantize_policy_space)
from .simulate import mc_discounted, mc_ergodic, mc_exit, mc_finite_horizon

logger = logging.getLogger(__name__)

__all__ = ["StudyRow", "StudyResult", "run_study", "run_discounted_study", "run_ergodic_study",
           "run_exit_study", "run_finite_horizon_study", "GAP_TOL", "STUDY_FIELDS"]

GAP_TOL = 1e-9
STUDY_FIELDS = ("kind", "resolution", "cost_pde", "cost_mc", "mc_se", "reference", "gap",
                "pseudo_distance")


@dataclass
class StudyRow:
    kind: str  # "action" (n), "space" (m), or "time" (dt)
    resolution: float
    cost_pde: float
    cost_mc: float
    mc_se: float
    reference: float
    gap: float
    pseudo_distance: float
    runtime: float = 0.0
    policy_id: str = ""

    def csv_row(self) -> list:
        res = str(int(self.resolution)) if self.kind != "time" else f"{self.resolution:.17g}"
        return [self.kind, res] + [f"{getattr(self, k):.17g}" for k in STUDY_FIELDS[2:]]


@dataclass
class StudyResult:
    criterion: str
    x0: tuple
    reference: float
    reference_policy_id: str
    rows: list = field(default_factory=list)
    runtime: float = 0.0
    generated: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def gaps(self) -> np.ndarray:
        return np.array([r.gap for r in self.rows])

    def rows_of(self, kind: str) -> list:
        return [r for r in self.rows if r.kind == kind]

    def gap_violations(self, tol: float = GAP_TOL) -> list:
        """Rows whose gap is below ``-tol (1 + |reference|)``."""
        floor = -tol * (1.0 + abs(self.reference))
        return [r for r in self.rows if r.gap < floor]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# generated {self.generated} runtime {self.runtime:.3f}s\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STUDY_FIELDS)
        for r in self.rows:
            w.writerow(r.csv_row())
        return buf.getvalue()

    def to_dict(self) -> dict:
        """JSON-ready dict; NaN (no Monte Carlo) becomes ``None``."""
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v

        out = asdict(self)
        out["x0"] = list(self.x0)
        out["rows"] = [{k: clean(v) for k, v in r.items()} for r in out["rows"]]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)


# -- helpers -------------------------------------------------------------------------


def _mc_enabled(cfg: ExperimentConfig) -> bool:
    return cfg.mc is not None and cfg.mc.enabled


def _mc(cfg: ExperimentConfig, policy) -> tuple:
    if not _mc_enabled(cfg):
        return math.nan, math.nan
    sim = cfg.sim_config()
    kind = cfg.criterion
    if kind == "discounted":
        rep = mc_discounted(cfg.model, policy, cfg.x0, sim, cfg.mc.t_max)
    elif kind == "ergodic":
        rep = mc_ergodic(cfg.model, policy, cfg.x0, sim, cfg.mc.burn_in, cfg.mc.t_avg)
    elif kind == "exit":
        rep = mc_exit(cfg.model, policy, cfg.x0, sim)
    else:
        rep = mc_finite_horizon(cfg.model, policy, cfg.x0, sim)
    return rep.estimate, rep.std_error


def _require(cfg: ExperimentConfig, kind: str) -> None:
    if cfg.criterion != kind:
        raise ConfigError(f"study needs criterion.kind = {kind!r}, got {cfg.criterion!r}",
                          "criterion.kind")


def _cell_grid(cfg: ExperimentConfig, grid: Grid) -> Grid:
    return Grid.uniform(grid.low, grid.high, counts=[c + 1 for c in cfg.schedule.state_cells])


def _finish(result: StudyResult, started: float) -> StudyResult:
    result.runtime = time.perf_counter() - started
    result.generated = datetime.now(timezone.utc).isoformat(timespec="seconds")
    bad = result.gap_violations()
    if bad:
        logger.warning("%d row(s) with negative gap beyond tolerance: %s", len(bad),
                       [(r.kind, r.resolution, r.gap) for r in bad])
    return result


def _stationary_study(cfg: ExperimentConfig, solve_hjb, evaluate, grid: Grid) -> StudyResult:
    """Shared driver for the discounted, ergodic, and exit studies.

    ``solve_hjb(action_grid)`` returns ``(reference_value, policy)``;
    ``evaluate(policy)`` returns the PDE cost at ``x0``.
    """
    started = time.perf_counter()
    sched = cfg.schedule
    if not sched.n:
        raise ConfigError("study needs a nonempty schedule.n", "schedule.n")
    box = cfg.model.action
    ref_grid = build_action_grid(box, sched.reference_n)
    ref_value, v_star = solve_hjb(ref_grid)
    bank = cfg.test_bank(grid)
    result = StudyResult(cfg.criterion, cfg.x0, ref_value, policy_id(v_star),
                         metadata={"reference_n": sched.reference_n,
                                   "reference_atoms": ref_grid.size})

    def add(kind, resolution, policy):
        t0 = time.perf_counter()
        cost = evaluate(policy)
        mc, se = _mc(cfg, policy)
        pd = pseudo_distance(policy, v_star, bank)
        result.rows.append(StudyRow(kind, resolution, cost, mc, se, ref_value, cost - ref_value,
                                    pd, time.perf_counter() - t0, policy_id(policy)))
        logger.info("%s %s: cost %.10g gap %.3g", kind, resolution, cost, cost - ref_value)

    v_n = None
    for n in sched.n:
        v_n = quantize_policy_actions(v_star, build_action_grid(box, n))
        add("action", n, v_n)
    if sched.m:
        cells = _cell_grid(cfg, grid)
        for m in sched.m:
            add("space", m, quantize_policy_space(v_n, cells, SimplexGrid(v_n.action_grid, m)))
    return _finish(result, started)


# -- studies ---------------------------------------------------------------------------


def run_discounted_study(config: ExperimentConfig) -> StudyResult:
    """Finite-action and piecewise-constant policies for the discounted cost."""
    _require(config, "discounted")
    model, grid, x0 = config.model, config.grid, config.x0

    def solve_hjb(ag):
        rep, pol = pde.solve_hjb_discounted(model, ag, grid)
        return rep.value_at(x0), pol

    def evaluate(policy):
        return pde.solve_discounted(model, policy, grid).value_at(x0)

    return _stationary_study(config, solve_hjb, evaluate, grid)


def run_ergodic_study(config: ExperimentConfig) -> StudyResult:
    """Same as the discounted study with ``rho`` from the normalized Poisson equation.

    The configured model should satisfy a Lyapunov condition so that every
    stationary policy is stable.
    """
    _require(config, "ergodic")
    model, grid = config.model, config.grid

    def solve_hjb(ag):
        rep, pol = pde.solve_hjb_ergodic(model, ag, grid)
        return float(rep.scalar_out), pol

    def evaluate(policy):
        return float(pde.solve_ergodic(model, policy, grid).scalar_out)

    return _stationary_study(config, solve_hjb, evaluate, grid)


def run_exit_study(config: ExperimentConfig) -> StudyResult:
    _require(config, "exit")
    model, grid, x0 = config.model, config.grid, config.x0

    def solve_hjb(ag):
        rep, pol = pde.solve_hjb_exit(model, ag, grid)
        return rep.value_at(x0), pol

    def evaluate(policy):
        return pde.solve_exit(model, policy, grid).value_at(x0)

    return _stationary_study(config, solve_hjb, evaluate, grid)


def run_finite_horizon_study(config: ExperimentConfig) -> StudyResult:
    """Time-discretized Markov policies for the finite-horizon cost.

    The reference is the fully converged implicit HJB solve at
    ``reference_dt``; each schedule ``dt`` freezes that policy on intervals of
    length ``dt`` and is evaluated with the same implicit scheme at
    ``reference_dt``, so the reference is optimal among everything compared.
    """
    _require(config, "finite_horizon")
    started = time.perf_counter()
    model, grid, x0, sched = config.model, config.grid, config.x0, config.schedule
    if not sched.dt:
        raise ConfigError("study needs a nonempty schedule.dt", "schedule.dt")
    if sched.reference_n is None:
        raise ConfigError("finite-horizon study needs schedule.reference_n", "schedule.reference_n")
    T = float(model.horizon_T)
    ag = build_action_grid(model.action, sched.reference_n)
    ref = pde.solve_hjb_parabolic(model, ag, grid, sched.reference_dt, refresh=None)
    ref_value = ref.value_at(x0)
    v_star = ref.policy
    bank = config.test_bank(grid)
    result = StudyResult("finite_horizon", x0, ref_value,
                         "" if v_star is None else policy_id(v_star),
                         metadata={"reference_dt": sched.reference_dt, "reference_n": sched.reference_n,
                                   "horizon": T})
    for dt in sched.dt:
        t0 = time.perf_counter()
        if v_star is None:
            # zero horizon: every policy pays H(x0)
            pol = FiniteActionPolicy.constant(ag, 0)
            cost, pd = ref_value, 0.0
        else:
            pol = discretize_policy_time(v_star, dt, T)
            cost = pde.solve_parabolic(model, pol, grid, sched.reference_dt).value_at(x0)
            pd = pseudo_distance(pol, v_star, bank, T=T)
        mc, se = _mc(config, pol)
        result.rows.append(StudyRow("time", dt, cost, mc, se, ref_value, cost - ref_value, pd,
                                    time.perf_counter() - t0, policy_id(pol)))
        logger.info("dt %g: cost %.10g gap %.3g", dt, cost, cost - ref_value)
    return _finish(result, started)


STUDIES = {
    "discounted": run_discounted_study,
    "ergodic": run_ergodic_study,
    "exit": run_exit_study,
    "finite_horizon": run_finite_horizon_study,
}


def run_study(config: ExperimentConfig, kind: Optional[str] = None) -> StudyResult:
    kind = kind or config.criterion
    if kind not in STUDIES:
        raise ConfigError(f"unknown study kind {kind!r}", "criterion.kind")
    return STUDIES[kind](config)
