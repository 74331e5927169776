"""Euler-Maruyama simulation and Monte Carlo cost estimators.

Paths are processed in fixed-size blocks of consecutive path indices.  Each
path draws its Brownian increments from its own counter-based stream (see
:mod:`diffquant.rng`), block boundaries do not depend on the worker count,
and reductions use exact summation, so estimates are bit-identical for any
``threads`` setting.

Drift and running cost are evaluated under the relaxed measure returned by
the policy (weight averages over atoms); no action is ever sampled.
Paths leaving the ball of radius ``truncation_radius`` are projected back
onto its sphere and the fraction of projected steps is reported.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .errors import ConfigError, MaxTimeExceeded, NumericalBlowup
from .model import Box, ControlModel, constant_value, relaxed_average
from .policy import Policy, policy_id

logger = logging.getLogger(__name__)

__all__ = [
    "SimConfig", "StoppingRule", "Path", "CostReport",
    "simulate_path", "mc_finite_horizon", "mc_discounted", "mc_ergodic", "mc_exit",
    "resolve_threads",
]

CSV_FIELDS = ("criterion", "estimate", "std_error", "n_paths", "dt", "seed", "policy_id", "model_id")


def resolve_threads(threads: Optional[int] = None) -> int:
    """Explicit value, else ``DIFFQUANT_THREADS``, else 1."""
    if threads is None:
        threads = int(os.environ.get("DIFFQUANT_THREADS", "1") or 1)
    return max(1, int(threads))


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo settings.

    ``noise_substeps`` builds each increment from that many base-resolution
    normals, which lets runs at different ``dt`` share a Brownian path.
    ``block_size`` bounds memory and sets the unit of parallel work; results
    do not depend on it or on ``threads``.
    """

    dt: float
    n_paths: int
    seed: int = 0
    truncation_radius: float = 100.0
    horizon: Optional[float] = None
    max_time: float = 1000.0
    noise_substeps: int = 1
    block_size: int = 1 << 17
    threads: Optional[int] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive", "mc.dt")
        if int(self.n_paths) < 1:
            raise ConfigError("n_paths must be >= 1", "mc.n_paths")
        if not self.truncation_radius > 0:
            raise ConfigError("truncation radius must be positive", "mc.radius")
        if int(self.noise_substeps) < 1 or int(self.block_size) < 1:
            raise ConfigError("noise_substeps and block_size must be >= 1", "mc")


@dataclass(frozen=True)
class StoppingRule:
    """Stop at a fixed ``horizon``, at the first exit from ``exit_domain``, or both."""

    horizon: Optional[float] = None
    exit_domain: Optional[Box] = None


@dataclass
class Path:
    times: np.ndarray
    states: np.ndarray
    mean_actions: np.ndarray
    atom_indices: Optional[np.ndarray]
    exited: bool = False


@dataclass
class CostReport:
    criterion: str
    estimate: float
    std_error: float
    n_paths: int
    dt: float
    seed: int = 0
    policy_id: str = ""
    model_id: str = ""
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> list:
        return [self.criterion, f"{self.estimate:.17g}", f"{self.std_error:.17g}",
                str(self.n_paths), f"{self.dt:.17g}", str(self.seed),
                self.policy_id, self.model_id]


# -- stepping machinery ------------------------------------------------------------


class _Dynamics:
    """Evaluates policy-averaged drift, cost, and discount for a batch.

    Constant coefficients are returned as broadcastable scalars, and the
    policy is not queried when no coefficient depends on ``u``.
    """

    def __init__(self, model: ControlModel, policy: Policy):
        if policy.action_grid.dim != model.dim_u:
            raise ConfigError("policy action dimension does not match the model")
        self.model = model
        self.policy = policy
        self.atoms = policy.action_grid.atoms
        consts = [constant_value(e) for e in model.drift]
        self.drift_const = None if any(c is None for c in consts) else np.array([consts])
        self.cost_const = constant_value(model.cost)
        self.disc_const = 0.0 if model.exit_discount is None else constant_value(model.exit_discount)
        self.const_sigma = model.sigma_at(np.zeros((1, model.dim_x))) \
            if model.sigma_is_constant else None
        exprs = list(model.drift) + [model.cost]
        if model.exit_discount is not None:
            exprs.append(model.exit_discount)
        u_names = set(model.u_names)
        self.needs_u = any(e.variables & u_names for e in exprs)

    def controls(self, t, X, force: bool = False):
        """``(atom_indices, None)`` for Dirac policies, else ``(None, weights)``."""
        if not (self.needs_u or force):
            return None
        idx = self.policy.dirac_indices(t, X)
        if idx is not None:
            return idx, None
        return None, self.policy.weights(t, X)

    def relaxed(self, fn, t, X, ctrl):
        if ctrl is None:
            return fn(X, np.broadcast_to(self.atoms[0], (X.shape[0], self.atoms.shape[1])), t)
        idx, W = ctrl
        if idx is not None:
            return fn(X, self.atoms[idx], t)
        return relaxed_average(fn, X, self.atoms, W, t)

    def drift(self, t, X, ctrl):
        if self.drift_const is not None:
            return self.drift_const
        return self.relaxed(self.model.drift_at, t, X, ctrl)

    def cost(self, t, X, ctrl):
        if self.cost_const is not None:
            return self.cost_const
        return self.relaxed(self.model.cost_at, t, X, ctrl)

    def discount(self, t, X, ctrl):
        if self.disc_const is not None:
            return self.disc_const
        return self.relaxed(lambda x, u, _t: self.model.exit_discount_at(x, u), t, X, ctrl)

    def mean_action(self, ctrl):
        idx, W = ctrl
        if idx is not None:
            return self.atoms[idx]
        return W @ self.atoms

    def sigma(self, X):
        """sigma as (1, d, d) when constant, else (N, d, d)."""
        return self.const_sigma if self.const_sigma is not None else self.model.sigma_at(X)


class _Block:
    """Mutable state of one block of paths."""

    def __init__(self, dyn: _Dynamics, x0, cfg: SimConfig, path_ids: np.ndarray):
        self.dyn = dyn
        self.cfg = cfg
        self.keys = rng.path_keys(cfg.seed, path_ids)
        self.X = np.tile(np.asarray(x0, dtype=float).reshape(1, -1), (path_ids.shape[0], 1))
        self.reflected = 0
        self.steps = 0
        self.inside = None
        self.n_outside = 0

    def advance(self, step: int, t: float, ctrl, X=None, keys=None, alive=None,
                n_alive=None, box: Optional[Box] = None):
        """One Euler step from ``X`` (defaults to the block state); returns the new state.

        Rows with ``alive == 0`` stay put and are ignored by the blowup and
        reflection bookkeeping.  With ``box`` set, ``self.inside`` and
        ``self.n_outside`` describe the new state relative to the open box.
        """
        X = self.X if X is None else X
        keys = self.keys if keys is None else keys
        B = np.atleast_2d(self.dyn.drift(t, X, ctrl))
        bounds = None if box is None else (box.low_array, box.high_array)
        Xn, norms, top, self.inside, self.n_outside = rng.euler_step(
            X, B, self.dyn.sigma(X), keys, step, self.cfg.noise_substeps, self.cfg.dt,
            alive, bounds)
        R = self.cfg.truncation_radius
        if not top <= 10.0 * R:
            bad = np.flatnonzero(~(norms <= 10.0 * R))[0]
            raise NumericalBlowup(f"|X| reached {norms[bad]!r} > 10R at t={t + self.cfg.dt:g}")
        if top > R:
            out = norms > R
            Xn[out] *= (R / norms[out])[:, None]
            self.reflected += int(out.sum())
        self.steps += X.shape[0] if n_alive is None else n_alive
        return Xn


def _blocks(cfg: SimConfig):
    n = int(cfg.n_paths)
    b = int(cfg.block_size)
    return [np.arange(s, min(n, s + b), dtype=np.int64) for s in range(0, n, b)]


def _run_blocks(fn, cfg: SimConfig):
    blocks = _blocks(cfg)
    threads = resolve_threads(cfg.threads)
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, blocks))
    return [fn(b) for b in blocks]


def _mean_se(values: np.ndarray):
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    mean = math.fsum(values) / n
    if n < 2 or np.all(values == values[0]):
        if n >= 1 and np.all(values == values[0]):
            mean = float(values[0])
        return mean, 0.0
    var = math.fsum((values - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


def _report(criterion, values, cfg, model, policy, blocks_meta, extra=None):
    est, se = _mean_se(values)
    reflected = sum(m[0] for m in blocks_meta)
    steps = sum(m[1] for m in blocks_meta)
    frac = reflected / steps if steps else 0.0
    if frac > 1e-4:
        logger.warning("%s: %.2e of steps were projected back to radius %g",
                       criterion, frac, cfg.truncation_radius)
    meta = {"reflected_fraction": frac}
    if extra:
        meta.update(extra)
    return CostReport(criterion, est, se, int(cfg.n_paths), float(cfg.dt), int(cfg.seed),
                      policy_id(policy), model.name, meta)


# -- single path -----------------------------------------------------------------


def simulate_path(model: ControlModel, policy: Policy, x0, config: SimConfig,
                  stop: Optional[StoppingRule] = None, path_index: int = 0) -> Path:
    """Simulate one path of ``dX = b(X, v(t, X)) dt + sigma(X) dW``.

    The path uses stream ``path_index`` of ``config.seed``.  It stops at the
    horizon, or at the first grid time outside the exit domain, whichever
    comes first (``config.max_time`` caps exit-only rules).
    """
    stop = stop or StoppingRule(horizon=config.horizon)
    if stop.horizon is None and stop.exit_domain is None:
        raise ConfigError("stopping rule needs a horizon or an exit domain", "stop")
    dyn = _Dynamics(model, policy)
    blk = _Block(dyn, x0, config, np.array([path_index], dtype=np.int64))
    dt = config.dt
    if stop.horizon is not None:
        n_max = int(round(stop.horizon / dt))
    else:
        n_max = int(math.ceil(config.max_time / dt))
    times, states, acts, idxs = [0.0], [blk.X[0].copy()], [], []
    exited = False
    for k in range(n_max):
        t = k * dt
        ctrl = dyn.controls(t, blk.X, force=True)
        acts.append(dyn.mean_action(ctrl)[0])
        idxs.append(None if ctrl[0] is None else int(ctrl[0][0]))
        blk.X = blk.advance(k, t, ctrl)
        times.append((k + 1) * dt)
        states.append(blk.X[0].copy())
        if stop.exit_domain is not None and not stop.exit_domain.interior_rows(blk.X)[0]:
            exited = True
            break
    if stop.horizon is None and not exited:
        raise MaxTimeExceeded(f"no exit within {config.max_time:g}")
    atom_idx = None if any(i is None for i in idxs) else np.array(idxs, dtype=np.int64)
    return Path(np.array(times), np.array(states),
                np.array(acts).reshape(len(acts), model.dim_u), atom_idx, exited)


# -- estimators ---------------------------------------------------------------------


def mc_finite_horizon(model: ControlModel, policy: Policy, x0, config: SimConfig) -> CostReport:
    """Estimate ``E[int_0^T c dt + H(X_T)]`` with a left-endpoint Riemann sum.

    The step is adjusted to ``T / round(T / dt)`` so the grid ends at ``T``.
    """
    T = config.horizon if config.horizon is not None else model.horizon_T
    if T is None:
        raise ConfigError("finite-horizon estimate needs a horizon", "model.horizon")
    n = int(round(T / config.dt))
    dt = T / n if n > 0 else config.dt
    cfg = config if dt == config.dt else _replace(config, dt=dt)
    dyn = _Dynamics(model, policy)

    def run(ids):
        blk = _Block(dyn, x0, cfg, ids)
        acc = np.zeros(ids.shape[0])
        for k in range(n):
            t = k * dt
            ctrl = dyn.controls(t, blk.X)
            acc += dyn.cost(t, blk.X, ctrl)
            blk.X = blk.advance(k, t, ctrl)
        return acc * dt + model.terminal_at(blk.X), (blk.reflected, blk.steps)

    res = _run_blocks(run, cfg)
    values = np.concatenate([r[0] for r in res])
    return _report("finite_horizon", values, cfg, model, policy, [r[1] for r in res],
                   {"horizon": T, "n_steps": n})


def mc_discounted(model: ControlModel, policy: Policy, x0, config: SimConfig,
                  t_max: float) -> CostReport:
    """Estimate ``E[int_0^inf e^{-alpha t} c dt]`` truncated at ``t_max``.

    Each step's discount weight is integrated exactly,
    ``e^{-alpha t_k} (1 - e^{-alpha dt}) / alpha``.  The truncation bias is at
    most ``e^{-alpha t_max} sup c / alpha``; the metadata reports this bound
    with ``sup c`` replaced by the largest cost seen.
    """
    alpha = model.alpha
    if alpha is None:
        raise ConfigError("discounted estimate needs alpha", "model.alpha")
    dt = config.dt
    n = int(math.ceil(t_max / dt - 1e-9))
    step_w = -math.expm1(-alpha * dt) / alpha
    dyn = _Dynamics(model, policy)

    def run(ids):
        blk = _Block(dyn, x0, config, ids)
        acc = np.zeros(ids.shape[0])
        cmax = 0.0
        for k in range(n):
            t = k * dt
            ctrl = dyn.controls(t, blk.X)
            c = dyn.cost(t, blk.X, ctrl)
            cmax = max(cmax, float(np.max(c)))
            acc += (math.exp(-alpha * t) * step_w) * c
            blk.X = blk.advance(k, t, ctrl)
        return acc, (blk.reflected, blk.steps), cmax

    res = _run_blocks(run, config)
    values = np.concatenate([r[0] for r in res])
    cmax = max(r[2] for r in res)
    t_end = n * dt
    return _report("discounted", values, config, model, policy, [r[1] for r in res],
                   {"t_max": t_end, "alpha": alpha,
                    "tail_bound": math.exp(-alpha * t_end) * cmax / alpha})


def mc_ergodic(model: ControlModel, policy: Policy, x0, config: SimConfig,
               burn_in: float, T_avg: float, n_batches: int = 20) -> CostReport:
    """Time average of ``c`` over ``[burn_in, burn_in + T_avg]``, averaged over paths.

    The standard error comes from batch means over contiguous groups of paths
    (or over path-by-time-window cells when there are fewer paths than batches).
    """
    if not policy.stationary:
        raise ConfigError("ergodic estimate needs a stationary policy", "policy")
    dt = config.dt
    n_burn = int(round(burn_in / dt))
    n_avg = int(round(T_avg / dt))
    if n_avg < 1:
        raise ConfigError("averaging window shorter than one step", "mc.t_avg")
    n_win = min(10, n_avg)
    win_of = np.minimum((np.arange(n_avg) * n_win) // n_avg, n_win - 1)
    win_len = np.bincount(win_of, minlength=n_win)
    dyn = _Dynamics(model, policy)

    def run(ids):
        blk = _Block(dyn, x0, config, ids)
        sums = np.zeros((ids.shape[0], n_win))
        for k in range(n_burn + n_avg):
            t = k * dt
            ctrl = dyn.controls(t, blk.X)
            if k >= n_burn:
                sums[:, win_of[k - n_burn]] += dyn.cost(t, blk.X, ctrl)
            if k < n_burn + n_avg - 1:
                blk.X = blk.advance(k, t, ctrl)
        return sums, (blk.reflected, blk.steps)

    res = _run_blocks(run, config)
    sums = np.concatenate([r[0] for r in res])
    per_path = sums.sum(axis=1) / n_avg
    est = math.fsum(sums.reshape(-1)) / (n_avg * sums.shape[0])
    if np.all(per_path == per_path[0]) and np.all(sums / win_len == (sums / win_len)[0, 0]):
        est, se = float(per_path[0]), 0.0
    elif sums.shape[0] >= n_batches:
        groups = np.array_split(per_path, n_batches)
        bm = np.array([math.fsum(g) / len(g) for g in groups])
        se = float(np.std(bm, ddof=1) / math.sqrt(n_batches))
    else:
        cells = (sums / win_len).reshape(-1)
        se = float(np.std(cells, ddof=1) / math.sqrt(cells.size)) if cells.size > 1 else 0.0
    rep = _report("ergodic", per_path, config, model, policy, [r[1] for r in res],
                  {"burn_in": n_burn * dt, "T_avg": n_avg * dt})
    rep.estimate, rep.std_error = est, se
    return rep


def _exit_fraction(box: Box, Xp: np.ndarray, Xn: np.ndarray) -> np.ndarray:
    lo, hi = box.low_array, box.high_array
    step = Xn - Xp
    theta = np.ones(Xp.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(Xn >= hi, (hi - Xp) / step, 1.0)
        dn = np.where(Xn <= lo, (lo - Xp) / step, 1.0)
    theta = np.minimum(theta, np.min(np.minimum(up, dn), axis=1))
    return np.clip(np.nan_to_num(theta, nan=1.0), 0.0, 1.0)


def mc_exit(model: ControlModel, policy: Policy, x0, config: SimConfig) -> CostReport:
    """Estimate the discounted cost up to the first exit from the model's domain.

    Exit is detected at the first grid time outside the open domain (no
    Brownian-bridge correction, so the estimate carries an O(sqrt(dt)) bias).
    The boundary payoff ``h`` is taken where the last step crosses the
    boundary, discounted by ``exp(-sum delta dt)`` accumulated before it.
    """
    box = model.exit_domain
    if box is None:
        raise ConfigError("exit estimate needs an exit domain", "model.exit")
    if not box.interior_rows(np.asarray(x0, dtype=float).reshape(1, -1))[0]:
        raise ConfigError("x0 must lie inside the exit domain", "criterion.x0")
    dt = config.dt
    n_max = int(math.ceil(config.max_time / dt))
    dyn = _Dynamics(model, policy)

    def run(ids):
        blk = _Block(dyn, x0, config, ids)
        n = ids.shape[0]
        value = np.zeros(n)
        active = np.arange(n)
        alive = np.ones(n, dtype=np.uint8)
        n_alive = n
        X, keys = blk.X, blk.keys
        # with constant cost and no discounting the running cost is c * steps * dt
        simple = dyn.cost_const is not None and dyn.disc_const == 0.0
        disc = np.ones(n)
        run_cost = np.zeros(n)
        for k in range(n_max):
            t = k * dt
            ctrl = dyn.controls(t, X)
            if not simple:
                run_cost += disc * dyn.cost(t, X, ctrl)
                delta = dyn.discount(t, X, ctrl)
            Xn = blk.advance(k, t, ctrl, X, keys, alive, n_alive, box)
            if not simple and not (isinstance(delta, float) and delta == 0.0):
                disc = disc * np.exp(-delta * dt)
            if blk.n_outside:
                gone = np.flatnonzero(blk.inside < alive)
                Xp, Xg = X[gone], Xn[gone]
                Xe = Xp + _exit_fraction(box, Xp, Xg)[:, None] * (Xg - Xp)
                if simple:
                    acc = dyn.cost_const * float(k + 1) * dt + model.exit_terminal_at(Xe)
                else:
                    acc = run_cost[gone] * dt + disc[gone] * model.exit_terminal_at(Xe)
                value[active[gone]] = acc
                alive[gone] = 0
                n_alive -= blk.n_outside
                if n_alive == 0:
                    break
                if n_alive < 0.5 * X.shape[0]:
                    keep = np.flatnonzero(alive)
                    active, Xn, keys = active[keep], Xn[keep], keys[keep]
                    if not simple:
                        disc, run_cost = disc[keep], run_cost[keep]
                    alive = np.ones(n_alive, dtype=np.uint8)
            X = Xn
        if n_alive:
            raise MaxTimeExceeded(f"{n_alive} paths did not exit within t={config.max_time:g}")
        return value, (blk.reflected, blk.steps)

    res = _run_blocks(run, config)
    values = np.concatenate([r[0] for r in res])
    return _report("exit", values, config, model, policy, [r[1] for r in res])


def _replace(cfg: SimConfig, **kw) -> SimConfig:
    data = asdict(cfg)
    data.update(kw)
    return SimConfig(**data)
