"""Finite-difference solvers for the Poisson and HJB equations of each criterion.

The generator ``L_u f = trace(a grad^2 f) + b . grad f`` is discretized on a
:class:`~diffquant.grid.Grid` as a monotone scheme:

* second derivatives by central differences, with mixed derivatives by the
  seven-point stencil whose diagonal pair follows the sign of ``a12``;
* drift by upwind differences chosen per component;
* Neumann faces by mirroring the missing neighbor, with the normal drift
  component dropped on the face (a reflecting wall);
* Dirichlet nodes as identity rows (the solvers eliminate them, so boundary
  values and the ergodic gauge ``V(0) = 0`` come back exact).

The diagonal is minus the sum of the off-diagonal entries, so constants lie
in the kernel exactly.  Any negative off-diagonal entry raises
:class:`MonotonicityViolation`.

Under a relaxed control the operator is the weight average of the per-atom
operators, which keeps it linear in the measure.

On a bounded grid with reflecting walls every discrete function is
admissible, so uniqueness classes from the whole-space theory have no
discrete counterpart; strongly non-monotone costs may need a larger box.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import (ConfigError, MonotonicityViolation, NoConvergence, NoPositiveRoot,
                     SolverDivergence)
from .grid import Dirichlet, DiscreteField, Grid
from .model import ControlModel, relaxed_average
from .policy import ActionGrid, NodalPolicy, Policy, TimeCellPolicy

logger = logging.getLogger(__name__)

__all__ = [
    "SolveReport", "ParabolicResult", "discretize_generator",
    "solve_discounted", "solve_exit", "solve_ergodic", "vanishing_discount",
    "solve_hjb_discounted", "solve_hjb_exit", "solve_hjb_ergodic",
    "solve_hjb_parabolic", "solve_parabolic", "riccati_oracle",
]

RESIDUAL_TOL = 1e-10
TIE_TOL = 1e-12


@dataclass
class SolveReport:
    residual_inf_norm: float
    iterations: int
    field: DiscreteField
    scalar_out: Optional[float] = None
    history: list = field(default_factory=list, repr=False)

    def value_at(self, x) -> float:
        return self.field.at(x)


@dataclass
class ParabolicResult:
    """Backward solve on the time levels ``times``; ``values[j]`` is the field at ``times[j]``."""

    grid: Grid
    times: np.ndarray
    values: np.ndarray
    residual_inf_norm: float
    iterations: int
    policy: Optional[TimeCellPolicy] = None

    @property
    def fields(self) -> list:
        return [DiscreteField(self.grid, v) for v in self.values]

    def value_at(self, x, level: int = 0) -> float:
        return self.grid.value_at(self.values[level], x)


# -- node data ---------------------------------------------------------------------


class _Measure:
    """Per-node control: atom indices (Dirac) or a weight matrix."""

    def __init__(self, atoms: np.ndarray, idx=None, W=None):
        self.atoms = atoms
        self.idx = idx
        self.W = W

    def average(self, fn, X, t):
        if self.idx is not None:
            return fn(X, self.atoms[self.idx], t)
        return relaxed_average(fn, X, self.atoms, self.W, t)

    def upwind_parts(self, model: ControlModel, X, t):
        """Weight averages of the positive and negative parts of each drift component."""
        if self.idx is not None:
            B = model.drift_at(X, self.atoms[self.idx], t)
            return np.maximum(B, 0.0), np.maximum(-B, 0.0)
        rows, cols = np.nonzero(self.W)
        B = model.drift_at(X[rows], self.atoms[cols], t)
        w = self.W[rows, cols][:, None]
        Bp = np.zeros((X.shape[0], model.dim_x))
        Bm = np.zeros_like(Bp)
        np.add.at(Bp, rows, w * np.maximum(B, 0.0))
        np.add.at(Bm, rows, w * np.maximum(-B, 0.0))
        return Bp, Bm


def _measure(model: ControlModel, control, nodes: np.ndarray, t: float) -> _Measure:
    if isinstance(control, Policy):
        if control.action_grid.dim != model.dim_u:
            raise ConfigError("policy action dimension does not match the model")
        atoms = control.action_grid.atoms
        idx = control.dirac_indices(t, nodes)
        if idx is not None:
            return _Measure(atoms, idx=idx)
        return _Measure(atoms, W=np.asarray(control.weights(t, nodes), dtype=float))
    action = np.asarray(control, dtype=float).reshape(1, -1)
    if action.shape[1] != model.dim_u:
        raise ConfigError("action dimension does not match the model")
    return _Measure(action, idx=np.zeros(nodes.shape[0], dtype=np.int64))


def _check_grid(grid: Grid, model: ControlModel) -> None:
    if grid.dim != model.dim_x:
        raise ConfigError("grid dimension must equal dim_x", "grid")
    if grid.dim > 2:
        raise ConfigError("PDE solves support dim_x <= 2", "grid")


def _dirichlet_values(grid: Grid, nodes: np.ndarray) -> np.ndarray:
    """Boundary data on Dirichlet nodes (first matching face in axis order), 0 elsewhere."""
    mi = grid.multi_index()
    top = np.array(grid.counts) - 1
    out = np.zeros(grid.size)
    done = np.zeros(grid.size, dtype=bool)
    env = {f"x{i + 1}": nodes[:, i] for i in range(grid.dim)}
    for ax, faces in enumerate(grid.bc):
        for side, bc in zip((0, top[ax]), faces):
            if isinstance(bc, Dirichlet):
                on = (mi[:, ax] == side) & ~done
                out[on] = np.broadcast_to(bc.value.evaluate(env), (grid.size,))[on]
                done |= on
    return out


def _neumann_face_mask(grid: Grid, mi: np.ndarray, ax: int) -> np.ndarray:
    top = grid.counts[ax] - 1
    lo_bc, hi_bc = grid.bc[ax]
    mask = np.zeros(grid.size, dtype=bool)
    if not isinstance(lo_bc, Dirichlet):
        mask |= mi[:, ax] == 0
    if not isinstance(hi_bc, Dirichlet):
        mask |= mi[:, ax] == top
    return mask


class _Stencil:
    """Grid topology shared by every assembly on one grid."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self.nodes = grid.nodes()
        self.mi = grid.multi_index()
        self.top = np.array(grid.counts) - 1
        self.h = np.array(grid.spacing)
        self.dir_mask = grid.dirichlet_mask()
        self.rows = np.flatnonzero(~self.dir_mask)
        self.neumann = [_neumann_face_mask(grid, self.mi, ax) for ax in range(grid.dim)]

    def neighbor(self, shift) -> np.ndarray:
        """Flat index of ``node + shift`` with out-of-range indices mirrored."""
        j = self.mi + np.asarray(shift)
        j = np.where(j < 0, -j, j)
        j = np.where(j > self.top, 2 * self.top - j, j)
        return self.grid.ravel(j)

    def unit(self, ax: int, s: int) -> np.ndarray:
        e = np.zeros(self.grid.dim, dtype=np.int64)
        e[ax] = s
        return e

    def drift_masks(self, Bp, Bm):
        """Zero the normal drift on reflecting faces."""
        Bp = Bp.copy()
        Bm = Bm.copy()
        for ax in range(self.grid.dim):
            Bp[self.neumann[ax], ax] = 0.0
            Bm[self.neumann[ax], ax] = 0.0
        return Bp, Bm

    def assemble(self, A: np.ndarray, Bp: np.ndarray, Bm: np.ndarray) -> sp.csr_matrix:
        """Generator matrix; Dirichlet rows are left empty."""
        g = self.grid
        N, d = g.size, g.dim
        A = np.broadcast_to(A, (N, d, d))
        Bp, Bm = self.drift_masks(Bp, Bm)
        rows, cols, vals = [], [], []

        def add(shift, coef):
            rows.append(self.rows)
            cols.append(self.neighbor(shift)[self.rows])
            vals.append(np.broadcast_to(coef, (N,))[self.rows])

        for k in range(d):
            hk = self.h[k]
            cross = np.zeros(N)
            for l in range(d):
                if l != k:
                    cross = cross + np.abs(A[:, k, l]) / (hk * self.h[l])
            diff = A[:, k, k] / hk ** 2 - cross
            add(self.unit(k, 1), diff + Bp[:, k] / hk)
            add(self.unit(k, -1), diff + Bm[:, k] / hk)
        for k in range(d):
            for l in range(k + 1, d):
                a = A[:, k, l]
                c = np.abs(a) / (self.h[k] * self.h[l])
                pos = np.where(a > 0, c, 0.0)
                neg = np.where(a < 0, c, 0.0)
                ek, el = self.unit(k, 1), self.unit(l, 1)
                add(ek + el, pos)
                add(-ek - el, pos)
                add(ek - el, neg)
                add(-ek + el, neg)
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
        keep = v != 0.0
        off = sp.coo_matrix((v[keep], (r[keep], c[keep])), shape=(N, N)).tocsr()
        off.sum_duplicates()
        if off.nnz and off.data.min() < 0.0:
            scale = np.max(np.abs(off.data))
            bad_pos = np.flatnonzero(off.data < -1e-12 * scale)
            if bad_pos.size:
                row = int(np.searchsorted(off.indptr, bad_pos[0], side="right") - 1)
                raise MonotonicityViolation(row, self.nodes[row])
            off.data = np.maximum(off.data, 0.0)
        diag = -np.asarray(off.sum(axis=1)).reshape(-1)
        return (off + sp.diags(diag)).tocsr()

    def upwind_differences(self, V: np.ndarray):
        """Forward and backward differences per axis, zeroed where the scheme drops drift."""
        Dp = np.zeros((self.grid.size, self.grid.dim))
        Dm = np.zeros_like(Dp)
        for k in range(self.grid.dim):
            hk = self.h[k]
            fwd = (V[self.neighbor(self.unit(k, 1))] - V) / hk
            bwd = (V - V[self.neighbor(self.unit(k, -1))]) / hk
            fwd[self.mi[:, k] == self.top[k]] = 0.0
            bwd[self.mi[:, k] == 0] = 0.0
            fwd[self.neumann[k]] = 0.0
            bwd[self.neumann[k]] = 0.0
            Dp[:, k] = fwd
            Dm[:, k] = bwd
        return Dp, Dm


def _diffusion(model: ControlModel, nodes: np.ndarray) -> np.ndarray:
    if model.sigma_is_constant:
        return model.diffusion_at(nodes[:1], validate=True)
    return model.diffusion_at(nodes, validate=True)


def _generator(model: ControlModel, st: _Stencil, meas: _Measure, t: float) -> sp.csr_matrix:
    Bp, Bm = meas.upwind_parts(model, st.nodes, t)
    return st.assemble(_diffusion(model, st.nodes), Bp, Bm)


def discretize_generator(model: ControlModel, control, grid: Grid, t: float = 0.0) -> sp.csr_matrix:
    """Sparse monotone discretization of the generator under a policy or a fixed action.

    ``control`` is a :class:`Policy` (evaluated at time ``t`` on the nodes) or
    an action vector.  Rows of Dirichlet nodes are identity rows.
    """
    _check_grid(grid, model)
    st = _Stencil(grid)
    L = _generator(model, st, _measure(model, control, st.nodes, t), t)
    if st.dir_mask.any():
        L = L + sp.diags(st.dir_mask.astype(float))
    return L.tocsr()


# -- linear solves -------------------------------------------------------------------


def _solve(M: sp.spmatrix, rhs: np.ndarray, refine: int = 3):
    try:
        lu = splu(M.tocsc())
    except RuntimeError as exc:
        raise SolverDivergence(f"factorization failed: {exc}") from None
    x = lu.solve(rhs)
    res = np.inf
    for _ in range(refine + 1):
        if not np.all(np.isfinite(x)):
            raise SolverDivergence("non-finite solution")
        r = rhs - M @ x
        res = float(np.max(np.abs(r))) if r.size else 0.0
        if res <= RESIDUAL_TOL:
            break
        x = x + lu.solve(r)
    scale = 1.0 + float(np.max(np.abs(rhs))) if rhs.size else 1.0
    if res > 1e-8 * scale:
        raise SolverDivergence(f"residual {res:.3e} after refinement")
    return x, res


def _solve_fixed(M: sp.csr_matrix, rhs: np.ndarray, fixed: np.ndarray, values: np.ndarray,
                 rows: Optional[np.ndarray] = None):
    """Solve ``M x = rhs`` with ``x[fixed] = values`` exactly.

    The pinned unknowns are eliminated so they come back bit-exact instead of
    picking up round-off from the factorization.  ``fixed`` is a boolean mask
    over columns; ``rows`` selects the equations kept (default: the rows of
    the free unknowns).
    """
    free = ~fixed
    rows = free if rows is None else rows
    x = np.zeros(M.shape[1])
    x[fixed] = values
    Mf = M[rows]
    sub = Mf[:, free]
    r = rhs[rows] - Mf[:, fixed] @ values
    x[free], res = _solve(sub, r)
    return x, res


def _dirichlet_solve(M: sp.csr_matrix, rhs: np.ndarray, st: _Stencil):
    """Solve with Dirichlet nodes pinned to their boundary values."""
    if not st.dir_mask.any():
        return _solve(M, rhs)
    vals = _dirichlet_values(st.grid, st.nodes)[st.dir_mask]
    return _solve_fixed(M.tocsr(), rhs, st.dir_mask, vals)


def _interior_diag(st: _Stencil, values) -> sp.dia_matrix:
    v = np.broadcast_to(np.asarray(values, dtype=float), (st.grid.size,)).copy()
    v[st.dir_mask] = 0.0
    return sp.diags(v)


def _eval_discounted(model, st, meas, t, alpha):
    L = _generator(model, st, meas, t)
    c = meas.average(model.cost_at, st.nodes, t)
    return _dirichlet_solve(L - _interior_diag(st, alpha), -c, st)


def _eval_exit(model, st, meas, t):
    L = _generator(model, st, meas, t)
    c = meas.average(model.cost_at, st.nodes, t)
    delta = meas.average(lambda x, u, _t: model.exit_discount_at(x, u), st.nodes, t)
    return _dirichlet_solve(L - _interior_diag(st, delta), -c, st)


def _eval_ergodic(model, st, meas, t, origin):
    if st.dir_mask.any():
        raise ConfigError("ergodic solves need reflecting (Neumann) faces", "grid.bc")
    N = st.grid.size
    L = _generator(model, st, meas, t)
    c = meas.average(model.cost_at, st.nodes, t)
    # unknowns (V, rho): L V - rho = -c with V(origin) = 0 eliminated
    M = sp.hstack([L, sp.csr_matrix(-np.ones((N, 1)))]).tocsr()
    fixed = np.zeros(N + 1, dtype=bool)
    fixed[origin] = True
    x, res = _solve_fixed(M, -c, fixed, np.zeros(1), np.ones(N, dtype=bool))
    return x[:N], float(x[N]), res


def _model_alpha(model: ControlModel, alpha) -> float:
    a = model.alpha if alpha is None else alpha
    if a is None or not a > 0:
        raise ConfigError("discounted solve needs alpha > 0", "model.alpha")
    return float(a)


def solve_discounted(model: ControlModel, policy, grid: Grid, alpha: Optional[float] = None,
                     t: float = 0.0) -> SolveReport:
    """Solve ``(L_v - alpha) V = -c_v`` for the discounted cost of a stationary policy."""
    _check_grid(grid, model)
    st = _Stencil(grid)
    V, res = _eval_discounted(model, st, _measure(model, policy, st.nodes, t), t,
                              _model_alpha(model, alpha))
    return SolveReport(res, 1, DiscreteField(grid, V))


def _exit_grid(model: ControlModel, grid: Grid) -> Grid:
    box = model.exit_domain
    if box is None:
        raise ConfigError("exit solve needs an exit domain", "model.exit")
    if not (np.allclose(box.low, grid.low, atol=1e-12) and np.allclose(box.high, grid.high, atol=1e-12)):
        raise ConfigError("grid box must equal the exit domain", "grid")
    h = Dirichlet(model.exit_terminal)
    return grid.with_bc(tuple((h, h) for _ in range(grid.dim)))


def solve_exit(model: ControlModel, policy, grid: Grid, t: float = 0.0) -> SolveReport:
    """Solve ``L_v psi - delta_v psi + c_v = 0`` in the domain with ``psi = h`` on its boundary."""
    _check_grid(grid, model)
    st = _Stencil(_exit_grid(model, grid))
    psi, res = _eval_exit(model, st, _measure(model, policy, st.nodes, t), t)
    return SolveReport(res, 1, DiscreteField(st.grid, psi))


def solve_ergodic(model: ControlModel, policy, grid: Grid, t: float = 0.0) -> SolveReport:
    """Solve ``L_v V + c_v = rho`` with ``V(0) = 0``; ``scalar_out`` is ``rho``."""
    _check_grid(grid, model)
    st = _Stencil(grid)
    V, rho, res = _eval_ergodic(model, st, _measure(model, policy, st.nodes, t), t,
                                grid.origin_index())
    return SolveReport(res, 1, DiscreteField(grid, V), scalar_out=rho)


def vanishing_discount(model: ControlModel, policy, grid: Grid, alphas: Sequence[float]) -> list:
    """``alpha * V_alpha(0)`` for each discount rate (tends to the ergodic cost)."""
    origin = grid.origin_index()
    out = []
    for a in alphas:
        rep = solve_discounted(model, policy, grid, alpha=a)
        out.append(float(a) * float(rep.field.values[origin]))
    return out


# -- policy iteration ------------------------------------------------------------------


def _q_values(model, st, atoms, V, t, delta_weight: bool = False, chunk: int = 2_000_000):
    """``Q[n, i] = upwind(b(x_n, z_i)) . grad V + c(x_n, z_i) [- delta(x_n, z_i) V_n]``."""
    N, K = st.grid.size, atoms.shape[0]
    Dp, Dm = st.upwind_differences(V)
    Q = np.empty((N, K))
    step = max(1, chunk // max(N, 1))
    for s in range(0, K, step):
        e = min(K, s + step)
        m = e - s
        X = np.tile(st.nodes, (m, 1))
        U = np.repeat(atoms[s:e], N, axis=0)
        B = model.drift_at(X, U, t).reshape(m, N, -1)
        q = model.cost_at(X, U, t).reshape(m, N)
        q = q + np.sum(np.maximum(B, 0.0) * Dp - np.maximum(-B, 0.0) * Dm, axis=2)
        if delta_weight:
            q = q - model.exit_discount_at(X, U).reshape(m, N) * V
        Q[:, s:e] = q.T
    return Q


def _argmin_lowest(Q: np.ndarray) -> np.ndarray:
    qmin = Q.min(axis=1, keepdims=True)
    near = Q <= qmin + TIE_TOL * (1.0 + np.abs(qmin))
    return np.argmax(near, axis=1).astype(np.int64)


def _policy_iteration(model, grid, action_grid: ActionGrid, evaluate, delta_weight, t, max_iters,
                      grid_for_policy=None):
    st = _Stencil(grid)
    atoms = action_grid.atoms
    idx = np.zeros(grid.size, dtype=np.int64)
    history = []
    prev = None
    for it in range(1, max_iters + 1):
        V, extra, res = evaluate(st, _Measure(atoms, idx=idx))
        history.append((V.copy(), extra))
        new = _argmin_lowest(_q_values(model, st, atoms, V, t, delta_weight))
        small = prev is not None and np.max(np.abs(V - prev[0])) < 1e-10 and \
            (extra is None or abs(extra - prev[1]) < 1e-10)
        if np.array_equal(new, idx) or small:
            if not np.array_equal(new, idx):
                V, extra, res = evaluate(st, _Measure(atoms, idx=new))
                history.append((V.copy(), extra))
            policy = NodalPolicy(grid_for_policy or grid, action_grid, new, name="hjb")
            return V, extra, res, it, policy, history
        prev = (V, extra)
        idx = new
    raise NoConvergence(f"policy iteration did not converge in {max_iters} iterations")


def solve_hjb_discounted(model: ControlModel, action_grid: ActionGrid, grid: Grid,
                         alpha: Optional[float] = None, max_iters: int = 100):
    """Optimal discounted value over the finite action set by policy iteration.

    Starts from atom 0 everywhere and improves by the lowest-index near-argmin
    of ``b . grad V + c`` (upwinded as in the generator).  Stops when the policy
    repeats or the value changes by less than 1e-10.  Returns
    ``(SolveReport, NodalPolicy)``.
    """
    _check_grid(grid, model)
    a = _model_alpha(model, alpha)

    def evaluate(st, meas):
        V, res = _eval_discounted(model, st, meas, 0.0, a)
        return V, None, res

    V, _, res, it, pol, hist = _policy_iteration(model, grid, action_grid, evaluate, False, 0.0,
                                                 max_iters)
    return SolveReport(res, it, DiscreteField(grid, V), history=[h[0] for h in hist]), pol


def solve_hjb_exit(model: ControlModel, action_grid: ActionGrid, grid: Grid, max_iters: int = 100):
    """Optimal exit-time value by policy iteration; returns ``(SolveReport, NodalPolicy)``."""
    _check_grid(grid, model)
    egrid = _exit_grid(model, grid)

    def evaluate(st, meas):
        V, res = _eval_exit(model, st, meas, 0.0)
        return V, None, res

    V, _, res, it, pol, hist = _policy_iteration(model, egrid, action_grid, evaluate, True, 0.0,
                                                 max_iters)
    return SolveReport(res, it, DiscreteField(egrid, V), history=[h[0] for h in hist]), pol


def solve_hjb_ergodic(model: ControlModel, action_grid: ActionGrid, grid: Grid, max_iters: int = 100):
    """Optimal ergodic cost by policy iteration on the normalized Poisson equation.

    ``scalar_out`` of the report is the optimal ``rho``.  Returns ``(SolveReport, NodalPolicy)``.
    """
    _check_grid(grid, model)
    origin = grid.origin_index()

    def evaluate(st, meas):
        return _eval_ergodic(model, st, meas, 0.0, origin)

    V, rho, res, it, pol, hist = _policy_iteration(model, grid, action_grid, evaluate, False, 0.0,
                                                   max_iters)
    return (SolveReport(res, it, DiscreteField(grid, V), scalar_out=rho,
                        history=[h[1] for h in hist]), pol)


# -- parabolic ------------------------------------------------------------------------


def _time_levels(horizon: float, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ConfigError("time step must be positive", "schedule.dt")
    if horizon < 0:
        raise ConfigError("horizon must be nonnegative", "model.horizon")
    if horizon == 0:
        return np.zeros(1)
    n = max(1, int(math.ceil(horizon / dt - 1e-9)))
    return np.minimum(np.arange(n + 1) * dt, horizon)


def _model_horizon(model: ControlModel, horizon) -> float:
    T = model.horizon_T if horizon is None else horizon
    if T is None:
        raise ConfigError("finite-horizon solve needs a horizon", "model.horizon")
    return float(T)


def _terminal(model: ControlModel, st: _Stencil) -> np.ndarray:
    H = model.terminal_at(st.nodes)
    if st.dir_mask.any():
        H = H.copy()
        H[st.dir_mask] = _dirichlet_values(st.grid, st.nodes)[st.dir_mask]
    return H


def _implicit_step(model, st, meas, t, tau, nxt):
    L = _generator(model, st, meas, t)
    c = meas.average(model.cost_at, st.nodes, t)
    M = (sp.identity(st.grid.size, format="csr") - tau * L).tocsr()
    return _dirichlet_solve(M, nxt + tau * c, st)


def solve_hjb_parabolic(model: ControlModel, action_grid: ActionGrid, grid: Grid, dt: float,
                        horizon: Optional[float] = None, refresh: Optional[int] = 1,
                        max_refresh: int = 50) -> ParabolicResult:
    """Backward implicit Euler for ``psi_t + min_z [L_z psi + c] = 0``, ``psi(T) = H``.

    On each interval ``[t_j, t_{j+1})`` the action is first frozen at the
    argmin computed from ``psi(t_{j+1})``, the implicit step is solved, and
    the argmin is then refreshed from the new field ``refresh`` times (each
    followed by a re-solve).  ``refresh=None`` iterates until the action is
    stable, i.e. full policy iteration per step.  Coefficients are taken at
    the left endpoint ``t_j``; the last interval is shortened to end at ``T``.

    The result carries the value at every level and the piecewise-constant
    in time Dirac policy used on each interval.
    """
    _check_grid(grid, model)
    T = _model_horizon(model, horizon)
    times = _time_levels(T, dt)
    st = _Stencil(grid)
    atoms = action_grid.atoms
    n = times.shape[0] - 1
    values = np.empty((n + 1, grid.size))
    values[n] = _terminal(model, st)
    slices = [None] * n
    worst = 0.0
    solves = 0
    for j in range(n - 1, -1, -1):
        t, tau = float(times[j]), float(times[j + 1] - times[j])
        idx = _argmin_lowest(_q_values(model, st, atoms, values[j + 1], t))
        psi, res = _implicit_step(model, st, _Measure(atoms, idx=idx), t, tau, values[j + 1])
        solves += 1
        rounds = max_refresh if refresh is None else int(refresh)
        for _ in range(rounds):
            new = _argmin_lowest(_q_values(model, st, atoms, psi, t))
            if np.array_equal(new, idx):
                break
            idx = new
            psi, res = _implicit_step(model, st, _Measure(atoms, idx=idx), t, tau, values[j + 1])
            solves += 1
        values[j] = psi
        worst = max(worst, res)
        slices[j] = NodalPolicy(grid, action_grid, idx, name=f"hjb_t{j}")
    policy = None
    if n > 0:
        policy = TimeCellPolicy(float(dt), T, slices, name="hjb_parabolic")
    return ParabolicResult(grid, times, values, worst, solves, policy)


def solve_parabolic(model: ControlModel, policy: Policy, grid: Grid, dt: float,
                    horizon: Optional[float] = None) -> ParabolicResult:
    """Finite-horizon cost of a fixed Markov policy by backward implicit Euler.

    The policy is sampled at the left endpoint of each interval, so
    piecewise-constant-in-time policies on a matching schedule are exact in time.
    """
    _check_grid(grid, model)
    T = _model_horizon(model, horizon)
    times = _time_levels(T, dt)
    st = _Stencil(grid)
    n = times.shape[0] - 1
    values = np.empty((n + 1, grid.size))
    values[n] = _terminal(model, st)
    worst = 0.0
    for j in range(n - 1, -1, -1):
        t, tau = float(times[j]), float(times[j + 1] - times[j])
        psi, res = _implicit_step(model, st, _measure(model, policy, st.nodes, t), t, tau,
                                  values[j + 1])
        values[j] = psi
        worst = max(worst, res)
    return ParabolicResult(grid, times, values, worst, n, None)


# -- analytic oracle -------------------------------------------------------------------


def riccati_oracle(a_lin: float, b_lin: float, q: float, r: float, alpha: float, sigma: float):
    """Scalar discounted LQ solution ``(P, m, kappa)``.

    For ``dX = (a X + b u) dt + sigma dW`` with cost ``q x^2 + r u^2`` and
    discount ``alpha``, the value is ``P x^2 + m`` with ``P`` the nonnegative
    root of ``(b^2 / r) P^2 + (alpha - 2a) P - q = 0``, ``m = sigma^2 P / alpha``,
    and optimal feedback ``u = kappa x`` with ``kappa = -b P / r``.
    """
    if not r > 0 or q < 0 or not alpha > 0:
        raise ConfigError("riccati oracle needs r > 0, q >= 0, alpha > 0")
    s = float(alpha) - 2.0 * float(a_lin)
    k = float(b_lin) ** 2 / float(r)
    if k == 0.0:
        if q == 0.0:
            P = 0.0
        elif s > 0:
            P = q / s
        else:
            raise NoPositiveRoot("uncontrolled and unstable: no finite nonnegative solution")
    else:
        disc = math.sqrt(s * s + 4.0 * k * q)
        # stable form of the larger root
        P = 2.0 * q / (s + disc) if s > 0 else (disc - s) / (2.0 * k)
    if P < 0:
        raise NoPositiveRoot(f"largest root {P} is negative")
    m = float(sigma) ** 2 * P / float(alpha)
    kappa = -float(b_lin) * P / float(r)
    return P, m, kappa
