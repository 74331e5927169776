"""Controlled diffusion models: coefficients, costs, and relaxed evaluation.

A model describes ``dX = b(X, U, t) dt + sigma(X) dW`` with running cost
``c(x, u, t)`` and the optional data used by the individual cost criteria
(terminal cost, discount rate, exit domain).  Every coefficient is an
:class:`~diffquant.expr.Expr`; evaluation is batched over rows of ``X``.

Relaxed controls are finitely supported measures: a set of action atoms plus
a weight matrix.  Drift and cost under a measure are weight averages over the
atoms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NondegeneracyViolation
from .expr import Expr, as_expr

__all__ = [
    "Box", "ActionBox", "ControlModel",
    "eval_drift", "eval_cost", "eval_diffusion_matrix", "relaxed_average", "constant_value",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[low, high]`` in R^n with componentwise low < high."""

    low: tuple
    high: tuple

    def __post_init__(self):
        low = tuple(float(v) for v in np.atleast_1d(self.low))
        high = tuple(float(v) for v in np.atleast_1d(self.high))
        if len(low) != len(high) or not low:
            raise ConfigError("box bounds must be nonempty and of equal length")
        for lo, hi in zip(low, high):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ConfigError(f"box interval [{lo}, {hi}] must be finite with low < high")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def dim(self) -> int:
        return len(self.low)

    @cached_property
    def low_array(self) -> np.ndarray:
        a = np.array(self.low)
        a.setflags(write=False)
        return a

    @cached_property
    def high_array(self) -> np.ndarray:
        a = np.array(self.high)
        a.setflags(write=False)
        return a

    def contains(self, point, tol: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float).reshape(-1)
        if p.shape[0] != self.dim:
            return False
        return bool(np.all(p >= self.low_array - tol) and np.all(p <= self.high_array + tol))

    def contains_rows(self, points, tol: float = 0.0) -> np.ndarray:
        """Vectorized membership for an ``(N, n)`` array (closed box)."""
        P = np.asarray(points, dtype=float)
        return np.all((P >= self.low_array - tol) & (P <= self.high_array + tol), axis=-1)

    def interior_rows(self, points) -> np.ndarray:
        """Membership in the open box."""
        P = np.asarray(points, dtype=float)
        return np.all((P > self.low_array) & (P < self.high_array), axis=-1)

    def to_dict(self) -> dict:
        return {"low": list(self.low), "high": list(self.high)}


class ActionBox(Box):
    """Compact action set, a box with the Euclidean metric."""


def _parse(src, names, where: str) -> Expr:
    """``as_expr`` that tags parse errors with the config field they came from."""
    try:
        return as_expr(src, names)
    except ConfigError as exc:
        if exc.field is None:
            exc.field = where
        raise


@lru_cache(maxsize=None)
def _names(prefix: str, n: int) -> tuple:
    return tuple(f"{prefix}{i + 1}" for i in range(n))


@lru_cache(maxsize=4096)
def constant_value(expr: Expr) -> Optional[float]:
    """Value of a variable-free expression, else ``None``."""
    if not expr.is_constant:
        return None
    return float(expr.evaluate({}))


@dataclass(frozen=True)
class ControlModel:
    """Immutable description of a controlled diffusion and its costs.

    Use :meth:`build` to construct from expression strings; the dataclass
    fields hold parsed trees.  ``sigma`` binds only state variables.
    """

    dim_x: int
    action: ActionBox
    drift: tuple
    sigma: tuple
    cost: Expr
    terminal_H: Optional[Expr] = None
    exit_domain: Optional[Box] = None
    exit_discount: Optional[Expr] = None
    exit_terminal: Optional[Expr] = None
    alpha: Optional[float] = None
    horizon_T: Optional[float] = None
    name: str = "model"
    _t_free: bool = field(default=True, repr=False, compare=False)

    @classmethod
    def build(cls, dim_x: int, action: Box | tuple, drift: Sequence, sigma: Sequence,
              cost, *, terminal_H=None, exit_domain=None, exit_discount=None,
              exit_terminal=None, alpha=None, horizon_T=None, name="model") -> "ControlModel":
        """Parse coefficient sources and assemble a model.

        ``action`` is an :class:`ActionBox` or a ``(low, high)`` pair; ``sigma``
        is a ``dim_x`` by ``dim_x`` nested sequence (a flat list is accepted
        for ``dim_x == 1``).
        """
        if int(dim_x) < 1:
            raise ConfigError("dim_x must be positive", "model.dim_x")
        d = int(dim_x)
        if not isinstance(action, ActionBox):
            if isinstance(action, Box):
                action = ActionBox(action.low, action.high)
            else:
                action = ActionBox(*action)
        k = action.dim
        xs, us = list(_names("x", d)), list(_names("u", k))
        xut = xs + us + ["t"]

        if isinstance(drift, (str, Expr, int, float)):
            drift = [drift]
        if len(drift) != d:
            raise ConfigError(f"drift needs {d} components, got {len(drift)}", "model.drift")
        drift_e = tuple(_parse(s, xut, f"model.drift.{i}") for i, s in enumerate(drift))

        if d == 1 and len(sigma) == 1 and not isinstance(sigma[0], (list, tuple)):
            sigma = [[sigma[0]]]
        if isinstance(sigma, (str, Expr, int, float)):
            sigma = [[sigma]]
        if len(sigma) != d or any(len(row) != d for row in sigma):
            raise ConfigError(f"sigma must be {d}x{d}", "model.sigma")
        sigma_e = tuple(tuple(_parse(s, xs, f"model.sigma.{i}.{j}") for j, s in enumerate(row))
                        for i, row in enumerate(sigma))

        cost_e = _parse(cost, xut, "model.cost")
        H = _parse(terminal_H, xs, "model.terminal") if terminal_H is not None else None
        if exit_domain is not None and not isinstance(exit_domain, Box):
            exit_domain = Box(*exit_domain)
        if exit_domain is not None and exit_domain.dim != d:
            raise ConfigError("exit domain dimension must equal dim_x", "model.exit")
        delta = _parse(exit_discount if exit_discount is not None else 0.0, xs + us,
                           "model.exit.discount") \
            if exit_domain is not None else None
        h = _parse(exit_terminal if exit_terminal is not None else 0.0, xs, "model.exit.payoff") \
            if exit_domain is not None else None
        if alpha is not None and not float(alpha) > 0:
            raise ConfigError("alpha must be positive", "model.alpha")
        if horizon_T is not None and float(horizon_T) < 0:
            raise ConfigError("horizon must be nonnegative", "model.horizon")

        t_free = "t" not in (cost_e.variables.union(*(e.variables for e in drift_e)))
        return cls(d, action, drift_e, sigma_e, cost_e, H, exit_domain, delta, h,
                   None if alpha is None else float(alpha),
                   None if horizon_T is None else float(horizon_T), name, t_free)

    @property
    def dim_u(self) -> int:
        return self.action.dim

    @property
    def x_names(self) -> tuple:
        return _names("x", self.dim_x)

    @property
    def u_names(self) -> tuple:
        return _names("u", self.dim_u)

    @property
    def time_homogeneous(self) -> bool:
        return self._t_free

    # -- batched evaluation ------------------------------------------------

    def _env(self, X, U=None, t=None) -> dict:
        X = np.asarray(X, dtype=float)
        env = {name: X[:, i] for i, name in enumerate(self.x_names)}
        if U is not None:
            U = np.asarray(U, dtype=float)
            env.update({name: U[:, j] for j, name in enumerate(self.u_names)})
        env["t"] = 0.0 if t is None else t
        return env

    @staticmethod
    def _column(value, n: int) -> np.ndarray:
        if isinstance(value, np.ndarray) and value.shape == (n,) and value.dtype == np.float64:
            return value
        arr = np.asarray(value, dtype=float)
        if arr.shape == (n,):
            return arr
        return np.broadcast_to(arr, (n,)).copy()

    def drift_at(self, X, U, t=0.0) -> np.ndarray:
        """Drift ``b(x, u, t)`` for paired rows of ``X`` (N, d) and ``U`` (N, k)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        env = self._env(X, U, t)
        n = X.shape[0]
        out = np.empty((n, self.dim_x))
        for i, e in enumerate(self.drift):
            out[:, i] = e.evaluate(env)
        return out

    def cost_at(self, X, U, t=0.0) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._column(self.cost.evaluate(self._env(X, U, t)), X.shape[0])

    def sigma_at(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        env = self._env(X)
        n, d = X.shape[0], self.dim_x
        out = np.empty((n, d, d))
        for i in range(d):
            for j in range(d):
                out[:, i, j] = self._column(self.sigma[i][j].evaluate(env), n)
        return out

    @property
    def sigma_is_constant(self) -> bool:
        return all(e.is_constant for row in self.sigma for e in row)

    def diffusion_at(self, X, validate: bool = False) -> np.ndarray:
        """``a(x) = sigma sigma^T / 2``, symmetrized exactly."""
        S = self.sigma_at(X)
        M = 0.5 * np.einsum("nij,nkj->nik", S, S)
        A = 0.5 * (M + np.swapaxes(M, 1, 2))
        if validate:
            _check_positive_definite(A, np.atleast_2d(X))
        return A

    def terminal_at(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.terminal_H is None:
            return np.zeros(X.shape[0])
        return self._column(self.terminal_H.evaluate(self._env(X)), X.shape[0])

    def exit_discount_at(self, X, U) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.exit_discount is None:
            return np.zeros(X.shape[0])
        return self._column(self.exit_discount.evaluate(self._env(X, U)), X.shape[0])

    def exit_terminal_at(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.exit_terminal is None:
            return np.zeros(X.shape[0])
        return self._column(self.exit_terminal.evaluate(self._env(X)), X.shape[0])

    # -- sampling-based assumption checks -------------------------------------

    def spot_check(self, X, atoms, fd_step: float = 1e-4) -> dict:
        """Sample-based checks of nondegeneracy, cost sign, and local Lipschitz size.

        Returns a dict with the minimum eigenvalue of ``a``, the minimum cost,
        and finite-difference Lipschitz estimates for drift and sigma.  Raises
        :class:`NondegeneracyViolation` if ``a`` fails Cholesky at any point.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        A = self.diffusion_at(X, validate=True)
        n, K = X.shape[0], atoms.shape[0]
        Xr = np.repeat(X, K, axis=0)
        Ur = np.tile(atoms, (n, 1))
        costs = self.cost_at(Xr, Ur)
        lip_b = 0.0
        lip_s = 0.0
        for i in range(self.dim_x):
            e = np.zeros(self.dim_x)
            e[i] = fd_step
            db = (self.drift_at(Xr + e, Ur) - self.drift_at(Xr, Ur)) / fd_step
            ds = (self.sigma_at(X + e) - self.sigma_at(X)) / fd_step
            lip_b = max(lip_b, float(np.max(np.linalg.norm(db, axis=1))))
            lip_s = max(lip_s, float(np.max(np.sqrt(np.sum(ds ** 2, axis=(1, 2))))))
        return {
            "min_eig_a": float(np.min(np.linalg.eigvalsh(A))),
            "min_cost": float(np.min(costs)),
            "lipschitz_drift": lip_b,
            "lipschitz_sigma": lip_s,
        }


def _check_positive_definite(A: np.ndarray, X: np.ndarray) -> None:
    try:
        np.linalg.cholesky(A)
        return
    except np.linalg.LinAlgError:
        pass
    for i in range(A.shape[0]):
        try:
            np.linalg.cholesky(A[i])
        except np.linalg.LinAlgError:
            raise NondegeneracyViolation(X[min(i, X.shape[0] - 1)]) from None


def relaxed_average(func: Callable, X, atoms, W, t=0.0) -> np.ndarray:
    """Average ``func(x, u, t)`` over finitely supported measures.

    ``X`` is (N, d); ``atoms`` is (K, k); ``W`` is (N, K) or (K,).  ``func``
    maps paired rows to an (M,) or (M, p) array.  Only atoms with nonzero
    weight are evaluated; rows whose measure is a unit Dirac return the
    atom's value exactly.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    N, K = X.shape[0], atoms.shape[0]
    W = np.broadcast_to(np.asarray(W, dtype=float), (N, K))
    t_arr = np.asarray(t, dtype=float)

    def _t(rows):
        return t if t_arr.ndim == 0 else t_arr[rows]

    if K == 1:
        vals = func(X, np.broadcast_to(atoms[0], (N, atoms.shape[1])), t)
        w = W[:, 0]
        if np.all(w == 1.0):
            return vals
        return vals * (w if vals.ndim == 1 else w[:, None])

    nz = W != 0
    counts = nz.sum(axis=1)
    if np.all(counts == 1):
        idx = nz.argmax(axis=1)
        vals = func(X, atoms[idx], t)
        w = W[np.arange(N), idx]
        if np.all(w == 1.0):
            return vals
        return vals * (w if vals.ndim == 1 else w[:, None])

    rows, cols = np.nonzero(W)
    vals = func(X[rows], atoms[cols], _t(rows))
    w = W[rows, cols]
    vals = vals * (w if vals.ndim == 1 else w[:, None])
    out = np.zeros((N,) + vals.shape[1:])
    np.add.at(out, rows, vals)
    return out


def eval_drift(model: ControlModel, x, atoms, weights, t=0.0) -> np.ndarray:
    """Relaxed drift ``sum_i w_i b(x, atom_i, t)``.

    ``x`` may be a single point (d,) with weights (K,), returning (d,), or a
    batch (N, d) with weights (N, K) or (K,), returning (N, d).
    """
    single = np.ndim(x) == 1
    w = np.asarray(weights, dtype=float)
    if single and abs(float(np.sum(w)) - 1.0) > 1e-12:
        raise ValueError("weights must sum to 1")
    out = relaxed_average(model.drift_at, np.atleast_2d(x), atoms, w, t)
    return out[0] if single else out


def eval_cost(model: ControlModel, x, atoms, weights, t=0.0) -> np.ndarray:
    """Relaxed running cost ``sum_i w_i c(x, atom_i, t)``."""
    single = np.ndim(x) == 1
    out = relaxed_average(model.cost_at, np.atleast_2d(x), atoms, weights, t)
    return out[0] if single else out


def eval_diffusion_matrix(model: ControlModel, x, validate: bool = True) -> np.ndarray:
    """``a(x) = sigma(x) sigma(x)^T / 2`` at a single point.

    With ``validate`` the matrix is Cholesky-checked and
    :class:`NondegeneracyViolation` is raised if it is not positive definite.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return model.diffusion_at(x, validate=validate)[0]
