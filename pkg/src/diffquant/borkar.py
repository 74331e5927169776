"""Test-function pairings that probe convergence of policies.

A policy ``v`` is paired with a test pair ``(f, g)`` through

    <v; f, g> = int f(x) sum_i w_i(x) g(x, z_i) dx

(and a time integral for Markov policies).  Convergence of these pairings
over a family of test pairs is the diagnostic used by the quantization
studies; :func:`pseudo_distance` aggregates a finite bank with weights
``2^-j``.

Integrals use the tensor trapezoidal rule on the pair's quadrature grid.
The error estimate is Richardson's, from the same rule on every other node.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .expr import Expr, as_expr
from .grid import Grid
from .model import Box
from .policy import Policy, policy_id

__all__ = ["TestPair", "PairingResult", "pairing", "pairing_markov", "pseudo_distance",
           "default_bank", "pairing_bound"]


def _trapezoid_weights(counts: Sequence[int], spacing: Sequence[float], stride: int = 1):
    ws = []
    for c, h in zip(counts, spacing):
        w = np.zeros(c)
        sel = np.arange(0, c, stride)
        w[sel] = h * stride
        w[sel[0]] *= 0.5
        w[sel[-1]] *= 0.5
        ws.append(w)
    W = ws[0]
    for w in ws[1:]:
        W = np.multiply.outer(W, w)
    return W.reshape(-1)


@dataclass(frozen=True)
class TestPair:
    """Profile ``f`` in (x[, t]) and bounded ``g`` in (x[, t], u) with a quadrature grid.

    ``lip_u`` is a Lipschitz constant of ``g`` in the action (``None`` if unknown).
    """

    __test__ = False  # not a pytest class

    name: str
    f: Expr
    g: Expr
    grid: Grid
    lip_u: Optional[float] = None

    @classmethod
    def build(cls, name: str, f, g, grid: Grid, dim_u: int, lip_u: Optional[float] = None):
        xs = [f"x{i + 1}" for i in range(grid.dim)]
        us = [f"u{j + 1}" for j in range(dim_u)]
        return cls(name, as_expr(f, xs + ["t"]), as_expr(g, xs + us + ["t"]), grid,
                   None if lip_u is None else float(lip_u))

    @property
    def pair_id(self) -> str:
        text = f"{self.name}|{self.f.to_source()}|{self.g.to_source()}"
        return hashlib.sha1(text.encode()).hexdigest()[:12]

    def _env(self, X, U=None, t=0.0):
        env = {f"x{i + 1}": X[:, i] for i in range(X.shape[1])}
        if U is not None:
            env.update({f"u{j + 1}": U[:, j] for j in range(U.shape[1])})
        env["t"] = t
        return env

    def f_at(self, X, t=0.0) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.f.evaluate(self._env(X, t=t)), dtype=float),
                               (X.shape[0],))

    def g_at(self, X, U, t=0.0) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.g.evaluate(self._env(X, U, t)), dtype=float),
                               (X.shape[0],))


@dataclass
class PairingResult:
    value: float
    pair_id: str
    policy_id: str
    error_estimate: float
    abs_mass: float = 0.0
    g_sup: float = 0.0

    def csv_row(self) -> list:
        return [self.pair_id, self.policy_id, f"{self.value:.17g}", f"{self.error_estimate:.17g}"]


def _averaged_g(pair: TestPair, policy: Policy, X: np.ndarray, t: float):
    """``sum_i w_i(x) g(x, z_i)`` at each row and the largest ``|g|`` evaluated."""
    atoms = policy.action_grid.atoms
    idx = policy.dirac_indices(t, X)
    if idx is not None:
        G = pair.g_at(X, atoms[idx], t)
        return G, float(np.max(np.abs(G))) if G.size else 0.0
    W = np.asarray(policy.weights(t, X), dtype=float)
    rows, cols = np.nonzero(W)
    G = pair.g_at(X[rows], atoms[cols], t)
    out = np.bincount(rows, weights=W[rows, cols] * G, minlength=X.shape[0])
    return out, float(np.max(np.abs(G))) if G.size else 0.0


def _space_integrals(pair: TestPair, policy: Policy, t: float):
    grid = pair.grid
    X = grid.nodes()
    F = pair.f_at(X, t)
    G, gsup = _averaged_g(pair, policy, X, t)
    w = _trapezoid_weights(grid.counts, grid.spacing)
    fine = math.fsum(w * F * G)
    mass = math.fsum(w * np.abs(F))
    if all((c - 1) % 2 == 0 for c in grid.counts):
        wc = _trapezoid_weights(grid.counts, grid.spacing, stride=2)
        coarse = math.fsum(wc * F * G)
    else:
        coarse = fine
    return fine, coarse, mass, gsup


def pairing(pair: TestPair, policy: Policy) -> PairingResult:
    """Trapezoidal value of ``int f(x) int g(x, z) v(x)(dz) dx`` for a stationary policy."""
    if not policy.stationary:
        raise ConfigError("stationary pairing needs a stationary policy", "policy")
    fine, coarse, mass, gsup = _space_integrals(pair, policy, 0.0)
    return PairingResult(fine, pair.pair_id, policy_id(policy), abs(fine - coarse) / 3.0, mass, gsup)


def pairing_markov(pair: TestPair, policy: Policy, T: float, n_t: int = 101) -> PairingResult:
    """``int_0^T int f(t, x) int g(x, t, z) v(t, x)(dz) dx dt`` by trapezoid in time and space."""
    if not T > 0:
        raise ConfigError("time horizon must be positive", "T")
    n_t = max(3, int(n_t) | 1)
    times = np.linspace(0.0, float(T), n_t)
    vals = np.array([_space_integrals(pair, policy, float(t)) for t in times])
    wt = _trapezoid_weights([n_t], [times[1] - times[0]])
    wtc = _trapezoid_weights([n_t], [times[1] - times[0]], stride=2)
    fine = math.fsum(wt * vals[:, 0])
    coarse = math.fsum(wtc * vals[:, 1])
    mass = math.fsum(wt * vals[:, 2])
    return PairingResult(fine, pair.pair_id, policy_id(policy), abs(fine - coarse) / 3.0, mass,
                         float(vals[:, 3].max()))


def pseudo_distance(v1: Policy, v2: Policy, bank: Sequence[TestPair],
                    T: Optional[float] = None, n_t: int = 101) -> float:
    """``sum_j 2^-j |d_j| / (1 + |d_j|)`` over the bank, ``d_j`` the pairing difference.

    With ``T`` set, Markov pairings over ``[0, T]`` are used.
    """
    if not bank:
        raise ConfigError("test bank is empty", "bank")
    if v1 is v2:
        return 0.0
    terms = []
    for j, pair in enumerate(bank, start=1):
        if T is None:
            a, b = pairing(pair, v1).value, pairing(pair, v2).value
        else:
            a, b = pairing_markov(pair, v1, T, n_t).value, pairing_markov(pair, v2, T, n_t).value
        d = abs(a - b)
        terms.append(math.ldexp(d / (1.0 + d), -j))
    return math.fsum(terms)


def pairing_bound(pair: TestPair, n: int) -> float:
    """``Lip_u(g) (1/n) int |f|``, the largest pairing change from quantizing at resolution ``n``."""
    if pair.lip_u is None:
        raise ConfigError(f"pair {pair.name} has no Lipschitz constant", "bank.lip_u")
    X = pair.grid.nodes()
    w = _trapezoid_weights(pair.grid.counts, pair.grid.spacing)
    mass = math.fsum(w * np.abs(pair.f_at(X)))
    return pair.lip_u * mass / n


def default_bank(grid: Grid, action: Box) -> list:
    """Shipped bank: normalized Gaussian bumps and smoothed boxes against bounded ``g``.

    Centers and widths scale with the grid so tails stay well inside it.
    Every ``g`` is Lipschitz in ``u`` with the recorded constant.
    """
    d, k = grid.dim, action.dim
    lo, hi = np.array(grid.low), np.array(grid.high)
    mid = 0.5 * (lo + hi)
    span = float(np.min(hi - lo))
    s = span / 24.0
    norm = (s * math.sqrt(2.0 * math.pi)) ** d

    def bump(center):
        quad = " + ".join(f"(x{i + 1} - ({float(c)!r}))^2" for i, c in enumerate(center))
        return f"exp(-({quad}) / {2 * s * s!r}) / {norm!r}"

    def smooth_box(a, b):
        w = s / 4.0
        parts = [f"(tanh((x{i + 1} - ({float(a[i])!r})) / {w!r}) - tanh((x{i + 1} - ({float(b[i])!r})) / {w!r})) / 2"
                 for i in range(d)]
        return " * ".join(f"({p})" for p in parts)

    offs = span / 6.0
    u_scale = float(np.max(np.array(action.high) - np.array(action.low)))
    pairs = []
    pairs.append(("bump_mid_u", bump(mid), "u1", 1.0))
    pairs.append(("bump_left_sin", bump(mid - offs), f"sin(u1 / {u_scale!r} * 3)", 3.0 / u_scale))
    pairs.append(("bump_right_tanhx_u", bump(mid + offs), "tanh(x1) * u1", 1.0))
    pairs.append(("box_mid_u", smooth_box(mid - offs, mid + offs), f"u{k}", 1.0))
    pairs.append(("box_left_cos", smooth_box(mid - 2 * offs, mid), f"cos(u1 / {u_scale!r} * 2)",
                  2.0 / u_scale))
    pairs.append(("bump_mid_abs", bump(mid), "abs(u1)", 1.0))
    return [TestPair.build(name, f, g, grid, k, lip) for name, f, g, lip in pairs]
