"""Relaxed Markov policies and their quantizations.

Every policy maps ``(t, X)`` with ``X`` of shape (N, d) to an (N, K) matrix
of probability weights over the atoms of an :class:`ActionGrid`.  Variants:

* :class:`KernelPolicy` wraps an arbitrary callback.
* :class:`FiniteActionPolicy` always returns a unit Dirac; :class:`NodalPolicy`
  is the serializable special case that looks actions up at grid nodes.
* :class:`CellPolicy` is piecewise constant on the cells of a state grid.
* :class:`TimeCellPolicy` is piecewise constant in time over a horizon.

The quantizers are :func:`quantize_policy_actions` (nearest-atom pushforward),
:func:`quantize_policy_space` (cell-center sampling plus simplex rounding) and
:func:`discretize_policy_time` (left-endpoint time slices).  All ties are
broken toward the lowest index.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, OutOfBox
from .grid import Grid
from .model import ActionBox, Box

__all__ = [
    "ActionGrid", "build_action_grid", "nearest_action", "nearest_actions",
    "probability_vector", "tv_distance",
    "Policy", "KernelPolicy", "FiniteActionPolicy", "NodalPolicy", "CellPolicy",
    "TimeCellPolicy", "SimplexGrid", "nearest_simplex",
    "quantize_policy_actions", "quantize_policy_space", "discretize_policy_time",
    "policy_to_dict", "policy_from_dict", "policy_id",
]

_BOX_TOL = 1e-12


class ActionGrid:
    """Finite set of action atoms inside an action box.

    Lattice grids (from :func:`build_action_grid`) keep their per-axis
    coordinates so nearest-atom lookups cost O(3^k) per query instead of O(K).
    """

    def __init__(self, box: Box, atoms, resolution: Optional[int] = None, axes=None):
        if not isinstance(box, ActionBox):
            box = ActionBox(box.low, box.high)
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        if atoms.shape[1] != box.dim:
            if atoms.shape[0] == box.dim and atoms.shape[1] != box.dim:
                atoms = atoms.T
            else:
                raise ConfigError("atom dimension does not match the action box")
        if not np.all(box.contains_rows(atoms, _BOX_TOL)):
            raise OutOfBox(atoms[~box.contains_rows(atoms, _BOX_TOL)][0])
        if len(np.unique(atoms, axis=0)) != len(atoms):
            raise ConfigError("action atoms must be pairwise distinct")
        atoms.setflags(write=False)
        self.box = box
        self.atoms = atoms
        self.resolution = resolution
        self._axes = None if axes is None else [np.asarray(a, dtype=float) for a in axes]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def __len__(self):
        return self.size

    def __eq__(self, other):
        return (isinstance(other, ActionGrid) and self.box == other.box
                and self.atoms.shape == other.atoms.shape
                and bool(np.array_equal(self.atoms, other.atoms)))

    def __hash__(self):
        return hash((self.box, self.atoms.tobytes()))

    def __repr__(self):
        return f"ActionGrid(K={self.size}, k={self.dim}, n={self.resolution})"

    def index_of(self, atom) -> int:
        hits = np.flatnonzero(np.all(self.atoms == np.asarray(atom, dtype=float), axis=1))
        if hits.size == 0:
            raise KeyError(f"{atom!r} is not an atom")
        return int(hits[0])

    def to_dict(self) -> dict:
        return {"box": self.box.to_dict(), "atoms": self.atoms.tolist(),
                "resolution": self.resolution}

    @classmethod
    def from_dict(cls, data: dict) -> "ActionGrid":
        box = ActionBox(data["box"]["low"], data["box"]["high"])
        n = data.get("resolution")
        if n is not None:
            built = build_action_grid(box, int(n))
            if np.array_equal(built.atoms, np.asarray(data["atoms"], dtype=float)):
                return built
        return cls(box, data["atoms"], n)


def build_action_grid(box: Box, n: int) -> ActionGrid:
    """Uniform lattice whose atoms are within ``1/n`` of every action.

    Per-axis spacing is at most ``1/n`` (smaller for k >= 4 so the Euclidean
    covering radius stays below ``1/n``); atoms are in lexicographic order.
    """
    if int(n) < 1:
        raise ConfigError("action grid resolution must be >= 1")
    n = int(n)
    if not isinstance(box, ActionBox):
        box = ActionBox(box.low, box.high)
    k = box.dim
    # covering radius of a cubic lattice with spacing s is s*sqrt(k)/2
    factor = 1.0 if k <= 3 else math.sqrt(k) / 2.0 * 1.001
    axes = []
    for lo, hi in zip(box.low, box.high):
        intervals = max(1, math.ceil((hi - lo) * n * factor - 1e-9))
        axes.append(np.linspace(lo, hi, intervals + 1))
    mesh = np.meshgrid(*axes, indexing="ij")
    atoms = np.stack([m.reshape(-1) for m in mesh], axis=1)
    return ActionGrid(box, atoms, n, axes)


def _sqdist(Z, A):
    diff = Z[:, None, :] - A[None, :, :]
    return np.einsum("nkj,nkj->nk", diff, diff)


def nearest_actions(grid: ActionGrid, Z, check_box: bool = True) -> np.ndarray:
    """Vectorized :func:`nearest_action` for an (N, k) array of actions."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if check_box:
        inside = grid.box.contains_rows(Z, _BOX_TOL)
        if not np.all(inside):
            raise OutOfBox(Z[~inside][0])
    N = Z.shape[0]
    if grid._axes is not None:
        # candidates: the rounded lattice point and its +-1 neighbours per axis
        per_axis = []
        for j, ax in enumerate(grid._axes):
            if len(ax) == 1:
                per_axis.append(np.zeros((N, 1), dtype=np.int64))
                continue
            s = ax[1] - ax[0]
            c = np.clip(np.rint((Z[:, j] - ax[0]) / s).astype(np.int64), 0, len(ax) - 1)
            per_axis.append(np.stack([c - 1, c, c + 1], axis=1))
        counts = [len(ax) for ax in grid._axes]
        combos = itertools.product(*[range(p.shape[1]) for p in per_axis])
        cand = []
        for combo in combos:
            idx = [per_axis[j][:, combo[j]] for j in range(len(per_axis))]
            valid = np.ones(N, dtype=bool)
            for j, ij in enumerate(idx):
                valid &= (ij >= 0) & (ij < counts[j])
            flat = np.ravel_multi_index(tuple(np.clip(ij, 0, counts[j] - 1)
                                              for j, ij in enumerate(idx)), counts)
            cand.append(np.where(valid, flat, -1))
        cand = np.stack(cand, axis=1)
        cand_sorted = np.sort(cand, axis=1)
        safe = np.where(cand_sorted >= 0, cand_sorted, 0)
        d2 = np.sum((Z[:, None, :] - grid.atoms[safe]) ** 2, axis=2)
        d2 = np.where(cand_sorted >= 0, d2, np.inf)
        pick = np.argmin(d2, axis=1)  # first minimum == lowest atom index
        return cand_sorted[np.arange(N), pick]
    out = np.empty(N, dtype=np.int64)
    chunk = max(1, 2_000_000 // max(1, grid.size))
    for s in range(0, N, chunk):
        d2 = _sqdist(Z[s:s + chunk], grid.atoms)
        out[s:s + chunk] = np.argmin(d2, axis=1)
    return out


def nearest_action(grid: ActionGrid, zeta) -> int:
    """Index of the atom closest to ``zeta`` (lowest index on ties).

    Raises:
        OutOfBox: ``zeta`` lies outside the grid's action box.
    """
    z = np.asarray(zeta, dtype=float).reshape(1, -1)
    return int(nearest_actions(grid, z)[0])


def probability_vector(weights, tol: float = 1e-12) -> np.ndarray:
    w = np.asarray(weights, dtype=float).reshape(-1)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("probability weights must be finite and nonnegative")
    if abs(math.fsum(w) - 1.0) > tol:
        raise ValueError(f"probability weights sum to {math.fsum(w)!r}, not 1")
    return w


def tv_distance(p, q) -> np.ndarray:
    """Total-variation distance ``0.5 * sum |p - q|`` along the last axis."""
    return 0.5 * np.sum(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)), axis=-1)


# -- policies ------------------------------------------------------------------


class Policy:
    """Base class.  Subclasses implement :meth:`weights`."""

    action_grid: ActionGrid
    stationary: bool = True
    name: str = "policy"

    def weights(self, t: float, X) -> np.ndarray:
        raise NotImplementedError

    def dirac_indices(self, t: float, X) -> Optional[np.ndarray]:
        """Atom index per row when the policy is a unit Dirac, else ``None``."""
        return None

    def __call__(self, t: float, x) -> np.ndarray:
        """Probability vector at a single state."""
        return self.weights(t, np.asarray(x, dtype=float).reshape(1, -1))[0]


class KernelPolicy(Policy):
    """Policy given by a callback.

    ``fn(t, x)`` returns a probability vector over ``action_grid`` for one
    state ``x``; with ``vectorized=True`` it receives the whole (N, d) batch
    and returns (N, K).  Callbacks must be pure.
    """

    def __init__(self, action_grid: ActionGrid, fn: Callable, stationary: bool = False,
                 vectorized: bool = False, name: str = "kernel"):
        self.action_grid = action_grid
        self.fn = fn
        self.stationary = stationary
        self.vectorized = vectorized
        self.name = name

    def weights(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.vectorized:
            W = np.asarray(self.fn(t, X), dtype=float)
        else:
            W = np.array([self.fn(t, x) for x in X], dtype=float)
        return np.broadcast_to(W, (X.shape[0], self.action_grid.size))


class FiniteActionPolicy(Policy):
    """Dirac-valued policy; ``index_fn(t, X)`` returns one atom index per row."""

    def __init__(self, action_grid: ActionGrid, index_fn: Callable, stationary: bool = True,
                 name: str = "finite"):
        self.action_grid = action_grid
        self.index_fn = index_fn
        self.stationary = stationary
        self.name = name

    @classmethod
    def constant(cls, action_grid: ActionGrid, index: int, name="constant"):
        index = int(index)

        def fn(t, X):
            return np.full(np.atleast_2d(X).shape[0], index, dtype=np.int64)

        return cls(action_grid, fn, True, name)

    @classmethod
    def feedback(cls, action_grid: ActionGrid, control: Callable, stationary: bool = True,
                 name="feedback"):
        """Map a feedback law ``control(t, X) -> (N, k)`` to its nearest atoms.

        Feedback values outside the action box are clipped onto it first.
        """
        box = action_grid.box

        def fn(t, X):
            U = np.asarray(control(t, X), dtype=float).reshape(np.atleast_2d(X).shape[0], -1)
            U = np.clip(U, box.low_array, box.high_array)
            return nearest_actions(action_grid, U, check_box=False)

        return cls(action_grid, fn, stationary, name)

    def dirac_indices(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.asarray(self.index_fn(t, X), dtype=np.int64).reshape(X.shape[0])

    def weights(self, t, X):
        idx = self.dirac_indices(t, X)
        W = np.zeros((idx.shape[0], self.action_grid.size))
        W[np.arange(idx.shape[0]), idx] = 1.0
        return W


class NodalPolicy(FiniteActionPolicy):
    """Dirac policy stored as one atom index per node of a state grid.

    Off-grid states use the nearest node (clamped to the grid box).
    """

    def __init__(self, state_grid: Grid, action_grid: ActionGrid, indices, name="nodal"):
        self.state_grid = state_grid
        self.indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        if self.indices.shape[0] != state_grid.size:
            raise ValueError("need one action index per grid node")
        self.indices.setflags(write=False)
        super().__init__(action_grid, self._lookup, True, name)

    def _lookup(self, t, X):
        return self.indices[self.state_grid.nearest_node(X)]


class CellPolicy(Policy):
    """Piecewise-constant policy: one probability vector per state-grid cell."""

    def __init__(self, state_grid: Grid, action_grid: ActionGrid, cell_weights, name="cell"):
        W = np.asarray(cell_weights, dtype=float)
        if W.shape != (state_grid.n_cells, action_grid.size):
            raise ValueError(f"cell weights must have shape {(state_grid.n_cells, action_grid.size)}")
        W.setflags(write=False)
        self.state_grid = state_grid
        self.action_grid = action_grid
        self.cell_weights = W
        self.stationary = True
        self.name = name
        nz = W != 0
        self._dirac = None
        if np.all(nz.sum(axis=1) == 1) and np.all(W[nz] == 1.0):
            self._dirac = nz.argmax(axis=1)

    def weights(self, t, X):
        return self.cell_weights[self.state_grid.cell_index(X)]

    def dirac_indices(self, t, X):
        if self._dirac is None:
            return None
        return self._dirac[self.state_grid.cell_index(X)]


class _FrozenTime(Policy):
    """Stationary slice ``x -> v(t0, x)`` of a Markov policy."""

    def __init__(self, policy: Policy, t0: float):
        self.policy = policy
        self.t0 = float(t0)
        self.action_grid = policy.action_grid
        self.stationary = True
        self.name = f"{policy.name}@t={self.t0:g}"

    def weights(self, t, X):
        return self.policy.weights(self.t0, X)

    def dirac_indices(self, t, X):
        return self.policy.dirac_indices(self.t0, X)


class TimeCellPolicy(Policy):
    """Piecewise constant in time: slice ``k`` acts on ``[k dt, (k+1) dt)``.

    The last interval is truncated at ``horizon``; times at or past the
    horizon use the last slice.
    """

    def __init__(self, dt: float, horizon: float, slices: Sequence[Policy], name="time"):
        if not dt > 0:
            raise ValueError("time step must be positive")
        if not slices:
            raise ValueError("need at least one slice")
        grids = {id(s.action_grid) for s in slices}
        if len(grids) > 1 and any(s.action_grid != slices[0].action_grid for s in slices):
            raise ValueError("all slices must share one action grid")
        self.dt = float(dt)
        self.horizon = float(horizon)
        self.slices = list(slices)
        self.action_grid = slices[0].action_grid
        self.stationary = len(self.slices) == 1
        self.name = name

    def slice_index(self, t: float) -> int:
        k = int(math.floor(float(t) / self.dt + 1e-9))
        return min(max(k, 0), len(self.slices) - 1)

    def slice_at(self, t: float) -> Policy:
        return self.slices[self.slice_index(t)]

    def intervals(self) -> list:
        out = []
        for k in range(len(self.slices)):
            a = k * self.dt
            b = min((k + 1) * self.dt, self.horizon) if k == len(self.slices) - 1 else (k + 1) * self.dt
            out.append((a, max(a, b)))
        return out

    def weights(self, t, X):
        return self.slice_at(t).weights(t, X)

    def dirac_indices(self, t, X):
        return self.slice_at(t).dirac_indices(t, X)


# -- simplex codebook ------------------------------------------------------------


def _n_compositions(s: int, parts: int) -> int:
    if parts == 0:
        return 1 if s == 0 else 0
    return math.comb(s + parts - 1, parts - 1)


class SimplexGrid:
    """Probability vectors on ``base`` whose weights are multiples of ``1/m``.

    Codebook order is descending lexicographic in the count vectors, so index
    0 is the Dirac at the first atom.  Ranking and unranking are
    combinatorial; the codebook is only materialized on request.
    """

    def __init__(self, base: ActionGrid, m: int):
        if int(m) < 1:
            raise ConfigError("simplex resolution m must be >= 1")
        self.base = base
        self.m = int(m)
        self.k = base.size

    @property
    def size(self) -> int:
        return math.comb(self.m + self.k - 1, self.k - 1)

    def rank(self, counts) -> int:
        counts = [int(c) for c in counts]
        if len(counts) != self.k or sum(counts) != self.m or min(counts) < 0:
            raise ValueError("not a codebook count vector")
        r = 0
        s = self.m
        for i, c in enumerate(counts[:-1]):
            parts_after = self.k - i - 1
            # compositions with a larger entry here come first
            if s - c - 1 >= 0:
                r += _n_compositions(s - c - 1, parts_after + 1) if parts_after >= 1 else 0
            s -= c
        return r

    def unrank(self, index: int) -> np.ndarray:
        index = int(index)
        if not 0 <= index < self.size:
            raise IndexError("codebook index out of range")
        counts = np.zeros(self.k, dtype=np.int64)
        s = self.m
        for i in range(self.k - 1):
            parts_after = self.k - i - 1
            for v in range(s, -1, -1):
                block = _n_compositions(s - v, parts_after)
                if index < block:
                    counts[i] = v
                    break
                index -= block
            s -= counts[i]
        counts[-1] = s
        return counts

    def element(self, index: int) -> np.ndarray:
        return self.unrank(index) / self.m

    def codebook(self, limit: int = 1_000_000) -> np.ndarray:
        """All codebook vectors in index order (refuses huge codebooks)."""
        if self.size > limit:
            raise ValueError(f"codebook has {self.size} elements (limit {limit})")
        rows = []

        def rec(prefix, s, left):
            if left == 1:
                rows.append(prefix + [s])
                return
            for v in range(s, -1, -1):
                rec(prefix + [v], s - v, left - 1)

        rec([], self.m, self.k)
        return np.array(rows, dtype=float) / self.m

    def nearest_counts(self, W) -> np.ndarray:
        """TV-nearest count vectors for each row of ``W`` (lowest index on ties).

        Largest-remainder rounding: floor ``m*w`` and hand the leftover units
        to the largest fractional parts, earlier atoms first among equals.
        """
        W = np.atleast_2d(np.asarray(W, dtype=float))
        X = self.m * W
        fl = np.floor(X)
        frac = X - fl
        fl = fl.astype(np.int64)
        r = self.m - fl.sum(axis=1)
        key = np.round(frac, 12)
        N, K = W.shape
        order = np.lexsort((np.broadcast_to(np.arange(K), (N, K)), -key), axis=1)
        out = fl.copy()
        ranks = np.empty_like(order)
        ranks[np.arange(N)[:, None], order] = np.arange(K)[None, :]
        out += (ranks < r[:, None]).astype(np.int64)
        return out


def nearest_simplex(simplex: SimplexGrid, nu) -> int:
    """Codebook index of the TV-nearest element to ``nu`` (lowest on ties)."""
    counts = simplex.nearest_counts(np.asarray(nu, dtype=float).reshape(1, -1))[0]
    return simplex.rank(counts)


# -- quantizers --------------------------------------------------------------


def _assignment(src: ActionGrid, dst: ActionGrid) -> np.ndarray:
    return nearest_actions(dst, src.atoms)


def _pushforward(W: np.ndarray, assign: np.ndarray, k_new: int) -> np.ndarray:
    M = sp.csr_matrix((np.ones(assign.shape[0]), (np.arange(assign.shape[0]), assign)),
                      shape=(assign.shape[0], k_new))
    return np.asarray((M.T @ np.asarray(W, dtype=float).T).T)


def quantize_policy_actions(v: Policy, grid: ActionGrid) -> Policy:
    """Push each output measure of ``v`` forward under the nearest-atom map.

    The weight of atom ``i`` becomes the mass ``v`` puts on the set of actions
    whose nearest atom in ``grid`` is ``i``.
    """
    assign = _assignment(v.action_grid, grid)
    name = f"{v.name}|Qn"
    if isinstance(v, NodalPolicy):
        return NodalPolicy(v.state_grid, grid, assign[v.indices], name)
    if isinstance(v, FiniteActionPolicy):
        inner = v.index_fn
        return FiniteActionPolicy(grid, lambda t, X: assign[inner(t, X)], v.stationary, name)
    if isinstance(v, CellPolicy):
        return CellPolicy(v.state_grid, grid, _pushforward(v.cell_weights, assign, grid.size), name)
    if isinstance(v, TimeCellPolicy):
        return TimeCellPolicy(v.dt, v.horizon, [quantize_policy_actions(s, grid) for s in v.slices],
                              name)

    def fn(t, X):
        return _pushforward(v.weights(t, X), assign, grid.size)

    return KernelPolicy(grid, fn, v.stationary, vectorized=True, name=name)


def quantize_policy_space(v: Policy, state_grid: Grid, simplex: SimplexGrid) -> CellPolicy:
    """Piecewise-constant approximation: sample ``v`` at each cell center and
    round the measure to the TV-nearest codebook element of ``simplex``."""
    if not v.stationary:
        raise ValueError("space quantization needs a stationary policy")
    if v.action_grid != simplex.base:
        raise ValueError("policy must live on the simplex's base action grid")
    W = v.weights(0.0, state_grid.cell_centers())
    counts = simplex.nearest_counts(W)
    return CellPolicy(state_grid, simplex.base, counts / simplex.m, f"{v.name}|Qm{simplex.m}")


def discretize_policy_time(v: Policy, dt: float, horizon: float) -> TimeCellPolicy:
    """Freeze ``v`` at the left endpoint of each interval ``[k dt, (k+1) dt)``.

    When ``dt`` does not divide the horizon the last interval is shorter.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = max(1, math.ceil(horizon / dt - 1e-9))
    if v.stationary:
        slices = [v] * n
    elif isinstance(v, TimeCellPolicy):
        slices = [v.slice_at(k * dt) for k in range(n)]
    else:
        slices = [_FrozenTime(v, k * dt) for k in range(n)]
    return TimeCellPolicy(dt, horizon, slices, f"{v.name}|dt={dt:g}")


# -- serialization -----------------------------------------------------------


def policy_to_dict(policy: Policy) -> dict:
    """JSON-ready representation.  Callback-based policies are not serializable."""
    if isinstance(policy, NodalPolicy):
        return {"type": "nodal", "name": policy.name,
                "state_grid": policy.state_grid.to_dict(),
                "action_grid": policy.action_grid.to_dict(),
                "indices": policy.indices.tolist()}
    if isinstance(policy, CellPolicy):
        return {"type": "cell", "name": policy.name,
                "state_grid": policy.state_grid.to_dict(),
                "action_grid": policy.action_grid.to_dict(),
                "weights": policy.cell_weights.tolist()}
    if isinstance(policy, TimeCellPolicy):
        return {"type": "time", "name": policy.name, "dt": policy.dt,
                "horizon": policy.horizon,
                "slices": [policy_to_dict(s) for s in policy.slices]}
    raise TypeError(f"{type(policy).__name__} is callback-based and cannot be serialized")


def policy_from_dict(data: dict) -> Policy:
    kind = data.get("type")
    name = data.get("name", kind or "policy")
    if kind == "nodal":
        return NodalPolicy(Grid.from_dict(data["state_grid"]),
                           ActionGrid.from_dict(data["action_grid"]), data["indices"], name)
    if kind == "cell":
        return CellPolicy(Grid.from_dict(data["state_grid"]),
                          ActionGrid.from_dict(data["action_grid"]), data["weights"], name)
    if kind == "time":
        return TimeCellPolicy(data["dt"], data["horizon"],
                              [policy_from_dict(s) for s in data["slices"]], name)
    raise ConfigError(f"unknown policy type {kind!r}", "policy.type")


def policy_id(policy: Policy) -> str:
    """Short stable identifier: a content hash when serializable, else the name."""
    try:
        blob = json.dumps(policy_to_dict(policy), sort_keys=True).encode()
    except TypeError:
        return policy.name
    return f"{policy.name}:{hashlib.sha1(blob).hexdigest()[:10]}"
