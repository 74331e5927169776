"""Rectangular state grids and fields defined on their nodes.

A :class:`Grid` is a tensor product of uniform axes.  Nodes are stored in
C order (last axis fastest).  The same grid doubles as a cell partition:
cell ``i`` along an axis is the half-open interval between nodes ``i`` and
``i + 1`` (the last cell is closed), so ``counts - 1`` cells per axis
partition the box exactly.

Binary field format (little-endian)::

    magic   8 bytes   b"DQFIELD1"
    dims    uint32
    per axis: count uint32, low float64, high float64
    values  float64 * prod(counts), C order
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .expr import Expr, as_expr

__all__ = ["Neumann", "Dirichlet", "Grid", "DiscreteField", "FIELD_MAGIC"]

FIELD_MAGIC = b"DQFIELD1"


@dataclass(frozen=True)
class Neumann:
    """Zero normal derivative (reflecting face)."""

    def to_dict(self):
        return {"type": "neumann"}


@dataclass(frozen=True)
class Dirichlet:
    """Prescribed boundary values given by an expression in the state."""

    value: Expr

    def to_dict(self):
        return {"type": "dirichlet", "value": self.value.to_source()}


def _parse_bc(spec, dim):
    if isinstance(spec, (Neumann, Dirichlet)):
        return spec
    if spec == "neumann" or spec is None:
        return Neumann()
    if isinstance(spec, dict):
        if spec.get("type") == "neumann":
            return Neumann()
        if spec.get("type") == "dirichlet":
            return Dirichlet(as_expr(spec.get("value", 0.0), [f"x{i + 1}" for i in range(dim)]))
    if spec == "dirichlet":
        return Dirichlet(as_expr(0.0, []))
    raise ConfigError(f"unknown boundary condition {spec!r}", "grid.bc")


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid over ``[low, high]`` with ``counts`` nodes per axis.

    ``bc`` holds one ``(lower_face, upper_face)`` pair of boundary tags per axis.
    """

    low: tuple
    high: tuple
    counts: tuple
    bc: tuple = field(default=None)

    def __post_init__(self):
        low = tuple(float(v) for v in np.atleast_1d(self.low))
        high = tuple(float(v) for v in np.atleast_1d(self.high))
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if not (len(low) == len(high) == len(counts)) or not low:
            raise ConfigError("grid low/high/counts must have equal nonzero length", "grid")
        for lo, hi, c in zip(low, high, counts):
            if not lo < hi:
                raise ConfigError(f"grid axis [{lo}, {hi}] must have low < high", "grid")
            if c < 3:
                raise ConfigError("grids need at least 3 points per axis", "grid")
        d = len(low)
        bc = self.bc
        if bc is None or isinstance(bc, (str, Neumann, Dirichlet, dict)):
            bc = tuple((bc, bc) for _ in range(d))
        bc = tuple((_parse_bc(lo, d), _parse_bc(hi, d)) for lo, hi in bc)
        if len(bc) != d:
            raise ConfigError("need one boundary pair per axis", "grid.bc")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "bc", bc)

    @classmethod
    def uniform(cls, low, high, h=None, counts=None, bc="neumann") -> "Grid":
        """Grid from spacing ``h`` (scalar or per axis) or from node ``counts``."""
        low = np.atleast_1d(np.asarray(low, dtype=float))
        high = np.atleast_1d(np.asarray(high, dtype=float))
        if counts is None:
            if h is None:
                raise ConfigError("grid needs either h or counts", "grid")
            hh = np.broadcast_to(np.asarray(h, dtype=float), low.shape)
            n = np.round((high - low) / hh).astype(int)
            if np.any(np.abs(n * hh - (high - low)) > 1e-9 * np.maximum(1.0, high - low)):
                raise ConfigError("grid spacing must divide the box width", "grid.h")
            counts = n + 1
        counts = np.broadcast_to(np.asarray(counts, dtype=int), low.shape)
        return cls(tuple(low), tuple(high), tuple(counts), bc)

    # -- geometry -----------------------------------------------------------

    @property
    def dim(self) -> int:
        return len(self.low)

    @property
    def shape(self) -> tuple:
        return self.counts

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> tuple:
        return tuple((hi - lo) / (c - 1) for lo, hi, c in zip(self.low, self.high, self.counts))

    @property
    def axes(self) -> list:
        return [np.linspace(lo, hi, c) for lo, hi, c in zip(self.low, self.high, self.counts)]

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def multi_index(self) -> np.ndarray:
        """(N, d) integer coordinates of every node, C order."""
        return np.stack(np.unravel_index(np.arange(self.size), self.counts), axis=1)

    def ravel(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return np.ravel_multi_index(tuple(idx[..., i] for i in range(self.dim)), self.counts)

    def nearest_node(self, X) -> np.ndarray:
        """Flat index of the nearest node; points outside map to the boundary."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo = np.array(self.low)
        h = np.array(self.spacing)
        idx = np.rint((X - lo) / h).astype(np.int64)
        idx = np.clip(idx, 0, np.array(self.counts) - 1)
        return self.ravel(idx)

    def node_of(self, x, tol: float = 1e-9):
        """Flat index of the node at ``x``, or ``None`` if ``x`` is not a node."""
        x = np.asarray(x, dtype=float).reshape(-1)
        lo = np.array(self.low)
        h = np.array(self.spacing)
        r = (x - lo) / h
        i = np.rint(r)
        if np.any(np.abs(r - i) > tol) or np.any(i < 0) or np.any(i > np.array(self.counts) - 1):
            return None
        return int(self.ravel(i.astype(np.int64)))

    def origin_index(self) -> int:
        idx = self.node_of(np.zeros(self.dim))
        if idx is None:
            raise ConfigError("grid must contain the origin as a node", "grid")
        return idx

    def boundary_mask(self) -> np.ndarray:
        mi = self.multi_index()
        top = np.array(self.counts) - 1
        return np.any((mi == 0) | (mi == top), axis=1)

    def dirichlet_mask(self) -> np.ndarray:
        mi = self.multi_index()
        top = np.array(self.counts) - 1
        mask = np.zeros(self.size, dtype=bool)
        for ax, (lo_bc, hi_bc) in enumerate(self.bc):
            if isinstance(lo_bc, Dirichlet):
                mask |= mi[:, ax] == 0
            if isinstance(hi_bc, Dirichlet):
                mask |= mi[:, ax] == top[ax]
        return mask

    def with_bc(self, bc) -> "Grid":
        return Grid(self.low, self.high, self.counts, bc)

    def contains_rows(self, X, tol: float = 1e-12) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.all((X >= np.array(self.low) - tol) & (X <= np.array(self.high) + tol), axis=1)

    # -- cells ----------------------------------------------------------------

    @property
    def cell_counts(self) -> tuple:
        return tuple(c - 1 for c in self.counts)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cell_counts))

    def cell_index(self, X) -> np.ndarray:
        """Flat cell index; points outside the box use the nearest boundary cell."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo = np.array(self.low)
        h = np.array(self.spacing)
        idx = np.floor((X - lo) / h).astype(np.int64)
        idx = np.clip(idx, 0, np.array(self.cell_counts) - 1)
        return np.ravel_multi_index(tuple(idx[:, i] for i in range(self.dim)), self.cell_counts)

    def cell_centers(self) -> np.ndarray:
        centers = [0.5 * (a[:-1] + a[1:]) for a in self.axes]
        mesh = np.meshgrid(*centers, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    # -- interpolation --------------------------------------------------------

    def interpolate(self, values, X) -> np.ndarray:
        """Multilinear interpolation of nodal ``values`` at points ``X`` (clamped)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        V = np.asarray(values, dtype=float).reshape(self.counts)
        lo = np.array(self.low)
        h = np.array(self.spacing)
        r = (X - lo) / h
        base = np.clip(np.floor(r).astype(np.int64), 0, np.array(self.counts) - 2)
        frac = np.clip(r - base, 0.0, 1.0)
        out = np.zeros(X.shape[0])
        for corner in range(2 ** self.dim):
            bits = [(corner >> ax) & 1 for ax in range(self.dim)]
            w = np.ones(X.shape[0])
            idx = []
            for ax, b in enumerate(bits):
                w = w * (frac[:, ax] if b else 1.0 - frac[:, ax])
                idx.append(base[:, ax] + b)
            out += w * V[tuple(idx)]
        return out

    def value_at(self, values, x) -> float:
        """Nodal value if ``x`` is a node, otherwise the multilinear interpolant."""
        i = self.node_of(x)
        if i is not None:
            return float(np.asarray(values)[i])
        return float(self.interpolate(values, np.asarray(x, dtype=float).reshape(1, -1))[0])

    # -- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "low": list(self.low),
            "high": list(self.high),
            "counts": list(self.counts),
            "bc": [[lo.to_dict(), hi.to_dict()] for lo, hi in self.bc],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Grid":
        bc = data.get("bc", "neumann")
        if isinstance(bc, list):
            bc = tuple(tuple(pair) for pair in bc)
        return cls(tuple(data["low"]), tuple(data["high"]), tuple(data["counts"]), bc)


@dataclass
class DiscreteField:
    """One value per grid node."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.shape[0] != self.grid.size:
            raise ValueError("field size does not match grid")

    def at(self, x) -> float:
        return self.grid.value_at(self.values, x)

    def to_csv(self, path) -> None:
        X = self.grid.nodes()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(self.grid.dim)] + ["value"])
            for row, v in zip(X, self.values):
                w.writerow([f"{c:.17g}" for c in row] + [f"{v:.17g}"])

    def to_bytes(self) -> bytes:
        parts = [FIELD_MAGIC, struct.pack("<I", self.grid.dim)]
        for lo, hi, c in zip(self.grid.low, self.grid.high, self.grid.counts):
            parts.append(struct.pack("<Idd", c, lo, hi))
        parts.append(np.asarray(self.values, dtype="<f8").tobytes())
        return b"".join(parts)

    def to_binary(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, bc="neumann") -> "DiscreteField":
        if data[:8] != FIELD_MAGIC:
            raise ValueError("not a field file (bad magic)")
        (dim,) = struct.unpack_from("<I", data, 8)
        off = 12
        low, high, counts = [], [], []
        for _ in range(dim):
            c, lo, hi = struct.unpack_from("<Idd", data, off)
            off += struct.calcsize("<Idd")
            low.append(lo)
            high.append(hi)
            counts.append(c)
        n = int(np.prod(counts))
        values = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float)
        return cls(Grid(tuple(low), tuple(high), tuple(counts), bc), values)

    @classmethod
    def from_binary(cls, path, bc="neumann") -> "DiscreteField":
        return cls.from_bytes(Path(path).read_bytes(), bc)
