"""Counter-based Gaussian streams for reproducible parallel simulation.

Path ``p`` under seed ``s`` owns the SplitMix64 stream keyed by
``key(s, p)``; its ``n``-th uniform is ``mix(key + (n + 1) * GAMMA)``, so any
variate can be generated directly from ``(seed, path, counter)`` without
sequential state.  Uniforms are mapped to normals by inverse CDF (Wichura's
AS241, accurate to about 1e-16).

Results therefore do not depend on how paths are split across workers.
"""

from __future__ import annotations

import math

import numba
import numpy as np

__all__ = ["path_keys", "uniforms", "normals", "gaussian_increments", "inverse_normal_cdf",
           "euler_step"]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

_A = np.array([3.3871328727963666080e0, 1.3314166789178437745e+2, 1.9715909503065514427e+3,
               1.3731693765509461125e+4, 4.5921953931549871457e+4, 6.7265770927008700853e+4,
               3.3430575583588128105e+4, 2.5090809287301226727e+3])
_B = np.array([1.0, 4.2313330701600911252e+1, 6.8718700749205790830e+2, 5.3941960214247511077e+3,
               2.1213794301586595867e+4, 3.9307895800092710610e+4, 2.8729085735721942674e+4,
               5.2264952788528545610e+3])
_C = np.array([1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
               3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
               2.27238449892691845833e-2, 7.74545014278341407640e-4])
_D = np.array([1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
               1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
               1.05075007164441684324e-9])
_E = np.array([6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
               2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
               2.71155556874348757815e-5, 2.01033439929228813265e-7])
_F = np.array([1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
               7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
               2.04426310338993978564e-15])


@numba.njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, inline="always")
def _poly(c, r):
    return (((((((c[7] * r + c[6]) * r + c[5]) * r + c[4]) * r + c[3]) * r + c[2]) * r + c[1]) * r
            + c[0])


@numba.njit(cache=True)
def _ppnd16(p):
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        x = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        x = _poly(_E, r) / _poly(_F, r)
    return -x if q < 0.0 else x


@numba.njit(cache=True, inline="always")
def _uniform(key, counter):
    z = _mix(key + (counter + np.uint64(1)) * _GAMMA)
    return (float(z >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16  # 2**-53


@numba.njit(cache=True)
def _path_keys(seed, paths, out):
    s = _mix(np.uint64(seed) ^ np.uint64(0x6A09E667F3BCC909))
    for i in range(paths.shape[0]):
        out[i] = _mix(s + (np.uint64(paths[i]) + np.uint64(1)) * _M2)


@numba.njit(cache=True)
def _normals(keys, counter, out):
    c = np.uint64(counter)
    for i in range(keys.shape[0]):
        out[i] = _ppnd16(_uniform(keys[i], c))


@numba.njit(cache=True, nogil=True)
def _increments(keys, step, d, substeps, out):
    # normals for base steps step*substeps .. +substeps-1, summed and rescaled
    scale = 1.0 / math.sqrt(substeps)
    base = np.uint64(step) * np.uint64(substeps)
    for i in range(keys.shape[0]):
        k = keys[i]
        for j in range(d):
            if substeps == 1:
                out[i, j] = _ppnd16(_uniform(k, base * np.uint64(d) + np.uint64(j)))
            else:
                acc = 0.0
                for r in range(substeps):
                    n = (base + np.uint64(r)) * np.uint64(d) + np.uint64(j)
                    acc += _ppnd16(_uniform(k, n))
                out[i, j] = acc * scale


@numba.njit(cache=True)
def _inverse_cdf(u, out):
    for i in range(u.shape[0]):
        out[i] = _ppnd16(u[i])


def path_keys(seed: int, paths) -> np.ndarray:
    """Stream key for each path index under ``seed``."""
    paths = np.ascontiguousarray(paths, dtype=np.int64)
    out = np.empty(paths.shape[0], dtype=np.uint64)
    _path_keys(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF), paths, out)
    return out


def uniforms(keys, counter: int) -> np.ndarray:
    """The ``counter``-th uniform in (0, 1) of each stream (numpy reference path)."""
    keys = np.asarray(keys, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = keys + np.uint64(counter + 1) * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def normals(keys, counter: int) -> np.ndarray:
    """The ``counter``-th standard normal of each stream."""
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    out = np.empty(keys.shape[0])
    _normals(keys, counter, out)
    return out


def gaussian_increments(keys, step: int, d: int, substeps: int = 1, out=None) -> np.ndarray:
    """Standard normal vectors (N, d) driving Euler step ``step``.

    With ``substeps > 1`` each vector is the normalized sum of ``substeps``
    base-resolution variates, so a run at step ``r * dt`` sees the same
    Brownian path as a run at ``dt`` (common random numbers across step sizes).
    """
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    if out is None:
        out = np.empty((keys.shape[0], d))
    _increments(keys, int(step), int(d), int(substeps), out)
    return out


def inverse_normal_cdf(u) -> np.ndarray:
    u = np.ascontiguousarray(u, dtype=float).reshape(-1)
    out = np.empty_like(u)
    _inverse_cdf(u, out)
    return out


@numba.njit(cache=True, nogil=True)
def _euler(X, B, S, keys, step, substeps, dt, alive, lo, hi, out, norms, inside):
    # out = X + B dt + sqrt(dt) S xi; B and S broadcast when they have one row.
    # Rows with alive == 0 are copied unchanged.  When lo/hi have length d,
    # inside[i] flags membership of the new state in the open box (lo, hi).
    n, d = X.shape
    check = lo.shape[0] == d
    sqdt = math.sqrt(dt)
    scale = 1.0 / math.sqrt(substeps)
    base = np.uint64(step) * np.uint64(substeps)
    xi = np.empty(d)
    top = 0.0
    bad = False
    n_out = 0
    for i in range(n):
        if alive[i] == 0:
            for a in range(d):
                out[i, a] = X[i, a]
            norms[i] = 0.0
            inside[i] = 0
            continue
        k = keys[i]
        for j in range(d):
            if substeps == 1:
                xi[j] = _ppnd16(_uniform(k, base * np.uint64(d) + np.uint64(j)))
            else:
                acc = 0.0
                for r in range(substeps):
                    acc += _ppnd16(_uniform(k, (base + np.uint64(r)) * np.uint64(d) + np.uint64(j)))
                xi[j] = acc * scale
        bi = 0 if B.shape[0] == 1 else i
        si = 0 if S.shape[0] == 1 else i
        sq = 0.0
        ins = 1
        for a in range(d):
            acc = 0.0
            for j in range(d):
                acc += S[si, a, j] * xi[j]
            v = X[i, a] + B[bi, a] * dt + sqdt * acc
            out[i, a] = v
            sq += v * v
            if check and not (lo[a] < v < hi[a]):
                ins = 0
        inside[i] = ins
        n_out += 1 - ins
        nv = math.sqrt(sq)
        norms[i] = nv
        if nv > top:
            top = nv
        elif nv != nv:
            bad = True
    return (math.nan if bad else top), n_out


_NO_BOX = np.empty(0)


def euler_step(X, B, S, keys, step: int, substeps: int, dt: float, alive=None, box=None):
    """Fused Euler-Maruyama step ``X + B dt + sqrt(dt) S xi`` with each stream's normals.

    ``B`` is (N, d) or (1, d); ``S`` is (N, d, d) or (1, d, d).  Rows with
    ``alive == 0`` (a uint8 mask) are left unchanged.  ``box`` is an optional
    ``(low, high)`` pair for exit checks.

    Returns ``(new_state, norms, max_norm, inside, n_outside)``; a NaN state
    makes ``max_norm`` NaN, and ``inside`` is all ones without a box.
    """
    X = np.ascontiguousarray(X, dtype=float)
    n = X.shape[0]
    out = np.empty_like(X)
    norms = np.empty(n)
    inside = np.empty(n, dtype=np.uint8)
    if alive is None:
        alive = np.ones(n, dtype=np.uint8)
    lo, hi = (_NO_BOX, _NO_BOX) if box is None else (np.asarray(box[0], dtype=float),
                                                     np.asarray(box[1], dtype=float))
    top, n_out = _euler(X, np.ascontiguousarray(B, dtype=float),
                        np.ascontiguousarray(S, dtype=float),
                        np.ascontiguousarray(keys, dtype=np.uint64), int(step), int(substeps),
                        float(dt), alive, lo, hi, out, norms, inside)
    return out, norms, top, inside, n_out
