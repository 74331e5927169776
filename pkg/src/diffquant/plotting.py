"""Figures for the CLI report path (``--plot``).

The CSV/JSON files are the result contract; these PNGs are a convenience
and their layout may change.  matplotlib is imported lazily with the Agg
backend so the library never needs a display.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({
        "figure.figsize": (6.0, 4.0),
        "axes.grid": True,
        "grid.alpha": 0.3,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "legend.frameon": False,
        "savefig.dpi": 120,
    })
    return plt


def plot_study(result, path) -> Path:
    """Gap and pseudo-distance against resolution, one panel per row kind."""
    plt = _pyplot()
    kinds = [k for k in ("action", "space", "time") if result.rows_of(k)]
    fig, axes = plt.subplots(1, len(kinds), squeeze=False, figsize=(5.0 * len(kinds), 3.8))
    labels = {"action": "action resolution n", "space": "simplex resolution m",
              "time": "policy time step"}
    for ax, kind in zip(axes[0], kinds):
        rows = result.rows_of(kind)
        x = np.array([r.resolution for r in rows], dtype=float)
        gap = np.array([r.gap for r in rows])
        pd = np.array([r.pseudo_distance for r in rows])
        floor = 1e-16
        ax.plot(x, np.maximum(gap, floor), "o-", label="gap (PDE)")
        ax.plot(x, np.maximum(pd, floor), "s--", label="pseudo-distance")
        mc = np.array([r.cost_mc for r in rows])
        if np.all(np.isfinite(mc)):
            se = np.array([r.mc_se for r in rows])
            ax.errorbar(x, np.maximum(mc - result.reference, floor), yerr=2 * se, fmt="^:",
                        capsize=3, label="gap (MC, 2 s.e.)")
        ax.set_yscale("log")
        if kind != "space" and np.all(x > 0):
            ax.set_xscale("log", base=2)
        ax.set_xlabel(labels[kind])
        ax.legend(fontsize=8)
    fig.suptitle(f"{result.criterion}: reference {result.reference:.6g}")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_field(grid, values, path, title: str = "value") -> Path:
    """Line plot (1D) or filled contour (2D) of a nodal field."""
    plt = _pyplot()
    fig, ax = plt.subplots()
    axes = grid.axes
    if grid.dim == 1:
        ax.plot(axes[0], values)
        ax.set_xlabel("x1")
    else:
        cs = ax.contourf(axes[0], axes[1], np.asarray(values).reshape(grid.shape).T, levels=30)
        fig.colorbar(cs, ax=ax)
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
    ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_pairings(rows, path) -> Path:
    """Pairing differences against their Lipschitz bounds for each test pair."""
    plt = _pyplot()
    fig, ax = plt.subplots()
    names = sorted({r["name"] for r in rows})
    for name in names:
        sel = [r for r in rows if r["name"] == name]
        n = [r["n"] for r in sel]
        line, = ax.plot(n, [max(abs(r["diff"]), 1e-16) for r in sel], "o-", label=name)
        if all(r["bound"] == r["bound"] for r in sel):
            ax.plot(n, [r["bound"] for r in sel], ":", color=line.get_color())
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("action resolution n")
    ax.set_ylabel("|pairing difference| (dotted: bound)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
