"""Small inline experiment configs shared by the config, study and CLI tests."""

import copy

from diffquant.config import parse_config

BASE = {
    "model": {"name": "toy", "dim_x": 1, "action_low": [-1.0], "action_high": [1.0],
              "drift": ["-x1 + u1"], "sigma": [["1"]], "cost": "x1^2 + u1^2", "alpha": 1.0},
    "criterion": {"kind": "discounted", "x0": [0.0]},
    "grid": {"low": [-3.0], "high": [3.0], "h": 0.05},
    "mc": {"dt": 0.02, "n_paths": 200, "seed": 3, "t_max": 4.0},
    "schedule": {"n": [1, 2, 4], "reference_n": 12, "m": [1, 2], "state_cells": 6},
}


def merge(base, patch):
    out = copy.deepcopy(base)
    for k, v in patch.items():
        if v is None:
            out.pop(k, None)
        elif isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def data(**patch):
    return merge(BASE, patch)


def config(**patch):
    return parse_config(data(**patch))


def to_toml(d, prefix=""):
    """Minimal TOML writer for the nested dicts above (no arrays of tables)."""
    lines, tables = [], []
    for k, v in d.items():
        if isinstance(v, dict):
            tables.append((k, v))
        else:
            lines.append(f"{k} = {_value(v)}")
    out = "\n".join(lines) + ("\n" if lines else "")
    for k, v in tables:
        name = f"{prefix}{k}"
        out += f"\n[{name}]\n" + to_toml(v, name + ".")
    return out


def _value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_value(x) for x in v) + "]"
    return repr(v)


# one line per acceptance criterion, printed in the terminal summary by conftest
ACCEPTANCE = {}


def record(k: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[k] = f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}"
    print(ACCEPTANCE[k])
    return ok
