"""Experiment configuration: TOML in, validated :class:`ExperimentConfig` out.

The accepted layout is mirrored by ``schema.json`` (JSON Schema), which is
checked first; semantic checks (expression parsing, dimensions, schedule
ordering and nesting) follow.  Every failure is a :class:`ConfigError`
whose ``field`` is the dotted path of the offending entry.

Sections::

    [model]      dim_x, action_low, action_high, drift, sigma, cost,
                 terminal, alpha, horizon, [model.exit] low/high/discount/payoff
    [criterion]  kind = finite_horizon | discounted | ergodic | exit, x0
    [grid]       low, high, and h or counts
    [mc]         dt, n_paths, seed, t_max, burn_in, t_avg, max_time, radius,
                 substeps, block_size, enabled
    [schedule]   n, reference_n, m, state_cells, dt, reference_dt
    [policy]     kind = optimal | feedback | constant | file, ...
    [[bank]]     name, f, g, lip_u
    [output]     dir, format
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import tomli

from .borkar import TestPair, default_bank
from .errors import ConfigError, ScheduleTooCoarse
from .grid import Grid
from .model import Box, ControlModel
from .simulate import SimConfig

__all__ = ["ExperimentConfig", "MCSettings", "Schedule", "load_config", "parse_config",
           "CRITERIA", "shipped_config"]

CRITERIA = ("finite_horizon", "discounted", "ergodic", "exit")


@lru_cache(maxsize=1)
def _schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("schema.json").read_text())


def _schema_error(err: jsonschema.ValidationError) -> ConfigError:
    path = [str(p) for p in err.absolute_path]
    if err.validator == "required" and isinstance(err.instance, dict):
        missing = [r for r in err.validator_value if r not in err.instance]
        path += missing[:1]
    elif err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        path += sorted(k for k in err.instance if k not in allowed)[:1]
    where = ".".join(path) or "<root>"
    return ConfigError(f"{where}: {err.message}", where)


@dataclass(frozen=True)
class MCSettings:
    dt: float = 0.01
    n_paths: int = 10_000
    seed: int = 0
    t_max: Optional[float] = None
    burn_in: float = 10.0
    t_avg: float = 50.0
    max_time: float = 1000.0
    radius: float = 100.0
    substeps: int = 1
    block_size: int = 1 << 17
    enabled: bool = True

    def sim_config(self, threads: Optional[int] = None) -> SimConfig:
        return SimConfig(dt=self.dt, n_paths=self.n_paths, seed=self.seed,
                         truncation_radius=self.radius, max_time=self.max_time,
                         noise_substeps=self.substeps, block_size=self.block_size,
                         threads=threads)


@dataclass(frozen=True)
class Schedule:
    n: tuple = ()
    reference_n: Optional[int] = None
    m: tuple = ()
    state_cells: tuple = ()
    dt: tuple = ()
    reference_dt: Optional[float] = None


@dataclass(frozen=True)
class ExperimentConfig:
    model: ControlModel
    criterion: str
    x0: tuple
    grid: Grid
    schedule: Schedule
    mc: Optional[MCSettings] = None
    policy: dict = field(default_factory=dict)
    bank: Optional[tuple] = None
    out_dir: str = "out"
    out_format: str = "csv"
    threads: Optional[int] = None
    source: Optional[str] = None

    def test_bank(self, grid: Optional[Grid] = None) -> list:
        """Configured test pairs, or the default bank on ``grid`` (the solver grid)."""
        if self.bank:
            return list(self.bank)
        return default_bank(grid or self.grid, self.model.action)

    def with_overrides(self, seed: Optional[int] = None, threads: Optional[int] = None,
                       out_dir: Optional[str] = None, out_format: Optional[str] = None,
                       criterion: Optional[str] = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, mc=dataclasses.replace(cfg.mc or MCSettings(),
                                                                  seed=int(seed)))
        if threads is not None:
            cfg = dataclasses.replace(cfg, threads=int(threads))
        if out_dir is not None:
            cfg = dataclasses.replace(cfg, out_dir=str(out_dir))
        if out_format is not None:
            cfg = dataclasses.replace(cfg, out_format=out_format)
        if criterion is not None and criterion != cfg.criterion:
            if criterion not in CRITERIA:
                raise ConfigError(f"unknown criterion {criterion!r}; expected one of "
                                  f"{', '.join(CRITERIA)}", "criterion.kind")
            _check_criterion(cfg.model, criterion)
            cfg = dataclasses.replace(cfg, criterion=criterion)
        return cfg

    def sim_config(self) -> SimConfig:
        return (self.mc or MCSettings()).sim_config(self.threads)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = tomli.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {str(path)!r} not found", "config") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}", "config") from None
    return parse_config(data, source=str(path))


def shipped_config(name: str) -> Path:
    """Path of a config bundled with the package (``lq.toml`` or just ``lq``)."""
    if not name.endswith(".toml"):
        name += ".toml"
    p = resources.files(__package__).joinpath("configs", name)
    if not p.is_file():
        raise ConfigError(f"no shipped config named {name!r}", "config")
    return Path(str(p))


def _strictly_increasing(values, where: str) -> tuple:
    values = tuple(values)
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"{where} must be strictly increasing", where)
    return values


def _check_criterion(model: ControlModel, kind: str) -> None:
    if kind == "discounted" and model.alpha is None:
        raise ConfigError("discounted criterion needs model.alpha", "model.alpha")
    if kind == "finite_horizon" and model.horizon_T is None:
        raise ConfigError("finite_horizon criterion needs model.horizon", "model.horizon")
    if kind == "exit" and model.exit_domain is None:
        raise ConfigError("exit criterion needs a [model.exit] section", "model.exit")


def _build_model(sec: dict) -> ControlModel:
    d = int(sec["dim_x"])
    lo, hi = sec["action_low"], sec["action_high"]
    if len(lo) != len(hi):
        raise ConfigError("action_low and action_high differ in length", "model.action_high")
    ex = sec.get("exit")
    kw = {}
    if ex is not None:
        if len(ex["low"]) != d or len(ex["high"]) != d:
            raise ConfigError("exit box dimension must equal dim_x", "model.exit")
        kw = dict(exit_domain=(ex["low"], ex["high"]), exit_discount=ex.get("discount"),
                  exit_terminal=ex.get("payoff"))
    try:
        return ControlModel.build(d, (lo, hi), sec["drift"], sec["sigma"], sec["cost"],
                                  terminal_H=sec.get("terminal"), alpha=sec.get("alpha"),
                                  horizon_T=sec.get("horizon"), name=sec.get("name", "model"),
                                  **kw)
    except ConfigError as exc:
        if exc.field is None or not exc.field.startswith("model"):
            exc.field = "model" if exc.field is None else f"model.{exc.field}"
        raise


def _build_grid(sec: dict, model: ControlModel, kind: str) -> Grid:
    d = model.dim_x
    low, high = sec.get("low"), sec.get("high")
    bc = "neumann"
    if kind == "exit":
        box = model.exit_domain
        low = list(box.low) if low is None else low
        high = list(box.high) if high is None else high
        if not (np.allclose(low, box.low) and np.allclose(high, box.high)):
            raise ConfigError("exit criterion: grid box must equal the exit domain", "grid")
    if low is None or high is None:
        raise ConfigError("grid needs low and high", "grid.low" if low is None else "grid.high")
    if len(low) != d or len(high) != d:
        raise ConfigError("grid dimension must equal dim_x", "grid")
    return Grid.uniform(low, high, h=sec.get("h"), counts=sec.get("counts"), bc=bc)


def _build_schedule(sec: dict, kind: str, d: int) -> Schedule:
    n = _strictly_increasing(sec.get("n", ()), "schedule.n")
    m = _strictly_increasing(sec.get("m", ()), "schedule.m")
    dts = _strictly_increasing(tuple(float(v) for v in sec.get("dt", ())), "schedule.dt")
    ref_n = sec.get("reference_n")
    ref_dt = sec.get("reference_dt")
    cells = sec.get("state_cells", 16)
    cells = tuple([int(cells)] * d) if isinstance(cells, int) else tuple(int(c) for c in cells)
    if len(cells) != d:
        raise ConfigError("state_cells needs one entry per state axis", "schedule.state_cells")
    if n:
        if ref_n is None:
            raise ConfigError("schedule.n needs schedule.reference_n", "schedule.reference_n")
        if ref_n <= n[-1] or any(ref_n % v for v in n):
            raise ScheduleTooCoarse(
                f"reference_n={ref_n} must exceed and be a multiple of every schedule entry",
                "schedule.reference_n")
    if kind == "finite_horizon" and dts:
        if ref_dt is None:
            raise ConfigError("schedule.dt needs schedule.reference_dt", "schedule.reference_dt")
        for v in dts:
            r = v / ref_dt
            if not (ref_dt < v and abs(r - round(r)) < 1e-9 * r):
                raise ScheduleTooCoarse(
                    f"dt={v} is not a multiple of reference_dt={ref_dt} larger than it",
                    "schedule.reference_dt")
    if kind != "finite_horizon" and m and not n:
        raise ConfigError("schedule.m needs a nonempty schedule.n", "schedule.n")
    return Schedule(n, ref_n, m, cells, dts, None if ref_dt is None else float(ref_dt))


def parse_config(data: dict, source: Optional[str] = None) -> ExperimentConfig:
    err = jsonschema.exceptions.best_match(
        jsonschema.Draft202012Validator(_schema()).iter_errors(data))
    if err is not None:
        raise _schema_error(err)

    model = _build_model(data["model"])
    kind = data["criterion"]["kind"]
    _check_criterion(model, kind)
    d = model.dim_x
    if "x0" in data["criterion"]:
        x0 = tuple(float(v) for v in data["criterion"]["x0"])
    elif kind == "exit":
        x0 = tuple(0.5 * (a + b) for a, b in zip(model.exit_domain.low, model.exit_domain.high))
    else:
        x0 = (0.0,) * d
    if len(x0) != d:
        raise ConfigError("x0 must have dim_x entries", "criterion.x0")
    grid = _build_grid(data["grid"], model, kind)
    if grid.dim > 2:
        raise ConfigError("PDE solvers support dimension at most 2", "grid")
    if kind == "exit" and not model.exit_domain.interior_rows(np.array([x0]))[0]:
        raise ConfigError("x0 must lie inside the exit domain", "criterion.x0")

    schedule = _build_schedule(data.get("schedule", {}), kind, d)

    mc = None
    if "mc" in data:
        sec = dict(data["mc"])
        mc = MCSettings(**sec)
        if kind == "discounted" and mc.t_max is None:
            # truncation error e^{-alpha t} stays below 1e-6 of the first-unit cost
            mc = dataclasses.replace(mc, t_max=math.ceil(14.0 / model.alpha))

    pol = dict(data.get("policy", {}))
    pol.setdefault("kind", "optimal")
    if pol["kind"] == "feedback":
        if "control" not in pol or len(pol["control"]) != model.dim_u:
            raise ConfigError("feedback policy needs one control expression per action axis",
                              "policy.control")
        from .expr import as_expr
        for s in pol["control"]:
            as_expr(s, list(model.x_names) + ["t"])
    if pol["kind"] == "file" and "path" not in pol:
        raise ConfigError("file policy needs a path", "policy.path")

    bank = None
    if data.get("bank"):
        pairs = []
        for j, b in enumerate(data["bank"]):
            try:
                pairs.append(TestPair.build(b["name"], b["f"], b["g"], grid, model.dim_u,
                                            b.get("lip_u")))
            except ConfigError as exc:
                raise ConfigError(str(exc), f"bank.{j}") from None
        bank = tuple(pairs)

    out = data.get("output", {})
    return ExperimentConfig(model, kind, x0, grid, schedule, mc, pol, bank,
                            out.get("dir", "out"), out.get("format", "csv"), None, source)
