"""Command-line interface.

    diffquant validate CONFIG
    diffquant eval CONFIG [--criterion K] [--method pde|mc|both]
    diffquant solve CONFIG
    diffquant quantize CONFIG --policy IN.json (--n N | --m M | --dt DT)
    diffquant pairing CONFIG [--policy IN.json] [--n N ...]
    diffquant study KIND CONFIG

CONFIG may also be given as ``--config PATH``, or as the bare name of a
shipped config (``lq.toml``).  Results go to ``--out-dir`` as CSV (default)
or JSON; ``--plot`` also writes PNG figures next to them.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.  Errors
are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, pde
from .borkar import pairing, pairing_bound, pairing_markov, pseudo_distance
from .config import CRITERIA, ExperimentConfig, load_config, shipped_config
from .errors import ConfigError, DiffQuantError, NumericalError
from .expr import as_expr
from .grid import Grid
from .policy import (FiniteActionPolicy, Policy, SimplexGrid, build_action_grid,
                     discretize_policy_time, policy_from_dict, policy_id, policy_to_dict,
                     quantize_policy_actions, quantize_policy_space)
from .simulate import mc_discounted, mc_ergodic, mc_exit, mc_finite_horizon
from .studies import STUDIES, run_study

logger = logging.getLogger("diffquant")

DEFAULT_RESOLUTION = 16


# -- config and policy plumbing ------------------------------------------------------


def _resolve_path(arg: str) -> Path:
    p = Path(arg)
    if p.exists() or p.parent != Path("."):
        return p
    return shipped_config(arg)


def _load(args) -> ExperimentConfig:
    path = args.config_opt or args.config
    if path is None:
        raise ConfigError("no config given (positional CONFIG or --config)", "config")
    cfg = load_config(_resolve_path(path))
    return cfg.with_overrides(seed=args.seed, threads=args.threads, out_dir=args.out_dir,
                              out_format=args.format, criterion=getattr(args, "criterion", None))


def _feedback_policy(cfg: ExperimentConfig, resolution: int) -> Policy:
    names = list(cfg.model.x_names) + ["t"]
    exprs = [as_expr(s, names) for s in cfg.policy["control"]]

    def control(t, X):
        env = {n: X[:, i] for i, n in enumerate(cfg.model.x_names)}
        env["t"] = t
        return np.stack([np.broadcast_to(np.asarray(e.evaluate(env), dtype=float), (X.shape[0],))
                         for e in exprs], axis=1)

    stationary = not any("t" in e.variables for e in exprs)
    return FiniteActionPolicy.feedback(build_action_grid(cfg.model.action, resolution), control,
                                       stationary, name="feedback")


def _optimal_policy(cfg: ExperimentConfig, resolution: int):
    """HJB solve for the configured criterion; returns ``(policy, value_at_x0, field, grid)``."""
    model, grid, ag = cfg.model, cfg.grid, build_action_grid(cfg.model.action, resolution)
    if cfg.criterion == "discounted":
        rep, pol = pde.solve_hjb_discounted(model, ag, grid)
    elif cfg.criterion == "exit":
        rep, pol = pde.solve_hjb_exit(model, ag, grid)
    elif cfg.criterion == "ergodic":
        rep, pol = pde.solve_hjb_ergodic(model, ag, grid)
        return pol, float(rep.scalar_out), rep.field.values, rep.field.grid, rep
    else:
        dt = cfg.schedule.reference_dt or (cfg.mc.dt if cfg.mc else 0.01)
        res = pde.solve_hjb_parabolic(model, ag, grid, dt, refresh=None)
        return res.policy, res.value_at(cfg.x0), res.values[0], grid, res
    return pol, rep.value_at(cfg.x0), rep.field.values, rep.field.grid, rep


def _policy(cfg: ExperimentConfig, path: Optional[str] = None) -> Policy:
    if path is not None:
        return policy_from_dict(json.loads(Path(path).read_text()))
    spec = cfg.policy
    res = int(spec.get("resolution", cfg.schedule.reference_n or DEFAULT_RESOLUTION))
    kind = spec.get("kind", "optimal")
    if kind == "file":
        return policy_from_dict(json.loads(Path(spec["path"]).read_text()))
    if kind == "constant":
        return FiniteActionPolicy.constant(build_action_grid(cfg.model.action, res),
                                           spec.get("index", 0))
    if kind == "feedback":
        return _feedback_policy(cfg, res)
    return _optimal_policy(cfg, res)[0]


# -- output ------------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _json_value(v):
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def _write_table(cfg: ExperimentConfig, stem: str, header: Sequence[str], rows: list) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.out_format == "json":
        path = out / f"{stem}.json"
        records = [{k: _json_value(v) for k, v in zip(header, r)} for r in rows]
        path.write_text(json.dumps(records, indent=2) + "\n")
    else:
        path = out / f"{stem}.csv"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        path.write_text(buf.getvalue())
    return path


def _report(written: list, **extra) -> None:
    print(json.dumps({"written": [str(p) for p in written], **extra}, default=_fmt))


# -- subcommands ------------------------------------------------------------------------


def cmd_validate(args) -> int:
    cfg = _load(args)
    model = cfg.model
    X = cfg.grid.nodes()
    if X.shape[0] > 2000:
        X = X[np.linspace(0, X.shape[0] - 1, 2000).astype(int)]
    atoms = build_action_grid(model.action, 4).atoms
    checks = model.spot_check(X, atoms)
    if checks["min_cost"] < 0:
        logger.warning("running cost is negative somewhere on the grid")
    _report([], config=cfg.source, criterion=cfg.criterion, checks=checks)
    return 0


_EVAL_FIELDS = ("method", "criterion", "value", "std_error", "residual", "n_paths", "dt",
                "seed", "policy_id")


def _mc_report(cfg: ExperimentConfig, policy: Policy):
    sim, mc, model = cfg.sim_config(), cfg.mc, cfg.model
    if cfg.criterion == "discounted":
        return mc_discounted(model, policy, cfg.x0, sim, mc.t_max or math.ceil(14.0 / model.alpha))
    if cfg.criterion == "ergodic":
        return mc_ergodic(model, policy, cfg.x0, sim, mc.burn_in, mc.t_avg)
    if cfg.criterion == "exit":
        return mc_exit(model, policy, cfg.x0, sim)
    return mc_finite_horizon(model, policy, cfg.x0, sim)


def _pde_value(cfg: ExperimentConfig, policy: Policy):
    model, grid = cfg.model, cfg.grid
    if cfg.criterion == "discounted":
        rep = pde.solve_discounted(model, policy, grid)
        return rep.value_at(cfg.x0), rep.residual_inf_norm
    if cfg.criterion == "ergodic":
        rep = pde.solve_ergodic(model, policy, grid)
        return float(rep.scalar_out), rep.residual_inf_norm
    if cfg.criterion == "exit":
        rep = pde.solve_exit(model, policy, grid)
        return rep.value_at(cfg.x0), rep.residual_inf_norm
    dt = cfg.schedule.reference_dt or (cfg.mc.dt if cfg.mc else 0.01)
    res = pde.solve_parabolic(model, policy, grid, dt)
    return res.value_at(cfg.x0), res.residual_inf_norm


def cmd_eval(args) -> int:
    cfg = _load(args)
    policy = _policy(cfg, args.policy)
    pid = policy_id(policy)
    rows = []
    if args.method in ("pde", "both"):
        value, res = _pde_value(cfg, policy)
        rows.append(["pde", cfg.criterion, value, math.nan, res, 0, math.nan, -1, pid])
    if args.method in ("mc", "both"):
        if cfg.mc is None:
            raise ConfigError("Monte Carlo evaluation needs an [mc] section", "mc")
        rep = _mc_report(cfg, policy)
        rows.append(["mc", cfg.criterion, rep.estimate, rep.std_error, math.nan, rep.n_paths,
                     rep.dt, rep.seed, pid])
    path = _write_table(cfg, f"eval_{cfg.criterion}", _EVAL_FIELDS, rows)
    _report([path], values={r[0]: r[2] for r in rows})
    return 0


def cmd_solve(args) -> int:
    cfg = _load(args)
    res = args.n or cfg.schedule.reference_n or DEFAULT_RESOLUTION
    policy, value, values, grid, rep = _optimal_policy(cfg, res)
    header = [f"x{i + 1}" for i in range(grid.dim)] + ["value"]
    rows = [list(x) + [v] for x, v in zip(grid.nodes(), values)]
    written = [_write_table(cfg, f"value_{cfg.criterion}", header, rows)]
    pol_path = Path(cfg.out_dir) / f"policy_{cfg.criterion}.json"
    pol_path.write_text(json.dumps(policy_to_dict(policy)) + "\n")
    written.append(pol_path)
    if args.plot:
        from .plotting import plot_field
        written.append(plot_field(grid, values, Path(cfg.out_dir) / f"value_{cfg.criterion}.png",
                                  title=f"{cfg.criterion} value"))
    _report(written, value_at_x0=value, iterations=rep.iterations,
            residual=rep.residual_inf_norm, policy_id=policy_id(policy))
    return 0


def cmd_quantize(args) -> int:
    cfg = _load(args)
    policy = _policy(cfg, args.policy)
    if args.n is not None:
        policy = quantize_policy_actions(policy, build_action_grid(cfg.model.action, args.n))
    if args.m is not None:
        cells = args.cells or list(cfg.schedule.state_cells)
        cg = Grid.uniform(cfg.grid.low, cfg.grid.high, counts=[c + 1 for c in cells])
        policy = quantize_policy_space(policy, cg, SimplexGrid(policy.action_grid, args.m))
    if args.dt is not None:
        T = cfg.model.horizon_T
        if T is None:
            raise ConfigError("time quantization needs model.horizon", "model.horizon")
        policy = discretize_policy_time(policy, args.dt, T)
    if args.n is None and args.m is None and args.dt is None:
        raise ConfigError("quantize needs at least one of --n, --m, --dt", "quantize")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(args.output) if args.output else out / "policy_quantized.json"
    path.write_text(json.dumps(policy_to_dict(policy)) + "\n")
    _report([path], policy_id=policy_id(policy))
    return 0


_PAIRING_FIELDS = ("name", "pair_id", "n", "value", "reference_value", "diff", "bound",
                   "error_estimate", "pseudo_distance")


def cmd_pairing(args) -> int:
    cfg = _load(args)
    v = _policy(cfg, args.policy)
    bank = cfg.test_bank()
    ns = args.n or list(cfg.schedule.n) or [4, 16, 64]
    T = None if v.stationary else cfg.model.horizon_T

    def pair_value(p, pol):
        return pairing(p, pol) if T is None else pairing_markov(p, pol, T)

    ref = {p.pair_id: pair_value(p, v) for p in bank}
    rows, plot_rows = [], []
    for n in ns:
        vn = quantize_policy_actions(v, build_action_grid(cfg.model.action, n))
        pd = pseudo_distance(vn, v, bank, T=T)
        for p in bank:
            r = pair_value(p, vn)
            diff = r.value - ref[p.pair_id].value
            bound = pairing_bound(p, n) if p.lip_u is not None and T is None else math.nan
            rows.append([p.name, p.pair_id, n, r.value, ref[p.pair_id].value, diff, bound,
                         r.error_estimate, pd])
            plot_rows.append({"name": p.name, "n": n, "diff": diff, "bound": bound})
    written = [_write_table(cfg, "pairing", _PAIRING_FIELDS, rows)]
    if args.plot:
        from .plotting import plot_pairings
        written.append(plot_pairings(plot_rows, Path(cfg.out_dir) / "pairing.png"))
    _report(written, policy_id=policy_id(v))
    return 0


def cmd_study(args) -> int:
    cfg = _load(args)
    if args.kind != cfg.criterion:
        raise ConfigError(f"study {args.kind!r} needs criterion.kind = {args.kind!r} "
                          f"(config has {cfg.criterion!r})", "criterion.kind")
    result = run_study(cfg, args.kind)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.out_format == "json":
        path = out / f"study_{args.kind}.json"
        path.write_text(result.to_json() + "\n")
    else:
        path = out / f"study_{args.kind}.csv"
        path.write_text(result.to_csv())
    written = [path]
    if args.plot:
        from .plotting import plot_study
        written.append(plot_study(result, out / f"study_{args.kind}.png"))
    bad = result.gap_violations()
    _report(written, reference=result.reference, rows=len(result.rows),
            runtime=round(result.runtime, 3), gap_violations=len(bad))
    return 0


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="config_opt", metavar="PATH",
                        help="experiment TOML (alternative to the positional argument)")
    common.add_argument("--seed", type=int, help="override mc.seed")
    common.add_argument("--threads", type=int,
                        help="worker threads (results do not depend on it; "
                             "default DIFFQUANT_THREADS or 1)")
    common.add_argument("--out-dir", help="override output.dir")
    common.add_argument("--format", choices=("csv", "json"), help="override output.format")
    common.add_argument("--plot", action="store_true", help="also write PNG figures")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="diffquant", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("validate", cmd_validate, "parse a config and spot-check its model")
    p.add_argument("config", nargs="?")

    p = add("eval", cmd_eval, "cost of one policy under one criterion")
    p.add_argument("config", nargs="?")
    p.add_argument("--criterion", help=f"override criterion.kind ({', '.join(CRITERIA)})")
    p.add_argument("--method", choices=("pde", "mc", "both"), default="pde")
    p.add_argument("--policy", help="policy JSON (default: the config's [policy])")

    p = add("solve", cmd_solve, "HJB solve; writes the value field and the optimal policy")
    p.add_argument("config", nargs="?")
    p.add_argument("--n", type=int, help="action resolution (default schedule.reference_n)")

    p = add("quantize", cmd_quantize, "quantize a policy in actions, space, or time")
    p.add_argument("config", nargs="?")
    p.add_argument("--policy", help="policy JSON (default: the config's [policy])")
    p.add_argument("--n", type=int, help="action resolution")
    p.add_argument("--m", type=int, help="simplex resolution (with --cells)")
    p.add_argument("--cells", type=int, nargs="+", help="cells per state axis")
    p.add_argument("--dt", type=float, help="time step for piecewise-constant-in-time policies")
    p.add_argument("-o", "--output", help="output path (default OUT_DIR/policy_quantized.json)")

    p = add("pairing", cmd_pairing, "test-function pairings of quantized policies")
    p.add_argument("config", nargs="?")
    p.add_argument("--policy", help="policy JSON (default: the config's [policy])")
    p.add_argument("--n", type=int, nargs="+", help="action resolutions (default schedule.n)")

    p = add("study", cmd_study, "near-optimality study over the configured schedule")
    p.add_argument("kind", choices=sorted(STUDIES))
    p.add_argument("config", nargs="?")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        code, kind = 1, "config"
        err = exc
    except NumericalError as exc:
        code, kind = 2, "numerical"
        err = exc
    except DiffQuantError as exc:
        code, kind = 1, "config"
        err = exc
    payload = {"error": type(err).__name__, "kind": kind, "message": str(err)}
    if getattr(err, "field", None):
        payload["field"] = err.field
    print(json.dumps(payload), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
