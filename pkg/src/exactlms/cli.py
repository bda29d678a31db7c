"""Command-line front end: ``exactlms <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from typing import Sequence

import numpy as np

from . import classical, closure, montecarlo, numerics
from .config import ConfigError, load_config, moments_for, preset_scenario
from .model import model_to_dict

EXIT_CONFIG = 2
EXIT_CAP = 3
EXIT_UNSTABLE = 4

log = logging.getLogger("exactlms")


def to_db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else float("-inf")


def _fmt(x) -> str:
    # repr round-trips a float exactly
    return repr(float(x))


def parse_range(text: str) -> list[int]:
    """``"3"`` -> [3]; ``"1:4"`` -> [1, 2, 3, 4]; ``"1,3,5"`` -> [1, 3, 5]."""
    try:
        if ":" in text:
            lo, hi = text.split(":")
            return list(range(int(lo), int(hi) + 1))
        return [int(t) for t in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad integer range {text!r}") from exc


def parse_beta_grid(text: str) -> list[float]:
    """``lo:hi:steps`` inclusive, linearly spaced."""
    try:
        lo, hi, steps = text.split(":")
        return [float(b) for b in np.linspace(float(lo), float(hi), int(steps))]
    except ValueError as exc:
        raise ConfigError(f"bad beta grid {text!r}; expected lo:hi:steps") from exc


def resolve_config(args):
    if args.config:
        cfg = load_config(args.config)
        if args.beta is not None:
            cfg = cfg.replace(beta=args.beta)
        return cfg
    if not args.preset:
        raise ConfigError("pass --config PATH or --preset with --n/--m/--p")
    if None in (args.n, args.m, args.p):
        raise ConfigError("--preset needs --n, --m and --p")
    beta = args.beta if args.beta is not None else 0.01
    return preset_scenario(args.preset, args.n, args.m, args.p, beta, args.dist)


class Output:
    def __init__(self, path: str | None):
        self.path = path

    def __enter__(self):
        self.fh = open(self.path, "w", newline="") if self.path else sys.stdout
        return self.fh

    def __exit__(self, *exc):
        if self.path:
            self.fh.close()


def _write_rows(args, header: list[str], rows) -> None:
    with Output(args.out) as fh:
        if args.format == "json":
            json.dump([dict(zip(header, r)) for r in rows], fh, indent=1)
            fh.write("\n")
            return
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_json(args, data) -> None:
    with Output(args.out) as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")


def _echo_config(cfg) -> None:
    log.info("config %s", json.dumps(cfg.to_dict()))


def _build(cfg, kind: str, order: int, cap: int):
    if kind == "ia":
        return classical.ia_first_order(cfg) if order == 1 else classical.ia_second_order(cfg)
    return closure.derive_model(cfg, order, cap=cap)


def _curve_columns(names: Sequence[str]) -> list[str]:
    cols = []
    for n in names:
        cols.append(n)
        if n == "mse":
            cols.append("mse_db")
    return cols


def _curve_values(names, outputs, k):
    vals = []
    for n in names:
        v = float(outputs[n][k])
        vals.append(v)
        if n == "mse":
            vals.append(to_db(v))
    return vals


def _output_names(model) -> list[str]:
    means = sorted((n for n in model.outputs if n.startswith("mean_w_")), key=lambda s: int(s[7:]))
    return means + (["mse"] if "mse" in model.outputs else [])


def cmd_derive(args) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg)
    model = _build(cfg, args.model, args.order, args.cap)
    _write_json(args, model_to_dict(model))
    return 0


def cmd_count(args) -> int:
    rows = []
    ps = parse_range(args.p if args.p is not None else "0")
    for n in parse_range(args.n or "1"):
        for m in parse_range(args.m or "1"):
            for p in ps if args.order == 2 else ps[:1]:
                try:
                    c = closure.count_equations(n, m, p, args.order, cap=args.cap)
                except closure.ClosureCapExceeded:
                    c = "cap"
                rows.append([n, m, c] if args.order == 1 else [n, m, p, c])
    header = ["n", "m", "count"] if args.order == 1 else ["n", "m", "p", "count"]
    _write_rows(args, header, rows)
    return 0


def cmd_iterate(args) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg)
    model = _build(cfg, args.model, args.order, args.cap)
    traj = numerics.iterate(model, cfg.beta, args.iterations)
    names = _output_names(model)
    rows = [[k, *_curve_values(names, traj.outputs, k)] for k in range(traj.length)]
    _write_rows(args, ["k", *_curve_columns(names)], rows)
    return 0


def cmd_steady_state(args) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg)
    model = _build(cfg, args.model, args.order, args.cap)
    out = numerics.steady_state(model, cfg.beta)
    if "mse" in out:
        out["mse_db"] = to_db(out["mse"])
    _write_json(args, {"beta": cfg.beta, "model": args.model, "order": args.order, "outputs": out})
    return 0


def cmd_stability(args) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg)
    bound = classical.ia_beta_bound_mean(cfg)
    scan = (1e-4, 2.0 * bound)
    ia = numerics.find_beta_max(classical.ia_second_order(cfg), scan)
    exact = numerics.find_beta_max(closure.derive_model(cfg, 2, cap=args.cap), scan)
    report = {
        "ia_mean_bound": bound,
        "ia": ia.to_dict(),
        "exact": exact.to_dict(),
    }
    if args.empirical:
        grid = parse_beta_grid(args.beta_grid) if args.beta_grid else list(
            np.linspace(0.5 * exact.beta_max, 1.2 * ia.beta_max, 12)
        )
        table = montecarlo.divergence_probability(
            cfg, grid, args.trials, args.iterations or 1000, args.seed, args.threshold,
            workers=args.workers,
        )
        report["divergence"] = [{"beta": b, "probability": p} for b, p in table]
    _write_json(args, report)
    return 0


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg)
    if args.beta_grid:
        table = montecarlo.divergence_probability(
            cfg, parse_beta_grid(args.beta_grid), args.trials, args.iterations or 1000,
            args.seed, args.threshold, workers=args.workers,
        )
        _write_rows(args, ["beta", "probability"], [list(r) for r in table])
        return 0
    plan = montecarlo.TrialPlan(cfg, args.trials, args.iterations or 1000, args.seed, args.threshold)
    res = montecarlo.run(plan, workers=args.workers)
    n = cfg.n_adaptive
    header = ["k", *(f"mean_w_{i}" for i in range(n)), "mse", "mse_db", "stderr"]
    rows = [
        [k, *res.mean_weights[k], res.mse[k], to_db(res.mse[k]), res.standard_error_mse[k]]
        for k in range(res.iterations)
    ]
    _write_rows(args, header, rows)
    log.info("%d of %d trials diverged", res.diverged_trials, plan.trials)
    return 0


def _compare_sweep(args, cfg) -> int:
    rows = []
    exact = closure.derive_model(cfg, 2, cap=args.cap)
    ia = classical.ia_second_order(cfg)
    iters = args.iterations or 5000
    tail = max(1, iters // 10)
    for beta in parse_beta_grid(args.beta_grid):
        ex = numerics.steady_state(exact, beta)["mse"]
        cl = numerics.steady_state(ia, beta)["mse"]
        plan = montecarlo.TrialPlan(cfg.replace(beta=beta), args.trials, iters, args.seed, args.threshold)
        res = montecarlo.run(plan, workers=args.workers)
        mc = float(np.mean(res.mse[-tail:]))
        rows.append([beta, ex, to_db(ex), cl, to_db(cl), mc, to_db(mc), res.diverged_trials])
    header = ["beta", "exact_mse", "exact_mse_db", "ia_mse", "ia_mse_db",
              "mc_mse", "mc_mse_db", "mc_diverged"]
    _write_rows(args, header, rows)
    return 0


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg)
    if args.beta_grid:
        return _compare_sweep(args, cfg)
    iters = args.iterations or 1000
    exact = closure.derive_model(cfg, 2, cap=args.cap)
    ia = classical.ia_second_order(cfg)
    names = _output_names(exact)
    ex = numerics.iterate(exact, cfg.beta, iters - 1).outputs
    cl = numerics.iterate(ia, cfg.beta, iters - 1).outputs
    plan = montecarlo.TrialPlan(cfg, args.trials, iters, args.seed, args.threshold)
    res = montecarlo.run(plan, workers=args.workers)
    mc = {f"mean_w_{i}": res.mean_weights[:, i] for i in range(cfg.n_adaptive)}
    mc["mse"] = res.mse
    header = ["k"]
    for label in ("exact", "ia", "mc"):
        header += [f"{label}_{c}" for c in _curve_columns(names)]
    header += [f"mc_stderr_mean_w_{i}" for i in range(cfg.n_adaptive)] + ["mc_stderr_mse"]
    rows = []
    for k in range(iters):
        row = [k]
        for outs in (ex, cl, mc):
            row += _curve_values(names, outs, k)
        row += list(res.standard_error_weights[k]) + [res.standard_error_mse[k]]
        rows.append(row)
    _write_rows(args, header, rows)
    return 0


def cmd_moments(args) -> int:
    spec = moments_for(args.dist, args.max_order)
    rows = [[n, v] for n, v in spec.even_moments.items()]
    _write_rows(args, ["order", "gamma"], rows)
    return 0


COMMANDS = {
    "derive": cmd_derive,
    "count": cmd_count,
    "iterate": cmd_iterate,
    "steady-state": cmd_steady_state,
    "stability": cmd_stability,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "moments": cmd_moments,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exactlms",
        description="Exact and classical moment models of deficient-length LMS with MA inputs.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p, sizes_as_ranges=False):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--preset", choices=["config1", "config2"])
        if sizes_as_ranges:
            p.add_argument("--n", help="N, a range lo:hi or a list a,b,c")
            p.add_argument("--m", help="M, a range lo:hi or a list a,b,c")
            p.add_argument("--p", help="P, a range lo:hi or a list a,b,c")
        else:
            p.add_argument("--n", type=int)
            p.add_argument("--m", type=int)
            p.add_argument("--p", type=int)
        p.add_argument("--beta", type=float)
        p.add_argument("--dist", choices=["gaussian", "laplacian"], default="gaussian")

    def common(p, fmt):
        p.add_argument("--out", metavar="PATH")
        p.add_argument("--format", choices=["csv", "json"], default=fmt)
        p.add_argument("--cap", type=int, default=closure.DEFAULT_CAP, metavar="COUNT")

    def model_flags(p):
        p.add_argument("--order", type=int, choices=[1, 2], default=2)
        p.add_argument("--model", choices=["exact", "ia"], default="exact")

    def mc_flags(p):
        p.add_argument("--trials", type=int, default=10000)
        p.add_argument("--iterations", type=int)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--threshold", type=float, default=10.0,
                       help="a trial diverges once any |w_i| exceeds this")
        p.add_argument("--beta-grid", metavar="LO:HI:STEPS")

    p = sub.add_parser("derive", help="derive a model and export it as JSON")
    config_flags(p); common(p, "json"); model_flags(p)

    p = sub.add_parser("count", help="count state equations of the exact closure")
    config_flags(p, sizes_as_ranges=True); common(p, "csv")
    p.add_argument("--order", type=int, choices=[1, 2], default=1)

    p = sub.add_parser("iterate", help="iterate a model and emit its output curves")
    config_flags(p); common(p, "csv"); model_flags(p)
    p.add_argument("--iterations", type=int, default=1000)

    p = sub.add_parser("steady-state", help="closed-form steady-state outputs")
    config_flags(p); common(p, "json"); model_flags(p)

    p = sub.add_parser("stability", help="largest stable step size, IA and exact")
    config_flags(p); common(p, "json"); mc_flags(p)
    p.add_argument("--empirical", action="store_true", help="add a divergence-probability sweep")

    p = sub.add_parser("simulate", help="Monte Carlo curves, or divergence table with --beta-grid")
    config_flags(p); common(p, "csv"); mc_flags(p)

    p = sub.add_parser("compare", help="exact, IA and Monte Carlo side by side")
    config_flags(p); common(p, "csv"); mc_flags(p)

    p = sub.add_parser("moments", help="moment table of the driving noise")
    p.add_argument("--dist", choices=["gaussian", "laplacian"], default="gaussian")
    p.add_argument("--max-order", type=int, default=8)
    p.add_argument("--out", metavar="PATH")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except closure.ClosureCapExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAP
    except (numerics.UnstableError, numerics.DivergenceError, numerics.NoCrossingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
