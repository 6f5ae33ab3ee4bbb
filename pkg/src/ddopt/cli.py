"""Command-line entry point.

Exit status: 0 on success, 1 on runtime errors or failed checks, 2 on
configuration errors.  Human-readable output goes to stdout, diagnostics to
stderr, machine-readable tables only to files under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checks import SUITES, run_suites
from .config import PROFILES, load_config, to_ini
from .errors import ConfigError, DDOptError, NonConvergenceError
from .experiments import (
    build_scenario,
    default_jobs,
    rate_sweep,
    run_experiment,
    solve_reference,
    write_outputs,
)
from .optimizers.runner import CSV_VERSION


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--profile", choices=PROFILES, help="population scale preset")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config value (repeatable)")
    common.add_argument("--out", help="output directory (defaults to the config's output)")
    common.add_argument("--jobs", type=int, default=None,
                        help="worker processes for independent trials (default: logical cores)")

    parser = argparse.ArgumentParser(prog="ddopt", description=(
        "Online optimization under decision-dependent distribution dynamics."))
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run the configured experiment")
    sub.add_parser("oracle", parents=[common], help="solve the offline benchmark problem")
    sub.add_parser("sweep", parents=[common], help="convergence-rate sweep over horizons")
    sub.add_parser("describe", parents=[common], help="print the fully resolved config")
    check = sub.add_parser("check", parents=[common], help="run the invariant suites")
    check.add_argument("--suite", action="append", choices=sorted(SUITES),
                       help="run only this suite (repeatable)")
    check.add_argument("--seed", type=int, default=0, help="seed for the suites' random inputs")
    # test hook: corrupt one suite to confirm that failures are reported
    check.add_argument("--inject-fault", dest="fault", choices=sorted(SUITES),
                       help=argparse.SUPPRESS)
    return parser


def _config(args):
    return load_config(args.config, args.profile, args.overrides)


def _out_dir(args, cfg) -> Path:
    return Path(args.out if args.out else cfg.output)


def _jobs(args) -> int:
    return args.jobs if args.jobs is not None else default_jobs()


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    if cfg.scenario == "rate_sweep":
        return _report_sweep(rate_sweep(cfg, jobs=_jobs(args)), cfg, out)
    result = run_experiment(cfg, jobs=_jobs(args))
    paths = write_outputs(result, out)
    for alg, s in result.summary().items():
        print(f"{alg}: final_gap={s['final_gap']:.6g} final_w1={s['final_w1']:.6g} "
              f"final_distance={s['final_distance']:.6g} trials={s['trials']}")
    print(f"wrote {paths['aggregate']}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if cfg.scenario != "rate_sweep":
        raise ConfigError(f"sweep needs scenario = rate_sweep, config has {cfg.scenario!r}")
    return _report_sweep(rate_sweep(cfg, jobs=_jobs(args)), cfg, _out_dir(args, cfg))


def _report_sweep(res, cfg, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(res.to_csv(), encoding="utf-8")
    meta = {"csv_version": CSV_VERSION, "config": cfg.as_sections(),
            "overrides": list(cfg.overrides), "slope": res.slope,
            "intercept": res.intercept}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    for T, eta, g in zip(res.horizons, res.etas, res.avg_sq_grad):
        print(f"T={int(T)} eta={eta:.6g} avg_sq_grad={g:.6g}")
    print(f"log-log slope={res.slope:.4f}")
    return 0


def cmd_oracle(args) -> int:
    cfg = _config(args)
    scenario = build_scenario(cfg)
    try:
        res, _ = solve_reference(cfg, scenario)
    except NonConvergenceError as exc:
        print(f"oracle did not converge: best residual {exc.residual:.3e}", file=sys.stderr)
        return 1
    with np.printoptions(precision=10, linewidth=120):
        print(f"u* = {res.u_star}")
    print(f"value* = {res.value_star!r}")
    print(f"residual = {res.residual:.3e} (restarts converged: {res.restarts_converged})")
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"u_star": res.u_star.tolist(), "value_star": res.value_star,
            "residual": res.residual, "restarts_converged": res.restarts_converged,
            "config": cfg.as_sections(), "overrides": list(cfg.overrides)}
    (out / "oracle.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    return 0


def cmd_check(args) -> int:
    results = run_suites(args.suite, seed=args.seed, fault=args.fault)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name} ({r.cases} cases)")
        for failure in r.failures:
            print(f"  {r.name}: {failure}")
    return 0 if all(r.passed for r in results) else 1


def cmd_describe(args) -> int:
    print(to_ini(_config(args)), end="")
    return 0


COMMANDS = {"run": cmd_run, "oracle": cmd_oracle, "check": cmd_check,
            "sweep": cmd_sweep, "describe": cmd_describe}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DDOptError, ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
