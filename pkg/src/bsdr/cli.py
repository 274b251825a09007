"""Command-line entry point.

Exit codes: 0 success, 1 domain error, 2 usage error. Diagnostics go to
stderr; results are written only to files inside ``--out``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import oracle
from .config import DEFAULT_SEED, RunConfig, load_config
from .errors import BsdrError
from .experiments import EXPERIMENTS, generate_dataset, prefix_length, run_experiment
from .gridworld import GridSpec
from .inference import (
    JointParams,
    appendix_heuristic_fit,
    closed_form_theta_r,
    dataset_log_likelihood,
    goal_posterior,
    grid_posterior,
    lagrange_residual,
    mle_fit,
)
from .io import load_dataset, save_dataset, write_csv, write_json
from .model import BsdrParams, log_partition

log = logging.getLogger("bsdr")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--out", type=Path, help="output directory (created if missing)")
    common.add_argument("--seed", type=int, default=None, help=f"seed override (default: config seed, else {DEFAULT_SEED})")
    common.add_argument("--workers", type=int, default=1, help="parallel workers for grid evaluation")
    common.add_argument("--oracle-cap", type=int, default=None, help="maximum trajectories an enumeration may touch")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="bsdr", description="State-dependent Boltzmann rationality toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("simulate", parents=[common], help="sample a dataset from the configured true parameters")
    for name, text in (("posterior", "grid posterior marginals"), ("fit", "maximum-likelihood fit"),
                       ("fit-appendix", "Z-free constrained heuristic fit"),
                       ("goal-infer", "goal posteriors from trajectory prefixes")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--data", type=Path, help="JSON-lines dataset (overrides config 'data')")
        if name == "fit":
            sp.add_argument("--nonneg-beta", action="store_true",
                            help="project rationality weights onto theta_b >= 0 (so beta(s) >= 0)")
    ep = sub.add_parser("experiment", parents=[common], help="run one experiment harness")
    ep.add_argument("name", choices=EXPERIMENTS)
    ep.add_argument("--timing", action="store_true", help="include wall-clock time in the JSON report")
    sub.add_parser("oracle-check", parents=[common], help="compare DP against brute-force enumeration")
    return p


# ---------------------------------------------------------------------------


def _out_dir(args) -> Path:
    if args.out is None:
        raise UsageError(f"bsdr {args.command}: --out is required")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise BsdrError(f"cannot create output directory {args.out}: {e}") from None
    return args.out


def _config(args) -> RunConfig:
    if args.config is None:
        raise UsageError(f"bsdr {args.command}: --config is required")
    cfg = load_config(args.config)
    if args.oracle_cap is not None:
        cfg.oracle_cap = args.oracle_cap
    return cfg


def _seed(args, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else cfg.seed


def cmd_simulate(args) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    seed = _seed(args, cfg)
    truth = JointParams(cfg.truth_theta_r(), cfg.population(seed))
    data = generate_dataset(cfg.spec, truth, cfg.simulate_count(), seed)
    save_dataset(data, out / "dataset.jsonl")


def cmd_posterior(args) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    data = load_dataset(cfg.data_path(args.data), cfg.spec)
    axes, prior, max_points = cfg.posterior()
    post = grid_posterior(data, axes, prior, max_points=max_points, workers=args.workers)
    rows = []
    for name, values in zip(axes.names, axes.values):
        _, probs = post.marginal(name)
        rows += [{"axis": name, "value": float(v), "probability": float(p)} for v, p in zip(values, probs)]
    write_csv(rows, out / "posterior_marginals.csv")
    d = post.to_dict()
    d["prior"] = {"kind": prior.kind, "sigma": prior.sigma}
    d["n_trajectories"] = len(data)
    write_json(d, out / "posterior.json")


def cmd_fit(args) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    data = load_dataset(cfg.data_path(args.data), cfg.spec)
    prior, opt = cfg.fit(nonneg_beta=args.nonneg_beta)
    res = mle_fit(data, prior, opt)
    d = res.to_dict()
    d["prior"] = {"kind": prior.kind, "sigma": prior.sigma}
    d["nonneg_beta"] = opt.nonneg_beta
    write_json(d, out / "fit.json")


def cmd_fit_appendix(args) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    data = load_dataset(cfg.data_path(args.data), cfg.spec)
    res = appendix_heuristic_fit(data, cfg.fit_appendix())
    d = res.to_dict()
    cf = closed_form_theta_r(data, res.params.theta_b_by_agent)
    d["closed_form_theta_r"] = cf.tolist()
    d["closed_form_max_abs_diff"] = float(np.abs(cf - res.params.theta_r).max())
    d["lagrange_residual"] = lagrange_residual(res.params, data)
    # for comparison with the likelihood-based fit, the log-likelihood with log Z restored
    d["log_likelihood"] = dataset_log_likelihood(data, res.params)
    write_json(d, out / "fit_appendix.json")


def cmd_goal_infer(args) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    data = load_dataset(cfg.data_path(args.data), cfg.spec)
    gi = cfg.goal_inference()
    variants = [cfg.spec.with_goals([g]) for g in gi["candidates"]]
    theta_r = gi["theta_r"]
    rows = []
    for agent in data.agents:
        if agent in gi["theta_b"]:
            tb = gi["theta_b"][agent]
        elif "default" in gi["theta_b"]:
            tb = gi["theta_b"]["default"]
        else:
            raise BsdrError(f"no rationality weights for agent {agent!r} in [goal_inference] or [truth]")
        backups = [log_partition(BsdrParams(theta_r, tb), v) for v in variants]
        for i, xi in enumerate(data.trajectories[agent]):
            for f in gi["fractions"]:
                k = prefix_length(f, cfg.spec.horizon)
                post = goal_posterior(xi.states[: k + 1], variants, tb, theta_r, gi["prior"], backups=backups)
                for g, p in zip(gi["candidates"], post):
                    rows.append({"agent": agent, "trajectory": i, "fraction": f, "k": k,
                                 "goal_x": g[0], "goal_y": g[1], "probability": float(p)})
    write_csv(rows, out / "goal_posteriors.csv")


def cmd_experiment(args) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    ecfg = cfg.experiment(args.name, seed=args.seed, workers=args.workers)
    report = run_experiment(ecfg)
    d = report.to_dict(include_timing=args.timing)
    d["config"] = ecfg.to_dict()
    write_json(d, out / f"{args.name}.json")
    write_csv(report.raw, out / f"{args.name}.csv")
    for table, rows in report.tables.items():
        write_csv(rows, out / f"{args.name}_{table}.csv")


def cmd_oracle_check(args) -> int:
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    cap = args.oracle_cap if args.oracle_cap is not None else oracle.DEFAULT_ORACLE_CAP
    instances = oracle.default_suite(seed)
    skipped = []
    if args.config is not None:
        cfg = load_config(args.config)
        if args.oracle_cap is None:
            cap = cfg.oracle_cap
        spec: GridSpec = cfg.spec
        if 5 ** spec.horizon <= cap:
            instances.append((spec, oracle.random_params(np.random.default_rng(seed), spec)))
        else:
            skipped.append(spec.to_dict())
            log.warning("configured grid has 5^%d trajectories, above the oracle cap %d; skipped",
                        spec.horizon, cap)
    rows = oracle.run_suite(instances, cap)
    failed = [r for r in rows if not r["passed"]]
    if args.out is not None:
        out = _out_dir(args)
        write_json({"tolerance": oracle.TOL, "instances": rows, "skipped": skipped,
                    "passed": not failed}, out / "oracle_check.json")
    for r in failed:
        errs = {k: v for k, v in r.items() if k.endswith("_error")}
        print(f"oracle mismatch on {r['spec']}: {errs}", file=sys.stderr)
    return EXIT_DOMAIN if failed else EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "posterior": cmd_posterior,
    "fit": cmd_fit,
    "fit-appendix": cmd_fit_appendix,
    "goal-infer": cmd_goal_infer,
    "experiment": cmd_experiment,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s: %(message)s")
    try:
        code = COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (BsdrError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK if code is None else code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
