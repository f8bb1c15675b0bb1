import argparse
import logging
import os
import re
import sys
from typing import List, Optional

import numpy as np

from engine.errors import TsldError
from engine.lqr import (AdmissibleSet, CostSpec, SystemParams, closed_loop, in_admissible_set,
                        solve_riccati, spectral_radius)
from harness.config import ALGORITHMS, ConfigError, ExperimentConfig, ValidationError, build_noise, load_config
from harness.data_manager import OutputError
from harness.experiments import BatchFailure, compare_iteration_counts, run_batch
from harness.plots import emit_plots
from harness.selftest import run_selftest
from harness.utils.logger import configure_logging

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_SELFTEST = 3

logger = logging.getLogger('Harness')


def parse_seeds(text: str) -> List[int]:
    """Parse '0,1,2' or '0-9' (inclusive) or a mix of both; seeds are non-negative"""
    seeds = []
    for part in filter(None, (p.strip() for p in text.split(','))):
        match = re.fullmatch(r'(\d+)(?:-(\d+))?', part)
        if match is None:
            raise ValidationError('seeds', f"cannot parse {part!r}")
        lo = int(match.group(1))
        hi = int(match.group(2)) if match.group(2) else lo
        seeds.extend(range(lo, hi + 1))
    if not seeds:
        raise ValidationError('seeds', f"no seed in {text!r}")
    return seeds


def parse_horizons(text: str) -> List[int]:
    try:
        return [int(h) for h in text.split(',') if h.strip()]
    except ValueError:
        raise ValidationError('horizons', f"cannot parse {text!r}")


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    changes = {}
    if getattr(args, 'seeds', None):
        changes['seeds'] = parse_seeds(args.seeds)
    if getattr(args, 'out', None):
        changes['output_dir'] = args.out
    if getattr(args, 'algorithm', None):
        changes['algorithm'] = args.algorithm
    if getattr(args, 'horizon', None) is not None:
        changes['horizon'] = args.horizon
    return cfg.replace(**changes) if changes else cfg


def cmd_run(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    report = run_batch(cfg, args.parallel)
    emit_plots(report, os.path.join(cfg.output_dir, 'plots'))
    summary = report.summary()
    print(f"{cfg.name} ({cfg.algorithm}): {len(report.succeeded)}/{len(report.seeds)} seed(s) succeeded")
    print(f"  J* = {summary['J_star']:.6g}")
    print(f"  R(T) = {summary['final_cum_regret']:.6g}, R(T)/sqrt(T) = {summary['final_normalized_regret']:.6g}")
    if report.failures:
        print(f"  failed: {report.failures}")
    print(f"  results in {cfg.output_dir}")
    return EXIT_OK


def cmd_compare_iters(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    table = compare_iteration_counts(cfg, parse_horizons(args.horizons), args.parallel)
    print(f"{'T':>8} {'preconditioned':>16} {'naive':>16} {'ratio':>10}")
    for row in table:
        print(f"{row.horizon:>8} {row.preconditioned:>16.4g} {row.naive:>16.4g} {row.ratio:>10.1f}")
    return EXIT_OK


def cmd_riccati_check(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    params = SystemParams(np.array(cfg.A), np.array(cfg.B))
    cost = CostSpec(np.array(cfg.Q), np.array(cfg.R))
    W = build_noise(cfg).W
    solution = solve_riccati(params, cost, cfg.riccati_tol, cfg.riccati_max_iter, W=W)
    loop = closed_loop(params, solution.K)
    verdict = in_admissible_set(params, AdmissibleSet(cfg.S, cfg.rho, cfg.M_J, cost), W,
                                tol=cfg.riccati_tol, max_iter=cfg.riccati_max_iter)

    with np.printoptions(precision=4, suppress=True):
        print(f"K =\n{solution.K}")
    print(f"J(theta*) = {solution.J:.6g}")
    print(f"spectral radius of A+BK = {spectral_radius(loop):.4f}")
    print(f"||A+BK||_2 = {np.linalg.norm(loop, 2):.4f}")
    print(f"Riccati residual = {solution.residual:.2e} after {solution.iterations} iterations")
    status = 'admissible' if verdict.admitted else f"NOT admissible ({verdict.failed_clause}: {verdict.detail})"
    print(f"|theta*| = {verdict.norm:.4f} (S={cfg.S}), {status}")
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    results = run_selftest(args.seed)
    for result in results:
        print(f"{'PASS' if result.passed else 'FAIL'}  {result.name}: {result.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_SELFTEST
    print(f"All {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='main_harness',
        description='Thompson sampling with preconditioned Langevin dynamics for LQR: experiment harness')
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    def experiment_parser(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument('config', help='JSON experiment configuration')
        p.add_argument('--seeds', help="seed list, e.g. '0,1,2' or '0-9'")
        p.add_argument('--out', help='output directory')
        p.add_argument('--parallel', type=int, default=None, help='worker processes (default: all cores)')
        p.add_argument('--algorithm', choices=ALGORITHMS)
        p.add_argument('--horizon', type=int, default=None, help='override the horizon T')
        return p

    experiment_parser('run', 'run a seeded batch and write CSVs and plot data')
    compare = experiment_parser('compare-iters', 'preconditioned vs naive ULA step counts')
    compare.add_argument('--horizons', default='500,1000,1500,2000', help='ascending horizons')
    sub.add_parser('riccati-check', help='LQR diagnostics of the true system').add_argument('config')
    selftest = sub.add_parser('selftest', help='fast acceptance battery')
    selftest.add_argument('--seed', type=int, default=0)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO

    if args.command == 'selftest':
        configure_logging(level)
        return cmd_selftest(args)

    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    configure_logging(level, os.path.join(cfg.output_dir, 'logs'))

    commands = {'run': cmd_run, 'compare-iters': cmd_compare_iters, 'riccati-check': cmd_riccati_check}
    try:
        return commands[args.command](cfg, args)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BatchFailure as e:
        print(f"All seeds failed: {e.failures}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TsldError, OutputError) as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {str(e)}")
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
