#!/usr/bin/env python3
"""
discoflux: conservation laws with discontinuous flux and their zero range
process approximations.

    python scripts/discoflux.py hydro --config runs/fixture.env --threads 8

Config keys (flat key=value file; unknown keys are errors):
  model      lambda_values, lambda_breakpoints, lambda_mode (mollified|raw),
             rate (indicator|identity|table:g0,g1,..), closure (zrp|linear|well),
             well_center, well_sign, rho_max, sigma, jump_kernel (z:p,...)
  profile    profile (constant|riemann|steady|table), rho_const, rho_left,
             rho_right, profile_alpha, profile_table
  ensembles  n_ladder, replicas, block_radius, block_schedule
             (fixed|quarter_power|proportional), block_fraction, t_end,
             snapshot_times (solve and zrp; default t_end), n_bins, event_budget
  solver     grid_cells, cfl, epsilon, epsilon0, epsilon_levels,
             snapshots_per_unit, alphas
  run        seed, out_dir, threads, dry_run, record_wall_time

Environment defaults: DISCOFLUX_THREADS, DISCOFLUX_SEED, DISCOFLUX_OUT,
DISCOFLUX_EVENT_BUDGET, DISCOFLUX_DRY_RUN (also read from .env).

Exit codes: 0 success, 2 acceptance check failed, 1 error.
"""

import argparse
import logging
import sys

from dotenv import load_dotenv

import hydro_harness as hh
from errors import DiscofluxError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2
COMMANDS = ("solve", "steady", "zrp", "couple", "audit", "hydro")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="discoflux",
        description=__doc__.split("\n\n")[0],
        epilog=__doc__.split("\n\n", 2)[2],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key=value experiment file")
    parser.add_argument("--seed", type=int, help="master seed (u64)")
    parser.add_argument("--out", dest="out_dir", help="output directory")
    parser.add_argument("--threads", type=int, help="worker threads")
    parser.add_argument("--epsilon-study", action="store_true", help="hydro: also run the eps ladder")
    parser.add_argument("--young", action="store_true", help="hydro: also report block-average variances")
    parser.add_argument("--timing", action="store_true", help="record wall seconds in reports")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _emit(report, cfg, name: str) -> None:
    for path in hh.emit_report(report, cfg.out_dir, name, cfg.dry_run or None):
        print(f"📝 {path}")


def _verdict(ok: bool, message: str) -> bool:
    print(f"✅ {message}" if ok else f"⚠️  {message}")
    return ok


def run(command: str, cfg: hh.ExperimentConfig, args: argparse.Namespace) -> bool:
    """Runs one command; returns False when an acceptance check fails."""
    ok = True
    if command == "solve":
        _emit(hh.run_solve(cfg), cfg, "solve")
    elif command == "steady":
        _emit(hh.run_steady(cfg), cfg, "steady")
    elif command == "zrp":
        snaps = hh.run_zrp(cfg)
        _emit(snaps.occupancy, cfg, "zrp_occupancy")
        _emit(snaps.blocks, cfg, "zrp_blocks")
    elif command == "couple":
        report = hh.run_couple(cfg)
        _emit(report, cfg, "couple")
        _emit(report.entropy, cfg, "couple_entropy")
        ok = _verdict(*hh.check_couple(report))
    elif command == "audit":
        report = hh.run_audit(cfg)
        _emit(report, cfg, "audit")
        ok = _verdict(*hh.check_audit(report))
    else:
        report = hh.run_hydro(cfg)
        _emit(report, cfg, "convergence")
        ok = _verdict(*hh.check_convergence(report))
        if args.young:
            young = hh.run_young_study(cfg, report)
            _emit(young, cfg, "young")
            ok = _verdict(*hh.check_concentration(young)) and ok
        if args.epsilon_study:
            eps = hh.run_epsilon_study(cfg)
            _emit(eps, cfg, "epsilon")
            ok = _verdict(*hh.check_cauchy(eps)) and ok
    return ok


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    overrides = {"seed": args.seed, "out_dir": args.out_dir, "threads": args.threads}
    if args.timing:
        overrides["record_wall_time"] = True
    try:
        cfg = hh.load_config(args.config, overrides)
        print(f"⏳ {args.command}: seed={cfg.seed} threads={cfg.threads} out={cfg.out_dir}")
        ok = run(args.command, cfg, args)
    except (DiscofluxError, OSError) as e:
        print(f"❌ {args.command} failed: {e}")
        return EXIT_ERROR
    if not ok:
        return EXIT_CHECK_FAILED
    print(f"✅ {args.command} done")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
