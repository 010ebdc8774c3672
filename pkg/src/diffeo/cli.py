"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 fit did not converge (the map is
still written and flagged), 3 I/O error. ``DIFFEO_LOG`` sets the log level
(``error``, ``info`` or ``debug``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, fitting, replication, scenarios
from .mapping import map_pose

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("diffeo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text, n):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers")
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers")
    return np.array(vals)


def _vec3(text):
    return _floats(text, 3)


def _quat(text):
    return _floats(text, 4)


def build_parser():
    p = _Parser(prog="diffeo", description="Fit, evaluate and replay diffeomorphic workspace maps.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a map from primary key points to replica key points")
    f.add_argument("--method", choices=["diff", "rdiff", "tadiff"], required=True)
    f.add_argument("--primary", required=True, help="primary (init) workspace JSON")
    f.add_argument("--replica", required=True, help="replica (goal) workspace JSON")
    f.add_argument("--out", required=True, help="output map JSON")
    f.add_argument("--threshold", type=float, default=0.005, help="position threshold [m]")
    f.add_argument("--jmax", type=int, default=100, help="maximum composition steps")
    f.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate a fitted map")
    e.add_argument("--map", required=True)
    e.add_argument("--primary", help="primary workspace (default: recorded in the map)")
    e.add_argument("--replica", help="replica workspace (default: recorded in the map)")
    e.add_argument("--grid-spacing", type=float, default=0.02)
    e.add_argument("--report", required=True)

    mp = sub.add_parser("map-point", help="map one pose through a fitted map")
    mp.add_argument("--map", required=True)
    mp.add_argument("--position", type=_vec3, required=True, help="x,y,z")
    mp.add_argument("--orientation", type=_quat, default=None, help="w,x,y,z")

    s = sub.add_parser("simulate", help="replay a primary trajectory on a follower")
    s.add_argument("--map", required=True)
    s.add_argument("--trajectory", required=True, help="trajectory CSV (t,px,py,pz,qw,qx,qy,qz)")
    s.add_argument("--mode", choices=["point", "chain"], default="point")
    s.add_argument("--dt", type=float, default=replication.DEFAULT_DT)
    s.add_argument("--kp", type=float, default=replication.DEFAULT_KP)
    s.add_argument("--out", required=True, help="follower trajectory CSV")
    s.add_argument("--velocity-log", help="velocity log CSV (default: <out stem>.velocity.csv)")

    sc = sub.add_parser("scenario", help="write a built-in scenario to a directory")
    sc.add_argument("name", choices=["sim1", "sim2", "exp1"])
    sc.add_argument("--n", type=int, default=100)
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--out", required=True)

    b = sub.add_parser("batch", help="fit and evaluate methods over a scenario directory")
    b.add_argument("--scenario", required=True)
    b.add_argument("--methods", default="diff,rdiff,tadiff")
    b.add_argument("--report", required=True)
    b.add_argument("--csv", help="per-environment CSV export")
    b.add_argument("--parallel", type=int, nargs="?", const=os.cpu_count() or 1, default=1,
                   help="worker processes (bare flag: one per CPU)")
    b.add_argument("--threshold", type=float, default=0.005)
    b.add_argument("--jmax", type=int, default=100)
    b.add_argument("--seed", type=int, default=0)
    return p


def _config(args):
    try:
        return fitting.FitConfig(position_threshold=args.threshold, j_max=args.jmax, seed=args.seed)
    except fitting.ConfigurationError as exc:
        raise UsageError(str(exc))


def cmd_fit(args):
    cfg = _config(args)
    inits = scenarios.load_workspace(args.primary)
    goals = scenarios.load_workspace(args.replica)
    m, diag = fitting.fit(args.method.upper(), inits, goals, cfg)
    m.metadata["primary"] = str(Path(args.primary).resolve())
    m.metadata["replica"] = str(Path(args.replica).resolve())
    scenarios.save_map(m, args.out)
    log.info("%s: %d steps, error %.4g m, converged=%s", m.method.value,
             diag.iterations, diag.final_position_cost, diag.converged)
    return EXIT_OK if diag.converged else EXIT_NOT_CONVERGED


def cmd_eval(args):
    m = scenarios.load_map(args.map)
    prim = args.primary or m.metadata.get("primary")
    repl = args.replica or m.metadata.get("replica")
    if not prim or not repl:
        raise UsageError("eval needs --primary/--replica for maps without recorded workspaces")
    inits, goals = scenarios.load_workspace(prim), scenarios.load_workspace(repl)
    rep = evaluation.evaluate_map(m, inits, goals, evaluation.GradientGridSpec(spacing=args.grid_spacing))
    Path(args.report).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_map_point(args):
    m = scenarios.load_map(args.map)
    q = args.orientation if args.orientation is not None else np.array([1.0, 0.0, 0.0, 0.0])
    p_hat, q_hat = map_pose(m, args.position, q / np.linalg.norm(q))
    print(json.dumps({"position": [float(x) for x in p_hat],
                      "orientation": [float(x) for x in q_hat]}))
    return EXIT_OK


def cmd_simulate(args):
    if args.dt <= 0 or args.kp <= 0:
        raise UsageError("--dt and --kp must be positive")
    m = scenarios.load_map(args.map)
    traj = replication.read_trajectory_csv(args.trajectory)
    follower = replication.initial_follower(m, traj, args.mode)
    res = replication.simulate_replication(m, traj, follower, args.dt, args.kp)
    replication.write_trajectory_csv(res.follower, args.out)
    vlog = args.velocity_log or str(Path(args.out).with_suffix("")) + ".velocity.csv"
    replication.write_velocity_csv(res, vlog)
    return EXIT_OK


def cmd_scenario(args):
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    sc = scenarios.build_scenario(args.name, args.n, args.seed)
    scenarios.save_scenario(sc, args.out)
    return EXIT_OK


def cmd_batch(args):
    cfg = _config(args)
    methods = [x.strip().upper() for x in args.methods.split(",") if x.strip()]
    bad = [x for x in methods if x not in ("DIFF", "RDIFF", "TADIFF")]
    if bad or not methods:
        raise UsageError(f"unknown methods: {', '.join(bad) or '(none)'}")
    sc = scenarios.load_scenario(args.scenario)
    summaries = evaluation.run_batch(sc.environments, methods, cfg, workers=args.parallel)
    evaluation.write_report(summaries, args.report)
    if args.csv:
        evaluation.write_distribution_csv(summaries, args.csv)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "eval": cmd_eval, "map-point": cmd_map_point,
            "simulate": cmd_simulate, "scenario": cmd_scenario, "batch": cmd_batch}


def _setup_logging():
    level = os.environ.get("DIFFEO_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None):
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"diffeo: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        # malformed file contents surface here
        print(f"diffeo: invalid input: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
