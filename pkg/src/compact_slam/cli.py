"""Command-line interface.

Subcommands: solve, compact, simulate, calibrate, eval.  Exit codes:
0 success, 1 usage error, 2 data error (with line numbers where
available), 3 numerical failure.  Report paths write CSV plus a
rendered matplotlib figure next to each file.  The environment variable
``COMPACT_SLAM_SEED`` overrides the simulator seed; an explicit
``--seed`` flag wins over the environment.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import graph_io, reports
from . import se_math as sm
from .block_matrix import BlockDimensionError, IndefiniteSystemError
from .compact import (CalibrationError, CompactConfig, CompactEngine,
                      ReplayOracle, calibrate_thresholds)
from .evaluation import (ErrorReport, Trajectory, compute_errors,
                         reconstruct)
from .simulator import SimSpec, simulate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _read(path):
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise FileInputError(f"cannot read {path}: {exc}")


class FileInputError(ValueError):
    pass


def _strip_inlier(text, min_ratio):
    """Drop EDGE lines whose trailing auxiliary inlier-ratio column is
    below ``min_ratio``; strip the column from surviving lines."""
    expected = {"EDGE_SE2": 1 + 2 + 3 + 6, "EDGE_SE3:QUAT": 1 + 2 + 7 + 21}
    out = []
    for line in text.splitlines():
        parts = line.split()
        if parts and parts[0] in expected and \
                len(parts) == expected[parts[0]] + 1:
            if float(parts[-1]) < min_ratio:
                continue
            line = " ".join(parts[:-1])
        out.append(line)
    return "\n".join(out) + "\n"


def _graph_streams(g):
    """Split a parsed graph into (initial pose, odometry list, oracle
    table); consecutive edges are odometry, the rest loop registrations."""
    odometry = {}
    oracle = {}
    for r in g.edges:
        i, j = r.ids
        if j == i + 1:
            odometry[i] = (r.pose, np.linalg.inv(r.info))
        elif i == j + 1:
            odometry[j] = sm.reverse_measurement(r.pose, np.linalg.inv(r.info))
        else:
            a, b = min(i, j), max(i, j)
            z, cov = (r.pose, np.linalg.inv(r.info))
            if i > j:
                z, cov = sm.reverse_measurement(z, cov)
            oracle[(a, b)] = (z, cov)
    n = max(odometry) + 2 if odometry else 1
    missing = [k for k in range(n - 1) if k not in odometry]
    if missing:
        raise FileInputError(
            f"odometry chain has gaps at indices {missing[:5]}")
    init = g.vertices.get(0, np.zeros(g.dim))
    return init, [odometry[k] for k in range(n - 1)], oracle


def _mean_loop_cov(oracle, dim):
    if not oracle:
        return np.eye(dim) * 1e-2
    return np.mean([c for (_, c) in oracle.values()], axis=0)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_solve(args):
    g = graph_io.parse_graph(_read(args.graph))
    for w in g.warnings:
        print(w, file=sys.stderr)
    solver = graph_io.graph_to_solver(
        g, solve_each=args.incremental)
    solver.solve()
    traj = Trajectory.from_poses(solver.estimates())
    os.makedirs(args.out, exist_ok=True)
    reports.write_trajectory(os.path.join(args.out, "trajectory.csv"),
                             traj, g.dim)
    print(f"solved {solver.n_vertices} poses, chi2 {solver.chi2():.6g}")
    return EXIT_OK


def _cmd_compact(args):
    text = _read(args.graph)
    g = graph_io.parse_graph(text)
    init, odometry, oracle = _graph_streams(g)
    if args.loops:
        ltext = _read(args.loops)
        if args.inlier_min is not None:
            ltext = _strip_inlier(ltext, args.inlier_min)
        lg = graph_io.parse_graph(ltext)
        if lg.dim not in (None, g.dim):
            raise FileInputError("loop file dimension differs from graph")
        for r in lg.edges:
            i, j = r.ids
            z, cov = r.pose, np.linalg.inv(r.info)
            if i > j:
                i, j = j, i
                z, cov = sm.reverse_measurement(z, cov)
            oracle[(i, j)] = (z, cov)
    if args.config:
        cfg = CompactConfig.from_json(_read(args.config))
    else:
        cfg = CompactConfig(
            v=[1e6] * (2 if g.dim == 3 else 3) + [3.14], s=0.0,
            g_pose=-np.inf, g_loop=-np.inf,
            sigma_y_bar=_mean_loop_cov(oracle, g.dim), mode=args.mode)
    cfg.mode = args.mode
    engine = CompactEngine(g.dim, cfg, ReplayOracle(oracle),
                           initial_pose=init)
    engine.run(odometry)
    n_stream = len(odometry) + 1
    os.makedirs(args.out, exist_ok=True)
    reports.write_trajectory(os.path.join(args.out, "trajectory.csv"),
                             Trajectory(engine.trajectory()), g.dim)
    reports.write_events(os.path.join(args.out, "events.jsonl"),
                         engine.events)
    kept = engine.solver.n_vertices
    print(f"mode {args.mode}: kept {kept}/{n_stream} poses "
          f"({100.0 * kept / n_stream:.2f}%), accepted {engine.n_loops}"
          f"/{len(oracle)} loops "
          f"({100.0 * engine.n_loops / max(len(oracle), 1):.2f}%)")
    return EXIT_OK


def _cmd_simulate(args):
    spec = SimSpec.from_json(_read(args.spec)) if args.spec else SimSpec()
    env_seed = os.environ.get("COMPACT_SLAM_SEED")
    if env_seed is not None:
        spec.seed = int(env_seed)
    if args.seed is not None:
        spec.seed = args.seed
    res = simulate(spec)
    os.makedirs(args.out, exist_ok=True)
    reports.write_atomic(os.path.join(args.out, "spec.json"), spec.to_json())
    n = len(res.ground_truth)
    recs = [graph_io.GraphRecord("vertex", (0,), res.ground_truth[0], None, 0)]
    pose = res.ground_truth[0]
    for k, (z, cov) in enumerate(res.odometry):
        pose = sm.compose(pose, z)
        recs.append(graph_io.GraphRecord("vertex", (k + 1,), pose, None, 0))
    for k, (z, cov) in enumerate(res.odometry):
        recs.append(graph_io.GraphRecord(
            "edge", (k, k + 1), z, np.linalg.inv(cov), 0))
    gmain = graph_io.GraphFile(dim=6, records=recs)
    reports.write_atomic(os.path.join(args.out, "graph.g2o"),
                         graph_io.write_graph(gmain))
    lrecs = [graph_io.GraphRecord("edge", pair, z, np.linalg.inv(cov), 0)
             for pair, (z, cov) in sorted(res.oracle_table.items())]
    gloops = graph_io.GraphFile(dim=6, records=lrecs)
    reports.write_atomic(os.path.join(args.out, "loops.g2o"),
                         graph_io.write_graph(gloops))
    reports.write_trajectory(
        os.path.join(args.out, "ground_truth.csv"),
        Trajectory(list(enumerate(res.ground_truth))), 6)
    print(f"simulated {n} poses over {res.path_length:.2f} m, "
          f"{len(res.oracle_table)} registrable pairs, seed {spec.seed}")
    return EXIT_OK


def _cmd_calibrate(args):
    g = graph_io.parse_graph(_read(args.graph))
    init, odometry, oracle = _graph_streams(g)
    if args.loops:
        lg = graph_io.parse_graph(_read(args.loops))
        for r in lg.edges:
            i, j = sorted(r.ids)
            oracle[(i, j)] = (r.pose, np.linalg.inv(r.info))
    cfg = calibrate_thresholds(
        g.dim, odometry, ReplayOracle(oracle),
        sample_fraction=args.sample_frac, s=args.s,
        v_margin=args.v_margin)
    text = cfg.to_json()
    if args.out:
        reports.write_atomic(args.out, text)
    print(text)
    return EXIT_OK


def _cmd_eval(args):
    est, dim = reports.parse_trajectory_csv(_read(args.est))
    gt, gdim = reports.parse_trajectory_csv(_read(args.gt))
    if dim != gdim:
        raise FileInputError("estimate and ground truth dimension differ")
    if args.reconstruct:
        if not args.graph:
            raise FileInputError("--reconstruct requires --graph for odometry")
        g = graph_io.parse_graph(_read(args.graph))
        _, odometry, _ = _graph_streams(g)
        est = reconstruct(est, [z for z, _ in odometry], args.reconstruct)
    sel = {i: p for i, p in gt.poses}
    missing = [i for i in est.indices if i not in sel]
    if missing:
        raise FileInputError(
            f"ground truth missing indices {missing[:5]}")
    gt_m = Trajectory([(i, sel[i]) for i in est.indices])
    report = compute_errors(est, gt_m)
    os.makedirs(args.out, exist_ok=True)
    reports.write_error_report(os.path.join(args.out, "errors.csv"), report)
    reports.write_trajectory(os.path.join(args.out, "estimate.csv"),
                             est, dim, reference=gt_m)
    print(report.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------

def _build_parser():
    p = _Parser(prog="compact-slam",
                description="Incremental compact pose-graph SLAM toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("solve", help="optimize a graph file")
    ps.add_argument("--graph", required=True)
    ps.add_argument("--out", required=True)
    ps.add_argument("--incremental", action="store_true",
                    help="re-solve after every edge")
    ps.set_defaults(func=_cmd_solve)

    pc = sub.add_parser("compact", help="run the compaction driver")
    pc.add_argument("--graph", required=True)
    pc.add_argument("--mode", choices=["apal", "apfl", "fpfl"],
                    default="fpfl")
    pc.add_argument("--config")
    pc.add_argument("--loops")
    pc.add_argument("--inlier-min", type=float, default=None)
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=_cmd_compact)

    pm = sub.add_parser("simulate", help="generate a synthetic dataset")
    pm.add_argument("--spec")
    pm.add_argument("--seed", type=int, default=None)
    pm.add_argument("--out", required=True)
    pm.set_defaults(func=_cmd_simulate)

    pk = sub.add_parser("calibrate", help="derive thresholds from a sample")
    pk.add_argument("--graph", required=True)
    pk.add_argument("--loops")
    pk.add_argument("--sample-frac", type=float, default=0.6)
    pk.add_argument("--s", type=float, default=0.1)
    pk.add_argument("--v-margin", type=float, default=1.5)
    pk.add_argument("--out")
    pk.set_defaults(func=_cmd_calibrate)

    pe = sub.add_parser("eval", help="trajectory error evaluation")
    pe.add_argument("--est", required=True)
    pe.add_argument("--gt", required=True)
    pe.add_argument("--graph")
    pe.add_argument("--reconstruct", choices=["v0", "v1", "v2"])
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=_cmd_eval)
    return p


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except (graph_io.GraphParseError, graph_io.GraphDataError,
            CalibrationError, FileInputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IndefiniteSystemError, BlockDimensionError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
