"""Delimited output and figure rendering for CLI reports.

Every report path writes CSV (or JSON-lines) data plus a matplotlib
figure rendered next to it.  All writes are atomic: content goes to a
temporary file in the destination directory which is renamed into place
only on success.
"""

from __future__ import annotations

import math
import os
import tempfile

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import se_math as sm  # noqa: E402


def write_atomic(path, text):
    """Write text to ``path`` via a temp file + rename (no partial files)."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_figure(fig, path):
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".png")
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=120, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)


# ---------------------------------------------------------------------------
# Trajectory CSV
# ---------------------------------------------------------------------------

def _pose_row(pose):
    pose = np.asarray(pose, float)
    T = sm.exp_map(pose)
    if pose.shape[0] == 3:
        return [T[0, 2], T[1, 2], math.atan2(T[1, 0], T[0, 0])]
    r = sm.so3_log(T[:3, :3])
    return [T[0, 3], T[1, 3], T[2, 3], r[0], r[1], r[2]]


def _row_pose(vals, dim):
    if dim == 3:
        x, y, th = vals
        T = np.eye(3)
        c, s = math.cos(th), math.sin(th)
        T[:2, :2] = [[c, -s], [s, c]]
        T[:2, 2] = [x, y]
        return sm.log_map(T)
    T = np.eye(4)
    T[:3, :3] = sm.so3_exp(np.asarray(vals[3:6]))
    T[:3, 3] = vals[:3]
    return sm.log_map(T)


def trajectory_csv(traj, dim):
    head = "index,x,y,phi" if dim == 3 else "index,x,y,z,r1,r2,r3"
    lines = [head]
    for idx, pose in traj.poses:
        lines.append(",".join([str(idx)] +
                              [f"{v:.17g}" for v in _pose_row(pose)]))
    return "\n".join(lines) + "\n"


def parse_trajectory_csv(text):
    """Inverse of trajectory_csv; returns (Trajectory, dim)."""
    from .evaluation import Trajectory

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty trajectory file")
    header = lines[0].split(",")
    dim = 3 if len(header) == 4 else 6
    poses = []
    for ln in lines[1:]:
        vals = ln.split(",")
        poses.append((int(vals[0]),
                      _row_pose([float(v) for v in vals[1:]], dim)))
    return Trajectory(poses), dim


def write_trajectory(path, traj, dim, reference=None):
    """Write trajectory CSV plus a rendered top-down path figure."""
    write_atomic(path, trajectory_csv(traj, dim))
    fig, ax = plt.subplots(figsize=(6, 5))
    xy = np.array([_pose_row(p)[:2] for _, p in traj.poses])
    if reference is not None:
        rxy = np.array([_pose_row(p)[:2] for _, p in reference.poses])
        ax.plot(rxy[:, 0], rxy[:, 1], "-", color="0.7", label="reference")
    ax.plot(xy[:, 0], xy[:, 1], ".-", ms=3, lw=0.8, label="trajectory")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    save_figure(fig, os.path.splitext(path)[0] + ".png")


# ---------------------------------------------------------------------------
# Error and norm reports
# ---------------------------------------------------------------------------

def write_error_report(path, report):
    text = "metric,value\n" + "".join(
        f"{k},{v:.9g}\n" for k, v in report.rows())
    write_atomic(path, text)
    fig, ax = plt.subplots(figsize=(6, 4))
    keys, vals = zip(*report.rows())
    ax.bar(range(len(keys)), vals, color="steelblue")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("RMSE")
    save_figure(fig, os.path.splitext(path)[0] + ".png")


def write_norm_series(path, series):
    keys = [k for k in ("full", "compact", "marginalized", "full_marg",
                        "compact_marg", "marginalized_marg") if k in series]
    n = len(series[keys[0]])
    lines = ["step," + ",".join(keys)]
    for t in range(n):
        lines.append(",".join([str(t + 1)] +
                              [f"{series[k][t]:.9g}" for k in keys]))
    write_atomic(path, "\n".join(lines) + "\n")
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in keys[:3]:
        ax.plot(range(1, n + 1), series[k], label=k)
    ax.set_xlabel("step")
    ax.set_ylabel("covariance norm")
    ax.set_yscale("log")
    ax.legend(loc="best", fontsize=8)
    save_figure(fig, os.path.splitext(path)[0] + ".png")


def write_events(path, events):
    write_atomic(path, "".join(ev.to_json() + "\n" for ev in events))
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [ev.stream_index for ev in events]
    ax.plot(steps, [ev.n_vertices for ev in events], label="kept poses")
    ax.plot(steps, [ev.n_loops for ev in events], label="accepted loops")
    ax.plot(steps, steps, "--", color="0.7", label="stream poses")
    ax.set_xlabel("stream pose index")
    ax.set_ylabel("count")
    ax.legend(loc="best", fontsize=8)
    save_figure(fig, os.path.splitext(path)[0] + ".png")
