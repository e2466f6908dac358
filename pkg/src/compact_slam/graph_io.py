"""Graph-file parsing and writing (g2o-style text records).

Supported tags: VERTEX_SE2, EDGE_SE2, VERTEX_SE3:QUAT, EDGE_SE3:QUAT.
Vertices and measurements are converted to the package's tangent-vector
pose representation on input and back to the community conventions
(x, y, theta / translation + quaternion) on output.  Information
matrices are given as packed upper-triangular rows (6 entries for SE(2),
21 for SE(3)) and are expanded to full symmetric matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import se_math as sm


class GraphParseError(ValueError):
    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class GraphDataError(ValueError):
    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


@dataclass
class GraphRecord:
    kind: str            # vertex | edge
    ids: tuple
    pose: np.ndarray     # tangent-vector pose / measurement
    info: np.ndarray | None
    line_no: int


@dataclass
class GraphFile:
    dim: int | None = None
    records: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def vertices(self):
        return {r.ids[0]: r.pose for r in self.records if r.kind == "vertex"}

    @property
    def edges(self):
        return [r for r in self.records if r.kind == "edge"]


def _expand_upper(values, d):
    M = np.zeros((d, d))
    it = iter(values)
    for i in range(d):
        for j in range(i, d):
            M[i, j] = next(it)
            M[j, i] = M[i, j]
    return M


def _pack_upper(M):
    d = M.shape[0]
    return [M[i, j] for i in range(d) for j in range(i, d)]


def _se2_to_vec(x, y, th):
    T = np.eye(3)
    c, s = math.cos(th), math.sin(th)
    T[:2, :2] = [[c, -s], [s, c]]
    T[:2, 2] = [x, y]
    return sm.log_map(T)


def _vec_to_se2(p):
    T = sm.exp_map(p)
    return T[0, 2], T[1, 2], math.atan2(T[1, 0], T[0, 0])


def _quat_to_rot(qx, qy, qz, qw, line_no):
    n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    if abs(n - 1.0) > 1e-6:
        raise GraphDataError(line_no, f"quaternion norm {n:.9f} too far from 1")
    qx, qy, qz, qw = qx / n, qy / n, qz / n, qw / n
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
        [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
        [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
    ])


def _rot_to_quat(R):
    """Unit quaternion (qx, qy, qz, qw) with qw >= 0."""
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        qw = 0.25 * s
        qx = (R[2, 1] - R[1, 2]) / s
        qy = (R[0, 2] - R[2, 0]) / s
        qz = (R[1, 0] - R[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = [0.0, 0.0, 0.0]
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        qw = (R[k, j] - R[j, k]) / s
        qx, qy, qz = q
    if qw < 0:
        qx, qy, qz, qw = -qx, -qy, -qz, -qw
    return qx, qy, qz, qw


def _se3_to_vec(tx, ty, tz, qx, qy, qz, qw, line_no):
    T = np.eye(4)
    T[:3, :3] = _quat_to_rot(qx, qy, qz, qw, line_no)
    T[:3, 3] = [tx, ty, tz]
    return sm.log_map(T)


def _vec_to_se3(p):
    T = sm.exp_map(p)
    qx, qy, qz, qw = _rot_to_quat(T[:3, :3])
    return (*T[:3, 3], qx, qy, qz, qw)


def _check_info(M, line_no):
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    if w.min() < -1e-9 * max(abs(w.max()), 1.0):
        raise GraphDataError(line_no, "information matrix not positive semidefinite")
    return M


def parse_graph(text) -> GraphFile:
    """Parse g2o-style text into a GraphFile of tangent-vector records."""
    g = GraphFile()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        try:
            vals = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise GraphParseError(line_no, f"malformed numeric field: {exc}")
        try:
            if tag == "VERTEX_SE2":
                _require(len(vals) == 4, line_no, "VERTEX_SE2 needs id x y theta")
                g.dim = _merge_dim(g, 3, line_no)
                g.records.append(GraphRecord(
                    "vertex", (int(vals[0]),),
                    _se2_to_vec(*vals[1:4]), None, line_no))
            elif tag == "EDGE_SE2":
                _require(len(vals) == 2 + 3 + 6, line_no,
                         "EDGE_SE2 needs ids, measurement and 6 info entries")
                g.dim = _merge_dim(g, 3, line_no)
                info = _check_info(_expand_upper(vals[5:], 3), line_no)
                g.records.append(GraphRecord(
                    "edge", (int(vals[0]), int(vals[1])),
                    _se2_to_vec(*vals[2:5]), info, line_no))
            elif tag == "VERTEX_SE3:QUAT":
                _require(len(vals) == 8, line_no,
                         "VERTEX_SE3:QUAT needs id, translation and quaternion")
                g.dim = _merge_dim(g, 6, line_no)
                g.records.append(GraphRecord(
                    "vertex", (int(vals[0]),),
                    _se3_to_vec(*vals[1:8], line_no), None, line_no))
            elif tag == "EDGE_SE3:QUAT":
                _require(len(vals) == 2 + 7 + 21, line_no,
                         "EDGE_SE3:QUAT needs ids, measurement and 21 info entries")
                g.dim = _merge_dim(g, 6, line_no)
                info = _check_info(_expand_upper(vals[9:], 6), line_no)
                g.records.append(GraphRecord(
                    "edge", (int(vals[0]), int(vals[1])),
                    _se3_to_vec(*vals[2:9], line_no), info, line_no))
            else:
                g.warnings.append(f"line {line_no}: unknown tag {tag!r} skipped")
        except (GraphParseError, GraphDataError):
            raise
        except StopIteration:
            raise GraphParseError(line_no, "too few numeric fields")
    return g


def _require(cond, line_no, msg):
    if not cond:
        raise GraphParseError(line_no, msg)


def _merge_dim(g, dim, line_no):
    if g.dim is not None and g.dim != dim:
        raise GraphDataError(line_no, "mixed SE(2)/SE(3) records")
    return dim


def write_graph(g: GraphFile) -> str:
    """Serialize a GraphFile back to g2o-style text."""
    lines = []
    for r in g.records:
        if g.dim == 3:
            if r.kind == "vertex":
                x, y, th = _vec_to_se2(r.pose)
                lines.append(f"VERTEX_SE2 {r.ids[0]} {x:.17g} {y:.17g} {th:.17g}")
            else:
                x, y, th = _vec_to_se2(r.pose)
                info = " ".join(f"{v:.17g}" for v in _pack_upper(r.info))
                lines.append(f"EDGE_SE2 {r.ids[0]} {r.ids[1]} "
                             f"{x:.17g} {y:.17g} {th:.17g} {info}")
        else:
            if r.kind == "vertex":
                t = _vec_to_se3(r.pose)
                vals = " ".join(f"{v:.17g}" for v in t)
                lines.append(f"VERTEX_SE3:QUAT {r.ids[0]} {vals}")
            else:
                t = _vec_to_se3(r.pose)
                vals = " ".join(f"{v:.17g}" for v in t)
                info = " ".join(f"{v:.17g}" for v in _pack_upper(r.info))
                lines.append(f"EDGE_SE3:QUAT {r.ids[0]} {r.ids[1]} {vals} {info}")
    return "\n".join(lines) + ("\n" if lines else "")


def graph_to_solver(g: GraphFile, solve_each=False, **solver_kwargs):
    """Feed a parsed graph into an incremental solver in record order.

    Edges to unseen trailing vertices initialize them by composition;
    explicit vertex records override the initialization when they appear
    before the first edge touching them.  With ``solve_each`` the system
    is re-solved after every edge (true incremental operation).
    """
    from .solver import IncrementalSolver, LOOP, ODOMETRY

    if g.dim is None:
        raise ValueError("empty graph")
    solver = IncrementalSolver(g.dim, **solver_kwargs)
    vertex_init = g.vertices
    for r in g.records:
        if r.kind != "edge":
            continue
        i, j = r.ids
        while solver.n_vertices <= max(i, j) - 1 and max(i, j) - 1 >= 0 \
                and solver.n_vertices in vertex_init:
            solver.add_vertex(vertex_init[solver.n_vertices])
        if solver.n_vertices == 0:
            solver.add_vertex(vertex_init.get(0, np.zeros(g.dim)))
        if j == solver.n_vertices and j in vertex_init:
            solver.add_vertex(vertex_init[j])
        kind = ODOMETRY if j == i + 1 else LOOP
        solver.add_edge(i, j, r.pose, r.info, kind)
        if solve_each:
            solver.solve()
    return solver
