"""Incremental Gauss-Newton over a pose graph.

The solver maintains the linearization point theta, the information
matrix Lambda = A^T A and right-hand side eta = -A^T r as block-sparse
structures, and an upper-triangular Cholesky factor of Lambda that is
updated by resumed factorization.  New measurements touch only the
trailing columns under the current ordering; a partial minimum-degree
reorder is applied to the affected window, falling back to a full
reorder when the window exceeds a configurable fraction of the columns.

Conventions
-----------
Poses are tangent vectors (see se_math); the state update is the right
group perturbation theta <- theta (+) delta.  Edge residuals are
r = log(Z^-1 T_i^-1 T_j) so that, to first order, r is the negated right
perturbation of the measurement; information matrices therefore weigh
right-perturbation noise.  All covariances downstream share this frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import se_math as sm
from .block_matrix import (
    BlockLayout,
    BlockSparseMatrix,
    accumulate_block,
    block_amd_ordering,
    cholesky_full,
    cholesky_resumed,
    cholesky_retarget,
    expand_window,
    solve_triangular,
)


class RejectedEdgeError(ValueError):
    """Raised when an edge carries an invalid information matrix."""


ODOMETRY = "odometry"
LOOP = "loop"
PRIOR = "prior"


@dataclass
class Edge:
    i: int
    j: int            # equal to i for priors
    z: np.ndarray     # measured displacement (or prior pose)
    info: np.ndarray  # information matrix of the measurement
    kind: str = ODOMETRY
    # cached linearization currently accumulated into Lambda/eta
    lin: dict = field(default_factory=dict, repr=False)


@dataclass
class PoseGraph:
    dim: int
    vertices: list = field(default_factory=list)
    edges: list = field(default_factory=list)


def _info_sqrt(info):
    """W with W^T W = info, accepting PSD (possibly singular) matrices."""
    info = np.asarray(info, dtype=float)
    if not np.allclose(info, info.T, atol=1e-9 * max(1.0, np.abs(info).max())):
        raise RejectedEdgeError("information matrix not symmetric")
    try:
        return np.linalg.cholesky(info).T
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (info + info.T))
        if w.min() < -1e-9 * max(w.max(), 1.0):
            raise RejectedEdgeError("information matrix not positive semidefinite")
        return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def residual_and_jacobians(theta_i, theta_j, z):
    """Residual r = log(Z^-1 T_i^-1 T_j) and its right-perturbation Jacobians."""
    H = sm.transform_inverse(sm.exp_map(theta_i)) @ sm.exp_map(theta_j)
    r = sm.log_map(sm.transform_inverse(sm.exp_map(z)) @ H)
    Jr_inv = sm.right_jacobian_inv(r)
    J_j = Jr_inv
    J_i = -Jr_inv @ sm.adjoint(np.linalg.inv(H))
    return r, J_i, J_j


def prior_residual_and_jacobian(theta, z):
    r = sm.log_map(sm.transform_inverse(sm.exp_map(z)) @ sm.exp_map(theta))
    return r, sm.right_jacobian_inv(r)


class IncrementalSolver:
    """Pose-graph Gauss-Newton with resumed factorization and partial reordering.

    Parameters mirror the exposed configuration: ``relin_threshold`` is
    the correction norm above which the linearization point is updated
    and the system rebuilt; ``reorder_ratio`` is the affected-window
    fraction that triggers a full reorder; ``gauge_info`` is the unary
    prior weight pinning vertex 0.
    """

    def __init__(self, dim, relin_threshold=0.01, reorder_ratio=0.5,
                 gauge_info=1e6):
        self.graph = PoseGraph(dim=dim)
        self.dim = dim
        self.relin_threshold = relin_threshold
        self.reorder_ratio = reorder_ratio
        self.gauge_info = gauge_info

        self.layout = BlockLayout([])
        self.lam = BlockSparseMatrix(self.layout, symmetric=True)
        self.eta = []          # per-variable rhs blocks
        self.d = []            # per-variable correction offsets (estimate = theta (+) d)
        self.perm = []         # block permutation (slot -> variable)
        self.pos = []          # variable -> slot
        self.factor = None
        self.dirty_pos = 0     # first invalid permuted column; == n when clean

        self.step = 0          # measurement counter
        self.lin_epoch = 0     # bumped on any non-additive Lambda change
        self.edge_log = []     # (step, {var: whitened Jacobian block}) per added edge

    # -- graph construction -------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.graph.vertices)

    def add_vertex(self, pose):
        """Append a vertex; the first one receives the gauge prior."""
        pose = sm.normalize(np.asarray(pose, dtype=float))
        vid = len(self.graph.vertices)
        self.graph.vertices.append(pose)
        self.layout.append(self.dim)
        self.lam.sync_layout()
        self.eta.append(np.zeros(self.dim))
        self.d.append(np.zeros(self.dim))
        self.perm.append(vid)
        self.pos.append(len(self.perm) - 1)
        if vid == 0:
            self.add_edge(0, 0, pose, self.gauge_info * np.eye(self.dim),
                          kind=PRIOR)
        return vid

    def estimate(self, i):
        return sm.normalize(sm.compose(self.graph.vertices[i], self.d[i]))

    def estimates(self):
        return [self.estimate(i) for i in range(self.n_vertices)]

    def linearize_edge(self, edge):
        """Whitened Jacobian blocks and residual of one edge at theta."""
        W = _info_sqrt(edge.info)
        if edge.kind == PRIOR:
            r, J = prior_residual_and_jacobian(self.graph.vertices[edge.i], edge.z)
            return {edge.i: W @ J}, W @ r
        r, J_i, J_j = residual_and_jacobians(
            self.graph.vertices[edge.i], self.graph.vertices[edge.j], edge.z)
        return {edge.i: W @ J_i, edge.j: W @ J_j}, W @ r

    def _apply_edge(self, edge, sign=1.0):
        """Accumulate (or remove, sign=-1) the cached linearization of an edge."""
        A, rw = edge.lin["A"], edge.lin["r"]
        keys = sorted(A)
        for a in keys:
            for b in keys:
                if a <= b:
                    accumulate_block(self.lam, a, b, sign * (A[a].T @ A[b]))
            self.eta[a] -= sign * (A[a].T @ rw)

    def add_edge(self, i, j, z, info, kind=ODOMETRY):
        """Integrate one measurement; a new trailing vertex is created and
        initialized by composing the measurement onto its predecessor."""
        z = np.asarray(z, dtype=float)
        info = np.asarray(info, dtype=float)
        if kind != PRIOR and (i < 0 or i >= self.n_vertices or i == j
                              or j < 0 or j > self.n_vertices):
            raise RejectedEdgeError(
                f"edge ({i}, {j}) references unknown vertices "
                f"(have {self.n_vertices})")
        if j == self.n_vertices and kind != PRIOR:
            self.add_vertex(sm.compose(self.estimate(i), z))
        edge = Edge(i, j, z, info, kind)
        A, rw = self.linearize_edge(edge)
        edge.lin = {"A": A, "r": rw}
        self.graph.edges.append(edge)
        self._apply_edge(edge, 1.0)
        self.dirty_pos = min(self.dirty_pos, *(self.pos[v] for v in A))
        self.step += 1
        self.edge_log.append((self.step, dict(A)))
        return edge

    def replace_last_vertex(self, anchor, z, info):
        """Re-point the newest vertex: its single incident odometry edge from
        ``anchor`` is swapped for the given measurement and the vertex is
        re-initialized.  Used when a discarded pose is overwritten by its
        successor with a concatenated measurement."""
        slot = self.n_vertices - 1
        incident = [e for e in self.graph.edges
                    if e.kind != PRIOR and slot in (e.i, e.j)]
        if len(incident) != 1 or incident[0].kind != ODOMETRY:
            raise ValueError("replaced vertex must have exactly one odometry edge")
        old = incident[0]
        self._apply_edge(old, -1.0)
        self.graph.edges.remove(old)
        self.graph.vertices[slot] = sm.normalize(sm.compose(self.estimate(anchor), z))
        self.d[slot] = np.zeros(self.dim)
        edge = Edge(anchor, slot, np.asarray(z, float), np.asarray(info, float),
                    ODOMETRY)
        A, rw = self.linearize_edge(edge)
        edge.lin = {"A": A, "r": rw}
        self.graph.edges.append(edge)
        self._apply_edge(edge, 1.0)
        self.dirty_pos = min(self.dirty_pos,
                             *(self.pos[v] for v in set(A) | {old.i, old.j}))
        self.step += 1
        self.lin_epoch += 1   # subtraction is not a PSD information update
        self.edge_log.clear()
        return edge

    # -- linear algebra ------------------------------------------------------

    def _relinearize(self):
        """Rebuild Lambda and eta from every edge at the current theta."""
        self.lam = BlockSparseMatrix(self.layout, symmetric=True)
        self.eta = [np.zeros(self.dim) for _ in range(self.n_vertices)]
        for edge in self.graph.edges:
            A, rw = self.linearize_edge(edge)
            edge.lin = {"A": A, "r": rw}
            self._apply_edge(edge, 1.0)
        self.dirty_pos = 0
        self.lin_epoch += 1
        self.edge_log.clear()

    def refresh_factor(self):
        """Bring the Cholesky factor up to date with Lambda."""
        n = self.layout.n_blocks
        if self.factor is not None and self.dirty_pos >= n \
                and self.factor.layout.n_blocks == n:
            return
        start = expand_window(self.lam, self.dirty_pos, self.perm)
        window = n - start
        if self.factor is None or self.factor.layout.n_blocks > n:
            self.perm = block_amd_ordering(self.lam, 0)
            self.factor = cholesky_full(self.lam, self.perm)
        elif window > self.reorder_ratio * n:
            new_perm = block_amd_ordering(self.lam, 0)
            if new_perm == self.perm and self.factor.layout.n_blocks <= n:
                self.factor = cholesky_resumed(self.factor, self.lam, start)
            else:
                self.perm = new_perm
                self.factor = cholesky_full(self.lam, self.perm)
        else:
            new_perm = block_amd_ordering(self.lam, start, base_perm=self.perm)
            self.perm = new_perm
            if self.factor.layout.n_blocks < n:
                # grow the factor bookkeeping before retargeting
                self.factor = cholesky_retarget(self.factor, self.lam,
                                                new_perm, start)
            else:
                self.factor = cholesky_retarget(self.factor, self.lam,
                                                new_perm, start)
        self.pos = [0] * n
        for k, v in enumerate(self.perm):
            self.pos[v] = k
        self.dirty_pos = n

    def _solve_delta(self):
        eta = np.concatenate(self.eta)
        y = solve_triangular(self.factor, eta, "forward")
        delta = solve_triangular(self.factor, y, "backward")
        return delta

    def solve(self, max_iters=50, tol=1e-9, relin_threshold=None):
        """Iterate Gauss-Newton until the correction norm drops below tol.

        The first iteration reuses the factor through resumed
        factorization; each accepted large correction moves the
        linearization point and rebuilds the system.  Corrections below
        ``relin_threshold`` are kept as an offset without relinearizing.
        Returns (estimates, iterations).
        """
        if relin_threshold is None:
            relin_threshold = self.relin_threshold
        relin_threshold = max(relin_threshold, tol)
        iters = 0
        for _ in range(max_iters):
            self.refresh_factor()
            delta = self._solve_delta()
            iters += 1
            norm = float(np.abs(delta).max()) if delta.size else 0.0
            if norm <= relin_threshold:
                for k in range(self.n_vertices):
                    self.d[k] = delta[self.layout.slice(k)]
                break
            for k in range(self.n_vertices):
                self.graph.vertices[k] = sm.normalize(
                    sm.compose(self.graph.vertices[k], delta[self.layout.slice(k)]))
                self.d[k] = np.zeros(self.dim)
            self._relinearize()
        return self.estimates(), iters

    def chi2(self):
        """Weighted squared residual sum (factor 1/2) at the current estimate."""
        total = 0.0
        est = self.estimates()
        for e in self.graph.edges:
            if e.kind == PRIOR:
                r, _ = prior_residual_and_jacobian(est[e.i], e.z)
            else:
                r, _, _ = residual_and_jacobians(est[e.i], est[e.j], e.z)
            total += 0.5 * float(r @ e.info @ r)
        return total

    def rebuild_check(self):
        """Relative mismatch between the accumulated Lambda/eta and a full
        rebuild at theta; diagnostic for the cleanliness invariant."""
        lam = self.lam.to_dense()
        eta = np.concatenate(self.eta) if self.eta else np.zeros(0)
        saved = [dict(e.lin) for e in self.graph.edges]
        fresh = BlockSparseMatrix(self.layout, symmetric=True)
        feta = [np.zeros(self.dim) for _ in range(self.n_vertices)]
        for e in self.graph.edges:
            A, rw = self.linearize_edge(e)
            keys = sorted(A)
            for a in keys:
                for b in keys:
                    if a <= b:
                        accumulate_block(fresh, a, b, A[a].T @ A[b])
                feta[a] -= A[a].T @ rw
        for e, s in zip(self.graph.edges, saved):
            e.lin = s
        dl = np.linalg.norm(fresh.to_dense() - lam) / max(np.linalg.norm(lam), 1e-300)
        de = np.linalg.norm(np.concatenate(feta) - eta) / max(np.linalg.norm(eta), 1e-300)
        return max(dl, de)
