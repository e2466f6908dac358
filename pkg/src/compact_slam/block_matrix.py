"""Sparse symmetric block-matrix storage and factorization kernels.

The system matrix is partitioned into blocks, one per variable; all
storage, ordering and factorization operate at block granularity.  The
Cholesky factor is upper triangular (R^T R = P Lambda P^T) and supports
resumed factorization: columns left of a frontier are reused verbatim
while trailing columns are recomputed by the left-looking recurrence.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class IndefiniteSystemError(Exception):
    """Raised when a pivot block is not positive definite."""

    def __init__(self, block_index):
        self.block_index = block_index
        super().__init__(f"non-positive-definite pivot at block column {block_index}")


class BlockDimensionError(ValueError):
    pass


@dataclass
class BlockLayout:
    """Per-variable block dimensions and cumulative offsets."""

    block_dims: list
    offsets: list = field(default_factory=list)

    def __post_init__(self):
        self._rebuild_offsets()

    def _rebuild_offsets(self):
        off = [0]
        for d in self.block_dims:
            off.append(off[-1] + int(d))
        self.offsets = off

    @property
    def n_blocks(self):
        return len(self.block_dims)

    @property
    def total_dim(self):
        return self.offsets[-1]

    def append(self, dim):
        self.block_dims.append(int(dim))
        self.offsets.append(self.offsets[-1] + int(dim))

    def slice(self, i):
        return slice(self.offsets[i], self.offsets[i + 1])


class BlockSparseMatrix:
    """Column-oriented sparse block matrix.

    ``columns[j]`` maps block-row index ``i`` to a dense block.  Symmetric
    matrices store only blocks with ``i <= j``; the full block is returned
    on demand through :meth:`get`.
    """

    def __init__(self, layout: BlockLayout, symmetric: bool = True):
        self.layout = layout
        self.symmetric = symmetric
        self.columns = [dict() for _ in range(layout.n_blocks)]

    def sync_layout(self):
        """Grow column storage after the layout gained variables."""
        while len(self.columns) < self.layout.n_blocks:
            self.columns.append(dict())

    def set_block(self, i, j, b):
        if self.symmetric and i > j:
            i, j, b = j, i, np.asarray(b).T
        self._check_dims(i, j, b)
        self.columns[j][i] = np.array(b, dtype=float)

    def get(self, i, j):
        """Return block (i, j), honouring symmetry; None when absent."""
        if self.symmetric and i > j:
            b = self.columns[i].get(j)
            return None if b is None else b.T
        return self.columns[j].get(i)

    def _check_dims(self, i, j, b):
        b = np.asarray(b)
        if b.shape != (self.layout.block_dims[i], self.layout.block_dims[j]):
            raise BlockDimensionError(
                f"block ({i},{j}) has shape {b.shape}, layout expects "
                f"({self.layout.block_dims[i]},{self.layout.block_dims[j]})")

    def nnz_blocks(self):
        return sum(len(c) for c in self.columns)

    def to_dense(self):
        N = self.layout.total_dim
        M = np.zeros((N, N))
        for j, col in enumerate(self.columns):
            sj = self.layout.slice(j)
            for i, b in col.items():
                si = self.layout.slice(i)
                M[si, sj] = b
                if self.symmetric and i != j:
                    M[sj, si] = b.T
        return M

    def to_matrix_market(self):
        """Elementwise coordinate-format dump for external cross-checks."""
        lines = ["%%MatrixMarket matrix coordinate real general"]
        entries = []
        for j, col in enumerate(self.columns):
            oj = self.layout.offsets[j]
            for i, b in col.items():
                oi = self.layout.offsets[i]
                for (bi, bj), v in np.ndenumerate(b):
                    entries.append((oi + bi + 1, oj + bj + 1, v))
                    if self.symmetric and i != j:
                        entries.append((oj + bj + 1, oi + bi + 1, v))
        n = self.layout.total_dim
        lines.append(f"{n} {n} {len(entries)}")
        for r, c, v in sorted(entries):
            lines.append(f"{r} {c} {v:.17g}")
        return "\n".join(lines) + "\n"

    def copy(self):
        out = BlockSparseMatrix(BlockLayout(list(self.layout.block_dims)), self.symmetric)
        for j, col in enumerate(self.columns):
            out.columns[j] = {i: b.copy() for i, b in col.items()}
        return out


def accumulate_block(m: BlockSparseMatrix, i, j, b):
    """Add ``b`` into block (i, j), creating the block if absent."""
    if m.symmetric and i > j:
        i, j, b = j, i, np.asarray(b).T
    m._check_dims(i, j, b)
    cur = m.columns[j].get(i)
    if cur is None:
        m.columns[j][i] = np.array(b, dtype=float)
    else:
        cur += b


# ---------------------------------------------------------------------------
# Ordering
# ---------------------------------------------------------------------------

def _block_adjacency(m: BlockSparseMatrix, perm=None):
    """Undirected block adjacency of the symmetric pattern, in permuted
    coordinates when ``perm`` is given (perm[k] = original index at slot k)."""
    n = m.layout.n_blocks
    pos = None
    if perm is not None:
        pos = [0] * n
        for k, v in enumerate(perm):
            pos[v] = k
    adj = [set() for _ in range(n)]
    for j, col in enumerate(m.columns):
        pj = pos[j] if pos else j
        for i in col:
            if i == j:
                continue
            pi = pos[i] if pos else i
            adj[pi].add(pj)
            adj[pj].add(pi)
    return adj


def expand_window(m: BlockSparseMatrix, start, perm=None):
    """Shrink ``start`` until no stored block lies above-left of the
    trailing window [start, n) in permuted coordinates."""
    n = m.layout.n_blocks
    start = min(start, n)
    adj = _block_adjacency(m, perm)
    changed = True
    while changed and start > 0:
        changed = False
        for j in range(start, n):
            for i in adj[j]:
                if i < start:
                    start = i
                    changed = True
        # loop re-scans because lowering start exposes new columns
    return start


def block_amd_ordering(m: BlockSparseMatrix, start, base_perm=None):
    """Minimum-degree ordering of the trailing window [start, n).

    Blocks [0, start) keep their positions.  Ties are broken by the lowest
    block index (in the coordinates being ordered) for determinism.  When
    ``base_perm`` is given, the pattern considered is the base-permuted
    matrix and the returned permutation is composed with it (it maps slot
    -> original block index).
    """
    n = m.layout.n_blocks
    start = expand_window(m, start, base_perm)
    adj = _block_adjacency(m, base_perm)
    window = list(range(start, n))
    # Greedy minimum degree with elimination-graph updates.
    alive = set(window)
    degree = {v: len(adj[v] & alive) for v in window}
    order = []
    local_adj = {v: set(adj[v]) & alive for v in window}
    while alive:
        v = min(alive, key=lambda u: (degree[u], u))
        order.append(v)
        alive.discard(v)
        nbrs = local_adj[v] & alive
        for u in nbrs:
            local_adj[u].discard(v)
            local_adj[u] |= (nbrs - {u})
            degree[u] = len(local_adj[u] & alive)
    perm_positions = list(range(start)) + order
    if base_perm is not None:
        return [base_perm[k] for k in perm_positions]
    return perm_positions


# ---------------------------------------------------------------------------
# Cholesky
# ---------------------------------------------------------------------------

class BlockCholeskyFactor:
    """Upper-triangular block Cholesky factor R with R^T R = P Lambda P^T."""

    def __init__(self, layout: BlockLayout, perm):
        self.layout_src = layout
        self.perm = list(perm)
        self.pos = [0] * len(self.perm)
        for k, v in enumerate(self.perm):
            self.pos[v] = k
        dims = [layout.block_dims[v] for v in self.perm]
        self.layout = BlockLayout(dims)
        self.R = BlockSparseMatrix(self.layout, symmetric=False)
        self.rows = [[] for _ in range(self.layout.n_blocks)]  # row i -> [(j, block)]
        self.frontier = 0

    def _rebuild_rows(self, upto):
        self.rows = [[] for _ in range(self.layout.n_blocks)]
        for j in range(upto):
            for i, b in self.R.columns[j].items():
                if i != j:
                    self.rows[i].append((j, b))

    def nnz_blocks(self):
        return self.R.nnz_blocks()

    def to_dense(self):
        return self.R.to_dense()


def _permuted_column(m, factor, j):
    """Upper part (rows <= j) of permuted column j of m, as {row: block}."""
    col = {}
    oj = factor.perm[j]
    for i in range(j + 1):
        b = m.get(factor.perm[i], oj)
        if b is not None:
            col[i] = np.array(b, dtype=float)
    return col


def _factor_column(factor, m, j):
    """Compute column j of R by the up-looking sparse triangular solve."""
    x = _permuted_column(m, factor, j)
    diag_rhs = x.pop(j, None)
    if diag_rhs is None:
        dj = factor.layout.block_dims[j]
        diag_rhs = np.zeros((dj, dj))
    heap = list(x.keys())
    heapq.heapify(heap)
    done = set()
    col = {}
    while heap:
        i = heapq.heappop(heap)
        if i in done:
            continue
        done.add(i)
        Rii = factor.R.columns[i][i]
        xi = scipy.linalg.solve_triangular(Rii.T, x[i], lower=True)
        col[i] = xi
        for (t, Rit) in factor.rows[i]:
            if t >= j:
                continue
            if t in x:
                x[t] = x[t] - Rit.T @ xi
            else:
                x[t] = -(Rit.T @ xi)
                heapq.heappush(heap, t)
    D = diag_rhs
    for i, xi in col.items():
        D = D - xi.T @ xi
    D = 0.5 * (D + D.T)
    try:
        L = np.linalg.cholesky(D)
    except np.linalg.LinAlgError:
        raise IndefiniteSystemError(j) from None
    col[j] = L.T
    factor.R.columns[j] = col
    for i, b in col.items():
        if i != j:
            factor.rows[i].append((j, b))


def cholesky_full(m: BlockSparseMatrix, perm=None):
    """Full block Cholesky factorization under the given block permutation."""
    if perm is None:
        perm = list(range(m.layout.n_blocks))
    factor = BlockCholeskyFactor(m.layout, perm)
    for j in range(factor.layout.n_blocks):
        _factor_column(factor, m, j)
    factor.frontier = factor.layout.n_blocks
    return factor


def cholesky_resumed(factor: BlockCholeskyFactor, m: BlockSparseMatrix, from_col):
    """Recompute columns [from_col, n) of R, reusing the untouched prefix.

    Requires that permuted blocks of ``m`` strictly above-left of column
    ``from_col`` are unchanged since ``factor`` was computed.
    """
    n = m.layout.n_blocks
    if n != factor.layout.n_blocks:
        # New variables appended since the factor was built: extend.
        for v in range(len(factor.perm), n):
            factor.perm.append(v)
            factor.pos.append(len(factor.perm) - 1)
            factor.layout.append(m.layout.block_dims[v])
            factor.R.sync_layout()
            factor.rows.append([])
        factor.layout_src = m.layout
    if from_col >= n:
        return factor
    for j in range(from_col, n):
        factor.R.columns[j] = {}
    factor._rebuild_rows(from_col)
    for j in range(from_col, n):
        _factor_column(factor, m, j)
    factor.frontier = n
    return factor


def cholesky_retarget(factor: BlockCholeskyFactor, m: BlockSparseMatrix,
                      new_perm, start):
    """Adopt a new permutation whose prefix [0, start) matches the factor's,
    then recompute columns [start, n).

    This is the resumed-factorization path after the trailing window has
    been reordered: kept columns depend only on the unchanged prefix of
    the permutation, so they remain valid verbatim.
    """
    if list(new_perm[:start]) != factor.perm[:start]:
        raise ValueError("retarget requires an unchanged permutation prefix")
    n = len(new_perm)
    factor.perm = list(new_perm)
    factor.pos = [0] * n
    for k, v in enumerate(factor.perm):
        factor.pos[v] = k
    factor.layout_src = m.layout
    factor.layout = BlockLayout([m.layout.block_dims[v] for v in factor.perm])
    factor.R.layout = factor.layout
    factor.R.columns = factor.R.columns[:start] + [dict() for _ in range(n - start)]
    factor._rebuild_rows(start)
    for j in range(start, n):
        _factor_column(factor, m, j)
    factor.frontier = n
    return factor


def solve_triangular(factor: BlockCholeskyFactor, rhs, mode):
    """Triangular solve against the factor.

    ``mode='forward'`` solves R^T x = P rhs and returns x (internal,
    permuted); ``mode='backward'`` solves R z = rhs and returns P^T z in
    the original variable order.  ``backward(forward(eta))`` therefore
    solves Lambda delta = eta with the caller working in original order.
    """
    rhs = np.asarray(rhs, dtype=float)
    single = rhs.ndim == 1
    if single:
        rhs = rhs[:, None]
    lay = factor.layout
    n = lay.n_blocks
    if mode == "forward":
        x = np.empty_like(rhs)
        # permute rhs
        src = factor.layout_src
        for k in range(n):
            x[lay.slice(k)] = rhs[src.slice(factor.perm[k])]
        for j in range(n):
            acc = x[lay.slice(j)].copy()
            for i, Rij in factor.R.columns[j].items():
                if i != j:
                    acc -= Rij.T @ x[lay.slice(i)]
            Rjj = factor.R.columns[j][j]
            x[lay.slice(j)] = scipy.linalg.solve_triangular(Rjj.T, acc, lower=True)
        out = x
    elif mode == "backward":
        z = rhs.copy()
        for j in range(n - 1, -1, -1):
            acc = z[lay.slice(j)]
            Rjj = factor.R.columns[j][j]
            zj = scipy.linalg.solve_triangular(Rjj, acc, lower=False)
            z[lay.slice(j)] = zj
            for i, Rij in factor.R.columns[j].items():
                if i != j:
                    z[lay.slice(i)] -= Rij @ zj
        out = np.empty_like(z)
        src = factor.layout_src
        for k in range(n):
            out[src.slice(factor.perm[k])] = z[lay.slice(k)]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out[:, 0] if single else out


def factor_residual(factor: BlockCholeskyFactor, m: BlockSparseMatrix):
    """Relative Frobenius residual |R^T R - P Lambda P^T| / |Lambda|."""
    Rd = factor.to_dense()
    Md = m.to_dense()
    N = m.layout.total_dim
    P = np.zeros((N, N))
    lay = factor.layout
    src = factor.layout_src
    for k in range(lay.n_blocks):
        P[lay.slice(k), src.slice(factor.perm[k])] = np.eye(lay.block_dims[k])
    return np.linalg.norm(Rd.T @ Rd - P @ Md @ P.T) / max(np.linalg.norm(Md), 1e-300)
