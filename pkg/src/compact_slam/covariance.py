"""Marginal covariance recovery from the block Cholesky factor.

Three mechanisms are provided and cross-validated:

* the block recurrence that walks the factor's sparsity pattern to
  produce individual Sigma blocks (exact, memoized per call);
* block-column solves R^T R X = I_v for full covariance columns of a
  variable subset;
* a low-rank update that refreshes cached blocks after new measurements
  using only the *current* factor: with U = I - A_u Sigma_new A_u^T and
  B = Sigma_new A_u^T, the previous covariance satisfies
  Sigma_old = Sigma_new + B U^-1 B^T, so the new cache is obtained by
  subtracting that increment from the old one.

A cache tracks every variable's diagonal block plus the full block
column of the newest variable, choosing between full recomputation and
the low-rank update based on the pending-update rank and whether the
linearization point moved.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .block_matrix import BlockSparseMatrix, solve_triangular


class CovarianceFallback(Exception):
    """Signals that the low-rank update is unusable; recompute instead."""


# ---------------------------------------------------------------------------
# Exact block recovery from the factor
# ---------------------------------------------------------------------------

def _recursive_perm(factor, pi, pj, memo):
    """Sigma block (pi, pj), pi <= pj, in permuted coordinates (iterative)."""
    if (pi, pj) in memo:
        return memo[(pi, pj)]
    stack = [(pi, pj)]
    while stack:
        i, j = stack[-1]
        if (i, j) in memo:
            stack.pop()
            continue
        deps = []
        for (k, _) in factor.rows[i]:
            a, b = (k, j) if k <= j else (j, k)
            if (a, b) not in memo:
                deps.append((a, b))
        if deps:
            stack.extend(deps)
            continue
        stack.pop()
        Rii = factor.R.columns[i][i]
        if i == j:
            acc = scipy.linalg.solve_triangular(Rii, np.eye(Rii.shape[0]),
                                                lower=False).T
            # acc = Rii^-T
            for (k, Rik) in factor.rows[i]:
                blk = memo[(k, j)] if k <= j else memo[(j, k)].T
                acc = acc - Rik @ blk
        else:
            d_j = factor.layout.block_dims[j]
            acc = np.zeros((Rii.shape[0], d_j))
            for (k, Rik) in factor.rows[i]:
                blk = memo[(k, j)] if k <= j else memo[(j, k)].T
                acc = acc - Rik @ blk
        memo[(i, j)] = scipy.linalg.solve_triangular(Rii, acc, lower=False)
        if i == j:
            memo[(i, j)] = 0.5 * (memo[(i, j)] + memo[(i, j)].T)
    return memo[(pi, pj)]


def recursive_element(factor, i, j, memo=None):
    """Sigma block (i, j) of (R^T R)^-1, indices in the original order."""
    if memo is None:
        memo = {}
    pi, pj = factor.pos[i], factor.pos[j]
    if pi <= pj:
        return _recursive_perm(factor, pi, pj, memo)
    return _recursive_perm(factor, pj, pi, memo).T


def marginal_block_column(factor, variables):
    """Covariance columns for a variable subset via two triangular solves.

    Returns (X, col_slices) where X is N x sum(dims) in the original row
    order and ``col_slices[v]`` selects the columns of variable v.
    """
    variables = list(variables)
    src = factor.layout_src
    N = src.total_dim
    widths = [src.block_dims[v] for v in variables]
    I_v = np.zeros((N, sum(widths)))
    col_slices = {}
    off = 0
    for v, w in zip(variables, widths):
        I_v[src.slice(v), off:off + w] = np.eye(w)
        col_slices[v] = slice(off, off + w)
        off += w
    y = solve_triangular(factor, I_v, "forward")
    X = solve_triangular(factor, y, "backward")
    return X, col_slices


def schur_marginalize(lam_dense, eta, layout, keep):
    """Eliminate all variables outside ``keep`` from a dense information
    system; returns (reduced Lambda, reduced eta, kept variable order)."""
    keep = sorted(keep)
    elim = [v for v in range(layout.n_blocks) if v not in set(keep)]
    ki = np.concatenate([np.arange(layout.offsets[v], layout.offsets[v + 1])
                         for v in keep]) if keep else np.array([], dtype=int)
    if not elim:
        return lam_dense[np.ix_(ki, ki)], np.asarray(eta)[ki], keep
    ei = np.concatenate([np.arange(layout.offsets[v], layout.offsets[v + 1])
                         for v in elim])
    L_kk = lam_dense[np.ix_(ki, ki)]
    L_ke = lam_dense[np.ix_(ki, ei)]
    L_ee = lam_dense[np.ix_(ei, ei)]
    eta = np.asarray(eta, dtype=float)
    try:
        c, low = scipy.linalg.cho_factor(L_ee)
    except np.linalg.LinAlgError as exc:
        raise ValueError("eliminated sub-block is singular") from exc
    W = scipy.linalg.cho_solve((c, low), L_ke.T)
    lam_red = L_kk - L_ke @ W
    eta_red = eta[ki] - W.T @ eta[ei]
    return 0.5 * (lam_red + lam_red.T), eta_red, keep


# ---------------------------------------------------------------------------
# Incremental cache
# ---------------------------------------------------------------------------

def woodbury_downdate_increment(factor_new, a_rows, tracked_diag=True):
    """Low-rank covariance increment from accumulated measurement rows.

    ``a_rows`` is a list of {variable: whitened Jacobian block} dicts.
    Returns (delta_diag, delta_last_col, X, col_slices) where delta_diag
    maps each variable to its d x d increment, delta_last_col is the
    increment of the newest variable's full block column, and X carries
    the freshly solved covariance columns of the touched variables.
    The previous covariance satisfies Sigma_old = Sigma_new + increment.
    """
    src = factor_new.layout_src
    touched = sorted({v for row in a_rows for v in row})
    if not touched:
        return {}, None, None, {}
    X, col_slices = marginal_block_column(factor_new, touched)
    m = sum(next(iter(row.values())).shape[0] for row in a_rows)
    N = src.total_dim
    A = np.zeros((m, N))
    r0 = 0
    for row in a_rows:
        dk = next(iter(row.values())).shape[0]
        for v, blk in row.items():
            A[r0:r0 + dk, src.slice(v)] = blk
        r0 += dk
    A_v = np.concatenate([A[:, src.slice(v)] for v in touched], axis=1)
    Sigma_vv = np.concatenate([X[src.slice(v), :] for v in touched], axis=0)
    U = np.eye(m) - A_v @ Sigma_vv @ A_v.T
    scale = max(np.abs(U).max(), 1.0)
    sign, logdet = np.linalg.slogdet(U)
    if sign <= 0 or logdet < m * np.log(1e-12 * scale):
        raise CovarianceFallback("update matrix numerically singular")
    B = X @ A_v.T                      # N x m,  Sigma_new A_u^T
    K = np.linalg.solve(U, B.T)        # m x N
    delta_diag = {}
    n_blocks = src.n_blocks
    for v in range(n_blocks):
        sv = src.slice(v)
        delta_diag[v] = B[sv, :] @ K[:, sv]
    last = n_blocks - 1
    delta_last = B @ K[:, src.slice(last)]
    return delta_diag, delta_last, X, col_slices


class CovarianceCache:
    """Tracks marginal covariance blocks of a solver's current system.

    Tracked set: the diagonal block of every variable plus the full block
    column of the newest variable.  ``branch_ratio`` bounds the pending
    update rank (relative to N) above which a full recomputation is
    preferred over the low-rank update.
    """

    def __init__(self, solver, branch_ratio=0.25):
        self.solver = solver
        self.branch_ratio = branch_ratio
        self.diag = None          # list of d x d blocks
        self.last_col = None      # N x d, column of newest variable
        self.valid_at_step = -1
        self.lin_epoch = -1
        self.consumed = 0         # edge_log entries already folded in
        self.n_solves = 0         # instrumentation: triangular-solve passes

    # -- internals -----------------------------------------------------------

    def _pending(self):
        if self.lin_epoch != self.solver.lin_epoch:
            return None  # log restarted; low-rank path unusable
        return [A for (_, A) in self.solver.edge_log[self.consumed:]]

    def _recompute(self):
        solver = self.solver
        factor = solver.factor
        n = solver.layout.n_blocks
        memo = {}
        self.diag = [recursive_element(factor, v, v, memo) for v in range(n)]
        X, cols = marginal_block_column(factor, [n - 1])
        self.n_solves += 1
        self.last_col = X
        self.diag[n - 1] = X[solver.layout.slice(n - 1), :]

    def _update(self, pending):
        solver = self.solver
        n = solver.layout.n_blocks
        n_old = len(self.diag)
        delta_diag, delta_last, X, cols = woodbury_downdate_increment(
            solver.factor, pending)
        self.n_solves += 1
        new_diag = []
        for v in range(n):
            if v < n_old:
                new_diag.append(self.diag[v] - delta_diag.get(v, 0.0))
            else:
                # variable born inside the pending window: read it off X
                if v not in cols:
                    raise CovarianceFallback("new variable untouched by updates")
                new_diag.append(X[solver.layout.slice(v), cols[v]])
        last = n - 1
        if last in cols:
            self.last_col = X[:, cols[last]]
        else:
            Xl, _ = marginal_block_column(solver.factor, [last])
            self.n_solves += 1
            self.last_col = Xl
        self.diag = [0.5 * (b + b.T) for b in new_diag]
        self.diag[last] = self.last_col[solver.layout.slice(last), :]

    def refresh(self, force_branch=None):
        """Bring the cache up to date; returns the branch taken
        ('hit', 'recompute' or 'update')."""
        solver = self.solver
        solver.refresh_factor()
        if self.valid_at_step == solver.step and self.lin_epoch == solver.lin_epoch:
            return "hit"
        pending = self._pending()
        N = solver.layout.total_dim
        rank = sum(next(iter(A.values())).shape[0] for A in pending) \
            if pending else None
        use_update = (
            force_branch == "update"
            or (force_branch is None
                and pending is not None
                and self.diag is not None
                and rank <= self.branch_ratio * N)
        )
        if use_update and pending is not None:
            try:
                self._update(pending)
                branch = "update"
            except CovarianceFallback:
                self._recompute()
                branch = "recompute"
        else:
            self._recompute()
            branch = "recompute"
        self.valid_at_step = solver.step
        self.lin_epoch = solver.lin_epoch
        self.consumed = len(solver.edge_log)
        return branch

    # -- queries ---------------------------------------------------------------

    def get_marginals(self, need=None, force_branch=None):
        """Return covariance blocks for the requested (i, j) pairs.

        Diagonal pairs and pairs involving the newest variable are served
        from the cache; other off-diagonal pairs fall back to the exact
        recurrence.  ``need=None`` returns all diagonal blocks.
        """
        self.refresh(force_branch=force_branch)
        solver = self.solver
        n = solver.layout.n_blocks
        if need is None:
            need = [(v, v) for v in range(n)]
        out = {}
        memo = {}
        for (i, j) in need:
            if i == j:
                out[(i, j)] = self.diag[i]
            elif j == n - 1:
                out[(i, j)] = self.last_col[solver.layout.slice(i), :]
            elif i == n - 1:
                out[(i, j)] = self.last_col[solver.layout.slice(j), :].T
            else:
                out[(i, j)] = recursive_element(solver.factor, i, j, memo)
        return out

    def marginal_norms(self):
        """Frobenius norm of each variable's marginal block (cache-refreshing)."""
        self.refresh()
        return [float(np.linalg.norm(b)) for b in self.diag]
