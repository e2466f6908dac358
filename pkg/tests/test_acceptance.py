"""Acceptance suite.

Each test covers one numbered acceptance criterion and prints a single
``criterion NN: PASS/FAIL`` line (written past the capture machinery so
it always appears in the run log), then asserts the stated tolerances.
Criterion 9 requires an externally supplied large-scale dataset and is
skipped when the KITTI00_GRAPH / KITTI00_LOOPS / KITTI00_GT environment
variables are not set.
"""

import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

import compact_slam.se_math as sm
from compact_slam.compact import (CompactConfig, CompactEngine, ReplayOracle,
                                  calibrate_thresholds,
                                  dimension_probability,
                                  displacement_distribution, mutual_info)
from compact_slam.covariance import (CovarianceCache,
                                     woodbury_downdate_increment)
from compact_slam.evaluation import (Trajectory, compute_errors,
                                     conservativeness_report, reconstruct)
from compact_slam.simulator import SimSpec, simulate
from compact_slam.solver import IncrementalSolver, LOOP, ODOMETRY
from oracles import (batch_gauss_newton, dense_sigma,
                     gaussian_interval_quad, random_graph,
                     stream_into_solver)


_CAPFD = None


@pytest.fixture(autouse=True)
def _passthrough(capfd):
    """Let the per-criterion verdict lines bypass output capture."""
    global _CAPFD
    _CAPFD = capfd
    yield
    _CAPFD = None


def _report(num, ok, detail):
    line = f"criterion {num:02d}: {'PASS' if ok else 'FAIL'} — {detail}"
    if _CAPFD is not None:
        with _CAPFD.disabled():
            print(line, flush=True)
    else:
        print(line, flush=True)


def _make_graphs(n_graphs, seed=2024):
    """The shared random-graph population for criteria 1 and 2."""
    rng = np.random.default_rng(seed)
    out = []
    for trial in range(n_graphs):
        dim = 3 if trial % 2 == 0 else 6
        n_poses = int(rng.integers(10, 41))
        loop_frac = rng.uniform(0.1, 0.6)
        out.append((dim, *random_graph(dim, n_poses, loop_frac, rng)))
    return out


GRAPHS = _make_graphs(50)


# ---------------------------------------------------------------------------
# 1. incremental == batch
# ---------------------------------------------------------------------------

def test_criterion_01_incremental_equals_batch():
    t0 = time.time()
    worst = 0.0
    try:
        for dim, gt, edges in GRAPHS:
            s = IncrementalSolver(dim, relin_threshold=0.0)
            s.add_vertex(np.zeros(dim))
            for e, added, odo in stream_into_solver(s, edges):
                est, _ = s.solve(max_iters=60, tol=1e-10,
                                 relin_threshold=0.0)
                init = [np.zeros(dim)]
                for eo in odo[:e[1]]:
                    init.append(sm.compose(init[-1], eo[2]))
                bt, _ = batch_gauss_newton(dim, init, added, tol=1e-10)
                diff = max(np.abs(np.asarray(a) - np.asarray(b)).max()
                           for a, b in zip(est, bt))
                worst = max(worst, diff)
        elapsed = time.time() - t0
        ok = worst <= 1e-6 and elapsed < 60.0
        _report(1, ok,
                f"50 graphs, worst per-step deviation {worst:.3e} "
                f"(tol 1e-6), {elapsed:.1f}s (< 60s)")
        assert worst <= 1e-6
        assert elapsed < 60.0
    except AssertionError:
        raise
    except Exception as exc:
        _report(1, False, f"exception: {exc}")
        raise


# ---------------------------------------------------------------------------
# 2. covariance recovery exactness + rank-k downdate identity
# ---------------------------------------------------------------------------

def test_criterion_02_covariance_exactness():
    t0 = time.time()
    worst_marg = 0.0
    worst_wood = 0.0
    try:
        for dim, gt, edges in GRAPHS:
            s = IncrementalSolver(dim, relin_threshold=0.0)
            s.add_vertex(np.zeros(dim))
            cache_a = CovarianceCache(s)
            cache_b = CovarianceCache(s)
            mark = None
            for e, added, odo in stream_into_solver(s, edges):
                s.refresh_factor()
                Sig = dense_sigma(s)
                ga = cache_a.get_marginals(force_branch="recompute")
                gb = cache_b.get_marginals(force_branch="update")
                for v in range(s.n_vertices):
                    sl = s.layout.slice(v)
                    ref = Sig[sl, sl]
                    nref = np.linalg.norm(ref)
                    for g in (ga, gb):
                        worst_marg = max(
                            worst_marg,
                            np.linalg.norm(g[(v, v)] - ref) / nref)
            # rank-k identity: add two closing measurements, then check
            # Sigma_new + downdate == Sigma_old on diagonal blocks
            if s.n_vertices >= 4:
                rng = np.random.default_rng(dim + s.n_vertices)
                s.refresh_factor()
                Sig_old = dense_sigma(s)
                mark = len(s.edge_log)
                for _ in range(2):
                    a = int(rng.integers(0, s.n_vertices - 2))
                    b = int(rng.integers(a + 2, s.n_vertices))
                    s.add_edge(a, b, rng.normal(scale=0.05, size=dim),
                               np.diag(rng.uniform(50, 300, dim)), LOOP)
                s.refresh_factor()
                Sig_new = dense_sigma(s)
                rows = [A for (_, A) in s.edge_log[mark:]]
                dd, dl, _, _ = woodbury_downdate_increment(s.factor, rows)
                scale = max(1.0, np.abs(Sig_old).max())
                for v in range(s.n_vertices):
                    sl = s.layout.slice(v)
                    err = np.abs(Sig_new[sl, sl] + dd[v]
                                 - Sig_old[sl, sl]).max() / scale
                    worst_wood = max(worst_wood, err)
        elapsed = time.time() - t0
        ok = worst_marg <= 1e-8 and worst_wood <= 1e-9 and elapsed < 60.0
        _report(2, ok,
                f"both branches worst rel {worst_marg:.3e} (tol 1e-8), "
                f"downdate identity worst {worst_wood:.3e} (tol 1e-9), "
                f"{elapsed:.1f}s (< 60s)")
        assert worst_marg <= 1e-8
        assert worst_wood <= 1e-9
        assert elapsed < 60.0
    except AssertionError:
        raise
    except Exception as exc:
        _report(2, False, f"exception: {exc}")
        raise


# ---------------------------------------------------------------------------
# 3. mutual-information equivalence
# ---------------------------------------------------------------------------

def test_criterion_03_mutual_information_equivalence():
    """Determinant-ratio gain of adding one whitened edge equals the
    closed-form gain from the displacement covariance, 100 systems."""
    rng = np.random.default_rng(123)
    worst = 0.0
    count = 0
    try:
        while count < 100:
            dim = 3 if count % 2 == 0 else 6
            gt, edges = random_graph(dim, int(rng.integers(8, 20)), 0.3,
                                     rng)
            s = IncrementalSolver(dim, relin_threshold=0.0)
            s.add_vertex(np.zeros(dim))
            for _ in stream_into_solver(s, edges):
                pass
            s.solve(max_iters=60, tol=1e-12, relin_threshold=0.0)
            s.refresh_factor()
            cache = CovarianceCache(s)
            lam = s.lam.to_dense()
            n = s.n_vertices
            for _ in range(5):
                if count >= 100:
                    break
                i = int(rng.integers(0, n - 2))
                j = int(rng.integers(i + 1, n))
                A = rng.normal(size=(dim, dim))
                Sk = A @ A.T + 0.05 * np.eye(dim)
                W = np.linalg.cholesky(np.linalg.inv(Sk)).T
                mu_d, Sd = displacement_distribution(s, cache, i, j)
                Ji, Jj = sm.displacement_jacobians_local(
                    s.estimate(i), s.estimate(j))
                rows = np.zeros((dim, lam.shape[0]))
                rows[:, i * dim:(i + 1) * dim] = W @ Ji
                rows[:, j * dim:(j + 1) * dim] = W @ Jj
                _, ld0 = np.linalg.slogdet(lam)
                _, ld1 = np.linalg.slogdet(lam + rows.T @ rows)
                lhs = 0.5 * (ld1 - ld0)
                rhs = mutual_info(Sk, Sd)
                worst = max(worst,
                            abs(lhs - rhs) / max(abs(rhs), 1e-12))
                count += 1
        ok = worst <= 1e-6
        _report(3, ok,
                f"100 systems, worst relative gain mismatch {worst:.3e} "
                f"(tol 1e-6)")
        assert worst <= 1e-6
    except AssertionError:
        raise
    except Exception as exc:
        _report(3, False, f"exception: {exc}")
        raise


# ---------------------------------------------------------------------------
# 4. distance-test probability closed form vs quadrature
# ---------------------------------------------------------------------------

def test_criterion_04_interval_probability_grid():
    worst = 0.0
    try:
        for sigma in (0.3, 1.0, 2.7):
            for mu_r in np.linspace(-5.0, 5.0, 21):
                for v_r in np.linspace(0.1, 10.0, 21):
                    mu, v = mu_r * sigma, v_r * sigma
                    worst = max(worst, abs(
                        dimension_probability(mu, sigma, v)
                        - gaussian_interval_quad(mu, sigma, v)))
        ok = worst <= 1e-9
        _report(4, ok,
                f"grid mu/sigma in [-5,5], v/sigma in [0.1,10]: worst "
                f"abs deviation {worst:.3e} (tol 1e-9)")
        assert worst <= 1e-9
    except AssertionError:
        raise
    except Exception as exc:
        _report(4, False, f"exception: {exc}")
        raise


# ---------------------------------------------------------------------------
# 5. compact reduction, growth laws and speedup over 10 revisit loops
# ---------------------------------------------------------------------------

def _linear_fit_r2(ys):
    x = np.arange(1, len(ys) + 1.0)
    y = np.asarray(ys, float)
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return 1.0 - resid @ resid / np.sum((y - y.mean()) ** 2)


def test_criterion_05_growth_and_speedup():
    t_start = time.time()
    try:
        spec = SimSpec(shape="ellipsen", n_loops=10, poses_per_loop=20,
                       loop_noise_trans=0.4, loop_noise_rot=0.05, seed=0)
        res = simulate(spec)
        cfg = calibrate_thresholds(6, res.odometry,
                                   ReplayOracle(res.oracle_table),
                                   sample_fraction=0.6, s=0.1)

        t0 = time.time()
        apal_cfg = CompactConfig(
            v=cfg.v, s=cfg.s, g_pose=cfg.g_pose, g_loop=cfg.g_loop,
            sigma_y_bar=cfg.sigma_y_bar, mode="apal")
        apal = CompactEngine(6, apal_cfg, ReplayOracle(res.oracle_table),
                             initial_pose=res.ground_truth[0])
        apal.run(res.odometry)
        t_apal = time.time() - t0

        t0 = time.time()
        fpfl = CompactEngine(6, cfg, ReplayOracle(res.oracle_table),
                             initial_pose=res.ground_truth[0])
        fpfl.run(res.odometry)
        t_fpfl = time.time() - t0
        speedup = t_apal / t_fpfl

        def counts(eng):
            out = []
            for k in range(1, spec.n_loops + 1):
                ev = eng.events[k * spec.poses_per_loop - 1]
                out.append((ev.n_vertices, ev.n_loops))
            return out

        ca, cf = counts(apal), counts(fpfl)
        ya = [c[1] for c in ca]
        growth_ratio = (ya[9] - ya[5]) / max(ya[4] - ya[0], 1)
        r2_poses = _linear_fit_r2([c[0] for c in cf])
        r2_loops = _linear_fit_r2([c[1] for c in cf])
        elapsed = time.time() - t_start
        ok = (growth_ratio > 1.5 and r2_poses >= 0.98
              and r2_loops >= 0.98 and speedup >= 5.0
              and elapsed < 600.0)
        _report(5, ok,
                f"keep-all loop growth 2nd/1st half {growth_ratio:.2f}x "
                f"(superlinear > 1.5), compact linear fits R^2 poses "
                f"{r2_poses:.4f} / loops {r2_loops:.4f} (>= 0.98), "
                f"speedup {speedup:.1f}x (>= 5), {elapsed:.0f}s (< 600s)")
        assert growth_ratio > 1.5
        assert r2_poses >= 0.98 and r2_loops >= 0.98
        assert speedup >= 5.0
        assert elapsed < 600.0
    except AssertionError:
        raise
    except Exception as exc:
        _report(5, False, f"exception: {exc}")
        raise


# ---------------------------------------------------------------------------
# 6. compact reduction magnitude on the two-ellipse course
# ---------------------------------------------------------------------------

def test_criterion_06_reduction_magnitude():
    try:
        res = simulate(SimSpec(shape="ellipse3d", seed=0))
        loop_cov = np.mean([c for _, c in res.oracle_table.values()],
                           axis=0)
        cfg = CompactConfig(v=[2.5, 2.5, 2.5, 0.4], s=1.0 / 8,
                            g_pose=5.74, g_loop=5.50,
                            sigma_y_bar=loop_cov, mode="fpfl")
        eng = CompactEngine(6, cfg, ReplayOracle(res.oracle_table),
                            initial_pose=res.ground_truth[0])
        eng.run(res.odometry)
        n = len(res.ground_truth)
        pose_pct = 100.0 * eng.solver.n_vertices / n
        loop_pct = 100.0 * eng.n_loops / len(res.oracle_table)
        ok = pose_pct <= 40.0 and loop_pct <= 10.0
        _report(6, ok,
                f"kept {eng.solver.n_vertices}/{n} poses "
                f"({pose_pct:.1f}%, <= 40%), accepted {eng.n_loops}"
                f"/{len(res.oracle_table)} loops ({loop_pct:.1f}%, "
                f"<= 10%)")
        assert pose_pct <= 40.0
        assert loop_pct <= 10.0
    except AssertionError:
        raise
    except Exception as exc:
        _report(6, False, f"exception: {exc}")
        raise


# ---------------------------------------------------------------------------
# 7. conservativeness of the compact covariance
# ---------------------------------------------------------------------------

def test_criterion_07_conservativeness():
    try:
        sigma_y = np.diag([0.4 ** 2] * 3 + [0.05 ** 2] * 3)
        v = [8.0, 3.0, 1.5, 0.5]
        fcfg = CompactConfig(v=v, s=0.05, g_pose=6.0, g_loop=0.5,
                             sigma_y_bar=sigma_y, mode="fpfl")
        acfg = CompactConfig(v=v, s=0.05, g_pose=6.0, g_loop=0.5,
                             sigma_y_bar=sigma_y, mode="apal")
        cons_ok = 0
        order_ok = 0
        worst_cons = np.inf
        worst_order = np.inf
        for seed in range(20):
            r = simulate(SimSpec(
                shape="ellipsen", n_loops=4, poses_per_loop=20,
                oracle_arc_fraction=0.25, loop_noise_trans=0.4,
                loop_noise_rot=0.05, seed=seed))
            a = CompactEngine(6, acfg, ReplayOracle(r.oracle_table),
                              initial_pose=r.ground_truth[0])
            f = CompactEngine(6, fcfg, ReplayOracle(r.oracle_table),
                              initial_pose=r.ground_truth[0])
            rep = conservativeness_report(a, f, r.odometry)
            # per-variable marginal norms of the compact system vs the
            # keep-all system marginalized onto the same poses; 0.5%
            # slack absorbs the second-order measurement-composition
            # error of the summarized odometry
            ratio = (np.asarray(rep["compact_marg"])
                     / np.asarray(rep["marginalized_marg"]))
            cons_ok += bool(np.all(ratio >= 1.0 - 5e-3))
            worst_cons = min(worst_cons, float(ratio.min()))
            # keep-all full covariance norm >= compact norm at every step
            order = (np.asarray(rep["full"])
                     / np.asarray(rep["compact"]))
            order_ok += bool(np.all(order >= 1.0 - 1e-9))
            worst_order = min(worst_order, float(order.min()))
        ok = cons_ok >= 19 and order_ok >= 19
        _report(7, ok,
                f"compact >= marginalized keep-all (0.5% slack) in "
                f"{cons_ok}/20 seeds (min ratio {worst_cons:.4f}); "
                f"keep-all >= compact in {order_ok}/20 seeds (min ratio "
                f"{worst_order:.6f}); both required >= 19/20")
        assert cons_ok >= 19
        assert order_ok >= 19
    except AssertionError:
        raise
    except Exception as exc:
        _report(7, False, f"exception: {exc}")
        raise


# ---------------------------------------------------------------------------
# 8. reconstruction quality ordering
# ---------------------------------------------------------------------------

def test_criterion_08_reconstruction_ordering():
    try:
        base = SimSpec(shape="ellipsen", n_loops=4, poses_per_loop=20,
                       loop_noise_trans=0.4, loop_noise_rot=0.05, seed=0)
        r0 = simulate(base)
        cfg = calibrate_thresholds(6, r0.odometry,
                                   ReplayOracle(r0.oracle_table),
                                   sample_fraction=0.6, s=0.1)
        wins = 0
        for seed in range(20):
            r = simulate(SimSpec(**{**base.__dict__, "seed": seed}))
            eng = CompactEngine(6, cfg, ReplayOracle(r.oracle_table),
                                initial_pose=r.ground_truth[0])
            eng.run(r.odometry)
            compact = Trajectory(eng.trajectory())
            gt = Trajectory(list(enumerate(r.ground_truth)))
            odo = [z for z, _ in r.odometry]
            ates = {var: compute_errors(
                reconstruct(compact, odo, var), gt).ate_trans
                for var in ("v0", "v1", "v2")}
            wins += (ates["v2"] <= ates["v1"] + 1e-12
                     and ates["v2"] <= ates["v0"] + 1e-12)
        ok = wins >= 18
        _report(8, ok,
                f"replay reconstruction beats both geodesic variants in "
                f"{wins}/20 seeds (required >= 18/20)")
        assert wins >= 18
    except AssertionError:
        raise
    except Exception as exc:
        _report(8, False, f"exception: {exc}")
        raise


# ---------------------------------------------------------------------------
# 9. externally supplied large-scale golden dataset
# ---------------------------------------------------------------------------

_KITTI_VARS = ("KITTI00_GRAPH", "KITTI00_LOOPS", "KITTI00_GT")


@pytest.mark.skipif(
    not all(os.environ.get(v) for v in _KITTI_VARS),
    reason="large-scale golden dataset not supplied "
           "(set KITTI00_GRAPH, KITTI00_LOOPS, KITTI00_GT)")
def test_criterion_09_large_scale_golden():
    from compact_slam import graph_io
    from compact_slam.cli import _graph_streams, _strip_inlier
    from compact_slam.reports import parse_trajectory_csv
    try:
        with open(os.environ["KITTI00_GRAPH"]) as fh:
            g = graph_io.parse_graph(fh.read())
        with open(os.environ["KITTI00_LOOPS"]) as fh:
            ltext = _strip_inlier(fh.read(), 0.35)
        init, odometry, oracle = _graph_streams(g)
        for r in graph_io.parse_graph(ltext).edges:
            i, j = sorted(r.ids)
            oracle[(i, j)] = (r.pose, np.linalg.inv(r.info))
        loop_cov = np.mean([c for _, c in oracle.values()], axis=0)
        cfg = CompactConfig(v=[2.5, 2.5, 2.5, 0.4], s=1.0 / 8,
                            g_pose=5.74, g_loop=5.50,
                            sigma_y_bar=loop_cov, mode="fpfl")
        eng = CompactEngine(g.dim, cfg, ReplayOracle(oracle),
                            initial_pose=init)
        eng.run(odometry)
        compact = Trajectory(eng.trajectory())
        rec = reconstruct(compact, [z for z, _ in odometry], "v2")
        with open(os.environ["KITTI00_GT"]) as fh:
            gt, _ = parse_trajectory_csv(fh.read())
        sel = {i: p for i, p in gt.poses}
        gt_m = Trajectory([(i, sel[i]) for i in rec.indices])
        ate = compute_errors(rec, gt_m).ate_trans
        ok = abs(ate - 3.093) <= 0.15 * 3.093
        _report(9, ok,
                f"compacted + replay-reconstructed ATE {ate:.3f} m "
                f"(golden 3.093 m +/- 15%)")
        assert ok
    except AssertionError:
        raise
    except Exception as exc:
        _report(9, False, f"exception: {exc}")
        raise


# ---------------------------------------------------------------------------
# 10. module invariant suites within the time budget
# ---------------------------------------------------------------------------

def test_criterion_10_invariant_suites():
    suites = ["tests/test_se_math.py", "tests/test_block_matrix.py",
              "tests/test_covariance.py"]
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    t0 = time.time()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", *suites],
        cwd=root, capture_output=True, text=True)
    elapsed = time.time() - t0
    ok = proc.returncode == 0 and elapsed < 120.0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout else ""
    _report(10, ok,
            f"group/factorization/marginal invariant suites: "
            f"{tail or 'no output'}, {elapsed:.1f}s (< 120s)")
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert elapsed < 120.0
