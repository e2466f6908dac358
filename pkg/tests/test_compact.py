"""Distance test, information gain, registration oracle, configuration
and compaction engine against quadrature / dense / brute-force oracles."""

import math

import numpy as np
import pytest

import compact_slam.se_math as sm
from compact_slam.compact import (CalibrationError, CompactConfig,
                                  CompactEngine, ReplayOracle, StepReport,
                                  calibrate_thresholds, default_config,
                                  dimension_probability,
                                  distance_probabilities, mutual_info,
                                  view_direction_reduce)
from compact_slam.simulator import SimSpec, simulate
from compact_slam.solver import IncrementalSolver, LOOP, ODOMETRY
from oracles import gaussian_interval_quad, numerical_jacobian


# ---------------------------------------------------------------------------
# Distance test
# ---------------------------------------------------------------------------

def test_interval_probability_frozen_quadrature_values():
    cases = [
        ((1.0, 0.5, 2.0), 0.9772498670652333),
        ((-0.3, 0.1, 0.25), 0.3085375197364245),
        ((0.0, 2.0, 1.0), 0.3829249225480263),
    ]
    for (mu, sigma, v), expected in cases:
        assert abs(dimension_probability(mu, sigma, v) - expected) < 1e-12


def test_interval_probability_random_sweep_vs_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(100):
        mu = rng.uniform(-5.0, 5.0)
        sigma = rng.uniform(0.05, 5.0)
        v = sigma * rng.uniform(0.1, 10.0)
        assert abs(dimension_probability(mu, sigma, v)
                   - gaussian_interval_quad(mu, sigma, v)) < 1e-9


def test_interval_probability_degenerate_and_invalid():
    assert dimension_probability(0.5, 0.0, 1.0) == 1.0
    assert dimension_probability(2.0, 0.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        dimension_probability(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        dimension_probability(0.0, -1.0, 1.0)


def test_view_direction_reduction_jacobian_vs_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(6):
        mu = rng.normal(scale=0.4, size=6)
        A = rng.normal(scale=0.05, size=(6, 6))
        sigma = A @ A.T + 1e-4 * np.eye(6)

        def f(eps):
            T = sm.exp_map(sm.compose(mu, eps))
            return np.array([T[0, 3], T[1, 3], T[2, 3], T[2, 2]])

        J = numerical_jacobian(f, np.zeros(6))
        mu_hat, S_hat = view_direction_reduce(mu, sigma)
        assert np.allclose(mu_hat, f(np.zeros(6)), atol=1e-10)
        assert np.allclose(S_hat, J @ sigma @ J.T, atol=1e-6)


def test_distance_probabilities_rot_modes():
    rng = np.random.default_rng(2)
    mu = rng.normal(scale=0.3, size=6)
    sigma = np.diag(rng.uniform(1e-4, 1e-2, 6))
    v = [2.0, 2.0, 2.0, 0.5]
    for mode in ("view-direction", "angle", "axiswise"):
        probs = distance_probabilities(mu, sigma, v, rot_mode=mode)
        assert all(0.0 <= p <= 1.0 for p in probs)
        assert len(probs) == (6 if mode == "axiswise" else 4)
    with pytest.raises(ValueError):
        distance_probabilities(mu, sigma, v, rot_mode="nope")
    # planar case
    mu2 = rng.normal(scale=0.3, size=3)
    sig2 = np.diag(rng.uniform(1e-4, 1e-2, 3))
    probs = distance_probabilities(mu2, sig2, [2.0, 2.0, 0.5])
    assert len(probs) == 3 and all(0.0 <= p <= 1.0 for p in probs)


# ---------------------------------------------------------------------------
# Information gain
# ---------------------------------------------------------------------------

def test_mutual_info_matches_dense_identity():
    """Gain equals 0.5 * log det(I + Sigma_k^-1 Sigma_d)."""
    rng = np.random.default_rng(3)
    for _ in range(50):
        d = int(rng.choice([3, 6]))
        A = rng.normal(size=(d, d))
        B = rng.normal(size=(d, d))
        Sk = A @ A.T + 0.1 * np.eye(d)
        Sd = B @ B.T + 0.01 * np.eye(d)
        ref = 0.5 * math.log(np.linalg.det(
            np.eye(d) + np.linalg.inv(Sk) @ Sd))
        assert abs(mutual_info(Sk, Sd) - ref) < 1e-6 * max(1.0, abs(ref))


def test_mutual_info_edge_cases():
    assert mutual_info(np.eye(3), np.zeros((3, 3))) == 0.0
    with pytest.raises(ValueError):
        mutual_info(np.zeros((3, 3)), np.eye(3))


# ---------------------------------------------------------------------------
# Registration oracle
# ---------------------------------------------------------------------------

def test_replay_oracle_symmetric_and_reversed():
    rng = np.random.default_rng(4)
    z = rng.normal(scale=0.3, size=6)
    cov = np.diag(rng.uniform(1e-4, 1e-2, 6))
    orc = ReplayOracle({(2, 7): (z, cov)})
    assert orc.available(2, 7) and orc.available(7, 2)
    assert not orc.available(2, 6)
    zf, cf = orc.register(2, 7)
    assert np.allclose(zf, z) and np.allclose(cf, cov)
    zr, cr = orc.register(7, 2)
    assert np.allclose(sm.exp_map(zr) @ sm.exp_map(z), np.eye(4),
                       atol=1e-10)
    A = sm.adjoint(sm.exp_map(z))
    assert np.allclose(cr, A @ cov @ A.T, atol=1e-12)
    assert orc.register(0, 1) is None
    assert orc.calls == 3


def test_replay_oracle_failure_rate():
    orc = ReplayOracle({(0, 2): (np.zeros(6), np.eye(6))},
                       failure_rate=1.0)
    assert orc.register(0, 2) is None


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_config_validation_and_json_round_trip():
    cfg = default_config(6)
    text = cfg.to_json()
    cfg2 = CompactConfig.from_json(text)
    assert cfg2.v == cfg.v and cfg2.s == cfg.s
    assert cfg2.g_pose == cfg.g_pose and cfg2.g_loop == cfg.g_loop
    assert np.allclose(cfg2.sigma_y_bar, cfg.sigma_y_bar)
    with pytest.raises(ValueError):
        CompactConfig(v=[1.0, -1.0, 1.0, 0.1], s=0.1, g_pose=1.0,
                      g_loop=1.0, sigma_y_bar=np.eye(6))
    with pytest.raises(ValueError):
        CompactConfig(v=[1.0] * 4, s=1.5, g_pose=1.0, g_loop=1.0,
                      sigma_y_bar=np.eye(6))
    with pytest.raises(ValueError):
        CompactConfig(v=[1.0] * 4, s=0.1, g_pose=1.0, g_loop=1.0,
                      sigma_y_bar=np.eye(6), mode="nope")


def test_mode_gate_overrides():
    cfg = default_config(6, mode="apal")
    s, gp, gl = cfg.effective()
    assert s == 0.0 and gp == -math.inf and gl == -math.inf
    cfg = default_config(6, mode="apfl")
    s, gp, gl = cfg.effective()
    assert s == cfg.s and gp == -math.inf and gl == cfg.g_loop


def test_step_report_json_serializable_with_numpy_types():
    rep = StepReport(stream_index=np.int64(3), replaced=False,
                     candidates=[np.int64(1)], gains={2: np.float64(0.5)},
                     accepted=[np.int64(2)], kept=np.bool_(True),
                     n_vertices=4, n_loops=1)
    import json
    d = json.loads(rep.to_json())
    assert d["kept"] is True and d["accepted"] == [2]


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_sim():
    return simulate(SimSpec(shape="ellipsen", n_loops=2, poses_per_loop=20,
                            seed=3))


def test_keep_all_mode_equals_plain_solver(small_sim):
    """With every gate disabled the engine reproduces a plain incremental
    solver fed all poses and all oracle loops in the same order."""
    res = small_sim
    cfg = CompactConfig(v=[1e6] * 3 + [3.1], s=0.0, g_pose=-math.inf,
                        g_loop=-math.inf, sigma_y_bar=1e-3 * np.eye(6),
                        mode="apal")
    eng = CompactEngine(6, cfg, ReplayOracle(res.oracle_table),
                        initial_pose=res.ground_truth[0])
    eng.run(res.odometry)

    plain = IncrementalSolver(6, relin_threshold=0.01)
    plain.add_vertex(res.ground_truth[0])
    loops_by_target = {}
    for (i, j), (z, c) in res.oracle_table.items():
        loops_by_target.setdefault(j, []).append((i, z, c))
    for k, (z, c) in enumerate(res.odometry, start=1):
        plain.add_edge(k - 1, k, z, np.linalg.inv(c), ODOMETRY)
        plain.solve(max_iters=8, tol=1e-6)
        for (i, zz, cc) in sorted(loops_by_target.get(k, [])):
            plain.add_edge(i, k, zz, np.linalg.inv(cc), LOOP)
            plain.solve(max_iters=8, tol=1e-6)

    assert eng.solver.n_vertices == plain.n_vertices \
        == len(res.ground_truth)
    assert eng.n_loops == len(res.oracle_table)
    dl = np.linalg.norm(eng.solver.lam.to_dense() - plain.lam.to_dense()) \
        / np.linalg.norm(plain.lam.to_dense())
    assert dl < 1e-10


def test_replace_last_vertex_equals_concatenated_chain():
    """Replacing the newest pose with a concatenated measurement yields the
    same system as if the discarded pose never existed."""
    rng = np.random.default_rng(0)
    z1, z2, z3 = [rng.normal(scale=0.2, size=6) for _ in range(3)]
    c = np.diag(rng.uniform(0.001, 0.01, 6))
    s1 = IncrementalSolver(6)
    s1.add_vertex(np.zeros(6))
    s1.add_edge(0, 1, z1, np.linalg.inv(c), ODOMETRY)
    s1.add_edge(1, 2, z2, np.linalg.inv(c), ODOMETRY)
    zc, cc = sm.concatenate_measurement((z2, c), (z3, c))
    s1.replace_last_vertex(1, zc, np.linalg.inv(cc))

    s2 = IncrementalSolver(6)
    s2.add_vertex(np.zeros(6))
    s2.add_edge(0, 1, z1, np.linalg.inv(c), ODOMETRY)
    s2.add_edge(1, 2, zc, np.linalg.inv(cc), ODOMETRY)
    d = np.linalg.norm(s1.lam.to_dense() - s2.lam.to_dense()) \
        / np.linalg.norm(s2.lam.to_dense())
    assert d < 1e-12


def test_gated_run_discards_poses_and_reports(small_sim):
    res = small_sim
    # a very high pose gate forces every pose with revisit candidates to
    # be discarded, so compaction must occur on the second pass
    cfg = CompactConfig(v=[3.0] * 3 + [0.3], s=0.1, g_pose=1e6,
                        g_loop=0.5, sigma_y_bar=1e-3 * np.eye(6))
    eng = CompactEngine(6, cfg, ReplayOracle(res.oracle_table),
                        initial_pose=res.ground_truth[0])
    eng.run(res.odometry)
    reports = eng.events
    assert eng.solver.n_vertices < len(res.ground_truth)
    assert len(reports) == len(res.odometry)
    # every report serializes and the trajectory maps back to stream order
    for rep in reports:
        rep.to_json()
    traj = eng.trajectory()
    idx = [i for i, _ in traj]
    assert idx == sorted(idx) and idx[0] == 0
    assert idx[-1] == len(res.odometry)


def test_calibration_requires_loops():
    rng = np.random.default_rng(5)
    stream = [(np.array([0.5, 0, 0, 0, 0, 0.01]),
               1e-3 * np.eye(6)) for _ in range(10)]
    with pytest.raises(CalibrationError):
        calibrate_thresholds(6, stream, ReplayOracle({}))


def test_calibration_produces_valid_config(small_sim):
    res = small_sim
    cfg = calibrate_thresholds(6, res.odometry,
                               ReplayOracle(res.oracle_table),
                               sample_fraction=0.5, s=0.1)
    assert cfg.mode == "fpfl"
    assert all(x > 0 for x in cfg.v) and cfg.v[3] <= math.pi
    assert cfg.g_loop >= 0.0 and cfg.g_pose >= 0.0
    assert np.all(np.linalg.eigvalsh(cfg.sigma_y_bar) > 0)
    # round trips through JSON
    CompactConfig.from_json(cfg.to_json())
