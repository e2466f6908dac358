"""Trajectory reconstruction, rigid alignment and error metrics.

A compact trajectory keeps only a subset of the original stream poses.
Three reconstruction variants fill the gaps between consecutive kept
poses A (index p) and B (index q):

* ``v0``: geodesic interpolation with uniform weights u/m;
* ``v1``: geodesic interpolation weighted by cumulative odometry
  step lengths;
* ``v2``: odometry replay from A, with the end-point discrepancy
  (expressed in the local error space) distributed along the segment
  using the same cumulative weights.

Kept indices are pinned bit-exactly in every variant.  Errors are
reported as RMSE over absolute poses after Kabsch alignment (ATE),
consecutive relative poses (RPE) and all pose pairs (RPE all-all,
deterministically strided above 2000 poses).  Rotation errors use the
geodesic angle, in degrees.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import se_math as sm


@dataclass
class Trajectory:
    """Ordered (index, pose-vector) pairs with strictly increasing indices."""
    poses: list = field(default_factory=list)

    def __post_init__(self):
        idx = [i for i, _ in self.poses]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("trajectory indices must be strictly increasing")

    @property
    def indices(self):
        return [i for i, _ in self.poses]

    @property
    def pose_array(self):
        return np.array([p for _, p in self.poses])

    def __len__(self):
        return len(self.poses)

    @classmethod
    def from_poses(cls, poses, start=0):
        return cls([(start + k, np.asarray(p, float))
                    for k, p in enumerate(poses)])


@dataclass
class ErrorReport:
    """RMSE metrics; translations in meters, rotations in degrees."""
    ate_trans: float
    ate_rot: float
    rpe_trans: float
    rpe_rot: float
    rpe_all_trans: float
    rpe_all_rot: float

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2)

    def rows(self):
        return [("ate_trans_m", self.ate_trans),
                ("ate_rot_deg", self.ate_rot),
                ("rpe_trans_m", self.rpe_trans),
                ("rpe_rot_deg", self.rpe_rot),
                ("rpe_all_trans_m", self.rpe_all_trans),
                ("rpe_all_rot_deg", self.rpe_all_rot)]


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------

def _cumulative_weights(zs):
    norms = [float(np.linalg.norm(z)) for z in zs]
    total = sum(norms)
    m = len(zs)
    if total <= 0.0:
        return [u / m for u in range(m + 1)]
    acc, out = 0.0, [0.0]
    for x in norms:
        acc += x
        out.append(acc / total)
    return out


def reconstruct(compact: Trajectory, odometry, variant="v2") -> Trajectory:
    """Fill every original index between the first and last kept pose.

    ``odometry[k]`` is the measured displacement from stream pose k to
    k+1 (either a vector or a (z, cov) pair; covariances are ignored).
    """
    if variant not in ("v0", "v1", "v2"):
        raise ValueError(f"unknown reconstruction variant {variant!r}")
    if len(compact) == 0:
        return Trajectory([])
    zs_all = [z[0] if isinstance(z, tuple) else z for z in odometry]
    last = compact.indices[-1]
    if len(zs_all) < last:
        raise ValueError("odometry stream shorter than the kept index range")
    out = []
    for (p, A), (q, B) in zip(compact.poses, compact.poses[1:]):
        out.append((p, A))
        m = q - p
        if m == 1:
            continue
        zs = zs_all[p:q]
        if variant == "v0":
            w = [u / m for u in range(m + 1)]
        else:
            w = _cumulative_weights(zs)
        h = sm.relative_displacement(A, B)
        if variant in ("v0", "v1"):
            for u in range(1, m):
                out.append((p + u, sm.compose(A, w[u] * h)))
        else:
            chain = [np.zeros_like(A)]
            for z in zs:
                chain.append(sm.compose(chain[-1], z))
            d = sm.relative_displacement(chain[m], h)
            for u in range(1, m):
                out.append((p + u, sm.compose(A, sm.compose(chain[u],
                                                            w[u] * d))))
    out.append(compact.poses[-1])
    return Trajectory(out)


# ---------------------------------------------------------------------------
# Alignment and metrics
# ---------------------------------------------------------------------------

def _split_pose(pose):
    pose = np.asarray(pose, float)
    T = sm.exp_map(pose)
    if pose.shape[0] == 3:
        return T[:2, 2], T[:2, :2]
    return T[:3, 3], T[:3, :3]


def kabsch_align(est_points, gt_points):
    """Least-squares proper rigid transform: returns (R, t) minimizing
    sum ||R p + t - q||^2 over corresponding rows of est/gt."""
    P = np.asarray(est_points, float)
    Q = np.asarray(gt_points, float)
    if P.shape != Q.shape:
        raise ValueError("point sets differ in shape")
    if P.shape[0] < 3:
        raise ValueError("need at least 3 correspondences")
    pc, qc = P.mean(axis=0), Q.mean(axis=0)
    H = (P - pc).T @ (Q - qc)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise ValueError("degenerate (collinear) point configuration")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.eye(P.shape[1])
    D[-1, -1] = d if d != 0 else 1.0
    R = Vt.T @ D @ U.T
    t = qc - R @ pc
    return R, t


def _rot_angle(Rel):
    if Rel.shape[0] == 2:
        return abs(math.atan2(Rel[1, 0], Rel[0, 0]))
    return float(np.linalg.norm(sm.so3_log(Rel)))


def _rmse(values):
    v = np.asarray(values, float)
    return float(np.sqrt(np.mean(v * v))) if v.size else 0.0


def _pair_errors(ts, Rs, gts, gRs, pairs):
    dtrans, drot = [], []
    for i, j in pairs:
        rel_t = Rs[i].T @ (ts[j] - ts[i])
        rel_R = Rs[i].T @ Rs[j]
        grel_t = gRs[i].T @ (gts[j] - gts[i])
        grel_R = gRs[i].T @ gRs[j]
        dtrans.append(np.linalg.norm(rel_t - grel_t))
        drot.append(_rot_angle(grel_R.T @ rel_R))
    return dtrans, drot


def compute_errors(est: Trajectory, gt: Trajectory,
                   max_pairs_n=2000) -> ErrorReport:
    """ATE / RPE / RPE-all-all RMSE between index-matched trajectories."""
    if est.indices != gt.indices:
        raise ValueError("trajectories must cover identical indices")
    n = len(est)
    ts, Rs = zip(*[_split_pose(p) for _, p in est.poses])
    gts, gRs = zip(*[_split_pose(p) for _, p in gt.poses])
    ts, gts = list(map(np.asarray, ts)), list(map(np.asarray, gts))
    R_al, t_al = kabsch_align(np.array(ts), np.array(gts))
    a_ts = [R_al @ p + t_al for p in ts]
    a_Rs = [R_al @ R for R in Rs]
    ate_t = _rmse([np.linalg.norm(a - g) for a, g in zip(a_ts, gts)])
    ate_r = _rmse([_rot_angle(g.T @ a) for a, g in zip(a_Rs, gRs)])
    cons = [(i, i + 1) for i in range(n - 1)]
    rpe_t, rpe_r = _pair_errors(ts, Rs, gts, gRs, cons)
    stride = max(1, math.ceil(n / max_pairs_n))
    sub = list(range(0, n, stride))
    allp = [(i, j) for ai, i in enumerate(sub) for j in sub[ai + 1:]]
    all_t, all_r = _pair_errors(ts, Rs, gts, gRs, allp)
    deg = 180.0 / math.pi
    return ErrorReport(ate_t, ate_r * deg, _rmse(rpe_t), _rmse(rpe_r) * deg,
                       _rmse(all_t), _rmse(all_r) * deg)


# ---------------------------------------------------------------------------
# Conservativeness comparison
# ---------------------------------------------------------------------------

def conservativeness_report(apal_engine, fpfl_engine, stream):
    """Step two fresh engines through the same stream in lockstep and
    record, per step, the Frobenius norms of:

    * the full-detail engine's covariance over all its poses;
    * the compact engine's covariance over its kept poses;
    * the full-detail covariance marginalized (Schur complement) onto
      the compact engine's kept poses.

    Returns a dict of the three equal-length series plus the kept index
    sets at the final step.
    """
    from .covariance import schur_marginalize

    def _marg_norm(sig, dim):
        n = sig.shape[0] // dim
        return float(sum(np.linalg.norm(sig[k * dim:(k + 1) * dim,
                                            k * dim:(k + 1) * dim])
                         for k in range(n)))

    dim = apal_engine.dim
    out = {k: [] for k in ("full", "compact", "marginalized",
                           "full_marg", "compact_marg",
                           "marginalized_marg")}
    for z, cov in stream:
        apal_engine.step(z, cov)
        fpfl_engine.step(z, cov)
        sig_f = np.linalg.inv(apal_engine.solver.lam.to_dense())
        out["full"].append(float(np.linalg.norm(sig_f)))
        out["full_marg"].append(_marg_norm(sig_f, dim))
        sig_c = np.linalg.inv(fpfl_engine.solver.lam.to_dense())
        out["compact"].append(float(np.linalg.norm(sig_c)))
        out["compact_marg"].append(_marg_norm(sig_c, dim))
        kept = set(fpfl_engine.kept_ids)
        slots = [s for s, idx in enumerate(apal_engine.kept_ids)
                 if idx in kept]
        lam_m, _, _ = schur_marginalize(
            apal_engine.solver.lam.to_dense(),
            np.zeros(sig_f.shape[0]), apal_engine.solver.layout, slots)
        sig_m = np.linalg.inv(lam_m)
        out["marginalized"].append(float(np.linalg.norm(sig_m)))
        out["marginalized_marg"].append(_marg_norm(sig_m, dim))
    out["kept_full"] = list(apal_engine.kept_ids)
    out["kept_compact"] = list(fpfl_engine.kept_ids)
    return out
