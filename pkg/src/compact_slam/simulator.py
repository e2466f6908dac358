"""Trajectory simulator for the elliptical dataset family.

Two shapes are provided:

* ``ellipse3d``: one full pass around an ellipse with semi-axes 10 m and
  6 m followed by a partial pass around a concentric ellipse with
  semi-axes 20 m and 6 m, sampled at 170 poses equally spaced in arc
  length over 72.29 m in total;
* ``ellipsen``: N passes around an ellipse with semi-axes 20 m and 6 m.

Poses are planar SE(3) states with the x-axis along the travel
direction.  Odometry and loop measurements perturb the true relative
pose by right-perturbation Gaussian noise whose per-component standard
deviation is a fraction of the component magnitude, floored to keep the
information matrices positive definite.  The loop oracle lists every
pose pair (index gap >= 2) whose true poses are within ``sensor_range``
meters and ``sensor_rot_range`` radians.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from . import se_math as sm


@dataclass
class SimSpec:
    shape: str = "ellipse3d"          # ellipse3d | ellipsen
    semi_axes: tuple = (20.0, 6.0)    # used by ellipsen
    n_loops: int = 10
    poses_per_loop: int = 20
    loop_phase_drift: float = 0.3   # meters of arc slip per completed loop
    trans_noise_frac: float = 0.05
    rot_noise_frac: float = 0.05
    noise_floor: float = 1e-3
    # absolute registration (loop measurement) noise; None falls back to
    # the fractional odometry model
    loop_noise_trans: float | None = None
    loop_noise_rot: float | None = None
    sensor_range: float = 3.0
    sensor_rot_range: float = 0.2
    # fraction of the ellipse arc (from the start point) where loop
    # registration is available; models a landmark-rich gateway region
    oracle_arc_fraction: float = 1.0
    seed: int = 0

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if "semi_axes" in d:
            d["semi_axes"] = tuple(d["semi_axes"])
        return cls(**d)


@dataclass
class SimResult:
    spec: SimSpec
    ground_truth: list          # pose vectors (6-dim)
    odometry: list              # (z, cov) per step, length n-1
    oracle_table: dict          # (i, j) i<j -> (z, cov)
    path_length: float


# ---------------------------------------------------------------------------
# Ellipse geometry
# ---------------------------------------------------------------------------

def _ellipse_point(a, b, t):
    return np.array([a * math.cos(t), b * math.sin(t), 0.0])


def _ellipse_speed(a, b, t):
    return math.hypot(a * math.sin(t), b * math.cos(t))


def ellipse_perimeter(a, b):
    val, _ = integrate.quad(lambda t: _ellipse_speed(a, b, t), 0.0,
                            2.0 * math.pi, limit=200)
    return val


def _param_at_arclength(a, b, t0, s):
    """Parameter t with arc length s measured from t0 (s >= 0)."""
    def arc(t):
        val, _ = integrate.quad(lambda u: _ellipse_speed(a, b, u), t0, t,
                                limit=200)
        return val - s
    hi = t0 + 1e-6
    while arc(hi) < 0:
        hi += 1.0
    return optimize.brentq(arc, t0, hi, xtol=1e-12)


def _pose_on_ellipse(a, b, t):
    """SE(3) pose vector at ellipse parameter t, x-axis along the tangent."""
    p = _ellipse_point(a, b, t)
    tangent = np.array([-a * math.sin(t), b * math.cos(t), 0.0])
    tangent /= np.linalg.norm(tangent)
    z = np.array([0.0, 0.0, 1.0])
    y = np.cross(z, tangent)
    T = np.eye(4)
    T[:3, 0] = tangent
    T[:3, 1] = y
    T[:3, 2] = z
    T[:3, 3] = p
    return sm.log_map(T)


def _ground_truth(spec: SimSpec):
    if spec.shape == "ellipse3d":
        a1, b1 = 10.0, 6.0
        a2, b2 = 20.0, 6.0
        L1 = ellipse_perimeter(a1, b1)
        total = 72.29
        n = 170
        spacing = total / (n - 1)
        poses = []
        # start at the top co-vertex (0, 6), shared by both ellipses
        for k in range(n):
            s = k * spacing
            if s <= L1:
                t = _param_at_arclength(a1, b1, math.pi / 2.0, s)
                poses.append(_pose_on_ellipse(a1, b1, t))
            else:
                t = _param_at_arclength(a2, b2, math.pi / 2.0, s - L1)
                poses.append(_pose_on_ellipse(a2, b2, t))
        return poses, total, None
    if spec.shape == "ellipsen":
        a, b = spec.semi_axes
        L = ellipse_perimeter(a, b)
        # a slight spacing surplus makes each pass slip forward along the
        # curve, so revisit distances spread over (0, sensor_range]
        spacing = L / spec.poses_per_loop \
            + spec.loop_phase_drift / spec.poses_per_loop
        n = spec.n_loops * spec.poses_per_loop + 1
        poses = []
        arcs = []
        cache = {}
        for k in range(n):
            s = math.fmod(k * spacing, L)
            arcs.append(s / L)
            if s not in cache:
                t = _param_at_arclength(a, b, math.pi / 2.0, s)
                cache[s] = _pose_on_ellipse(a, b, t)
            poses.append(cache[s])
        return poses, n * spacing - spacing, arcs
    raise ValueError(f"unknown shape {spec.shape!r}")


# ---------------------------------------------------------------------------
# Noise model and measurement synthesis
# ---------------------------------------------------------------------------

def _noise_sigmas(z_true, spec: SimSpec):
    """(drawn sigma, claimed sigma) per component.  The claimed sigma is
    floored to keep the information matrix positive definite; the drawn
    sigma is not, so zero noise fractions yield exact measurements."""
    z = np.asarray(z_true, dtype=float)
    draw = np.empty_like(z)
    draw[:3] = spec.trans_noise_frac * np.abs(z[:3])
    draw[3:] = spec.rot_noise_frac * np.abs(z[3:])
    return draw, np.maximum(draw, spec.noise_floor)


def _noise_cov(z_true, spec: SimSpec):
    _, claim = _noise_sigmas(z_true, spec)
    return np.diag(claim ** 2)


def _loop_noise_sigmas(z_true, spec: SimSpec):
    if spec.loop_noise_trans is None:
        return _noise_sigmas(z_true, spec)
    rot = spec.loop_noise_rot if spec.loop_noise_rot is not None \
        else spec.loop_noise_trans
    sig = np.array([spec.loop_noise_trans] * 3 + [rot] * 3)
    return sig, sig


def _noisy_measurement(z_true, spec, rng, sigmas=None):
    draw, claim = sigmas if sigmas is not None \
        else _noise_sigmas(z_true, spec)
    eps = rng.normal(size=z_true.shape[0]) * draw
    return sm.compose(z_true, eps), np.diag(claim ** 2)


def _rotation_angle_between(p, q):
    Rrel = sm.so3_exp(np.asarray(p)[3:]).T @ sm.so3_exp(np.asarray(q)[3:])
    return float(np.linalg.norm(sm.so3_log(Rrel)))


def simulate(spec: SimSpec) -> SimResult:
    """Deterministic synthesis of ground truth, odometry and loop oracle."""
    rng = np.random.default_rng(spec.seed)
    gt, length, arcs = _ground_truth(spec)
    n = len(gt)
    odometry = []
    for k in range(1, n):
        z_true = sm.relative_displacement(gt[k - 1], gt[k])
        odometry.append(_noisy_measurement(z_true, spec, rng))
    positions = np.array([sm.exp_map(p)[:3, 3] for p in gt])
    oracle = {}
    frac = spec.oracle_arc_fraction
    for i in range(n):
        for j in range(i + 2, n):
            if frac < 1.0 and arcs is not None \
                    and (arcs[i] > frac or arcs[j] > frac):
                continue
            if np.linalg.norm(positions[j] - positions[i]) > spec.sensor_range:
                continue
            if _rotation_angle_between(gt[i], gt[j]) > spec.sensor_rot_range:
                continue
            z_true = sm.relative_displacement(gt[i], gt[j])
            oracle[(i, j)] = _noisy_measurement(
                z_true, spec, rng, sigmas=_loop_noise_sigmas(z_true, spec))
    return SimResult(spec, gt, odometry, oracle, length)
