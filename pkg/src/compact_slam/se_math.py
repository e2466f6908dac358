"""Lie-group pose math for SE(2) and SE(3).

Poses are stored as tangent-space vectors (twists):

* SE(2): ``[rho_x, rho_y, phi]`` with ``phi`` wrapped into (-pi, pi].
* SE(3): ``[rho_x, rho_y, rho_z, r_x, r_y, r_z]`` where ``r`` is the
  axis-angle rotation vector with ``|r| <= pi``.

``exp_map`` is the true group exponential (matching the matrix exponential
of the hatted twist), ``log_map`` its inverse.  All operations are pure
functions over numpy arrays; the dimensionality of the input selects the
group (3 -> SE(2), 6 -> SE(3)).

Numerical policy: trigonometric ratios switch to Taylor expansions below
SMALL_ANGLE; the SO(3) logarithm near pi uses the symmetric-part method
with a deterministic axis sign (largest-magnitude component positive).
"""

from __future__ import annotations

import numpy as np

SMALL_ANGLE = 1e-6

_J2 = np.array([[0.0, -1.0], [1.0, 0.0]])


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = (a + np.pi) % (2.0 * np.pi) - np.pi
    if a <= -np.pi:
        a += 2.0 * np.pi
    return a


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


# ---------------------------------------------------------------------------
# SO(3)
# ---------------------------------------------------------------------------

def so3_exp(r):
    """Rodrigues formula: rotation vector -> rotation matrix."""
    r = np.asarray(r, dtype=float)
    th = np.linalg.norm(r)
    X = skew(r)
    if th < SMALL_ANGLE:
        # sin(th)/th ~ 1 - th^2/6, (1-cos th)/th^2 ~ 1/2 - th^2/24
        a = 1.0 - th * th / 6.0
        b = 0.5 - th * th / 24.0
    else:
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / (th * th)
    return np.eye(3) + a * X + b * (X @ X)


def so3_log(R):
    """Rotation matrix -> rotation vector with norm in [0, pi].

    Near pi the axis is extracted from the symmetric part; the sign of the
    axis is fixed so that its largest-magnitude component is positive.
    """
    R = np.asarray(R, dtype=float)
    tr = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    sin_th = np.linalg.norm(s)
    th = np.arctan2(sin_th, tr)
    if th < SMALL_ANGLE:
        return s * (1.0 + th * th / 6.0)
    if th < np.pi - 1e-4:
        return s * (th / sin_th)
    # Near pi: R + I ~ 2 (I + K^2) = 2 u u^T ... extract axis from diagonal.
    th = min(th, np.pi)
    B = (R + np.eye(3)) / 2.0
    u = np.sqrt(np.maximum(np.diag(B), 0.0))
    k = int(np.argmax(u))
    # Fix relative signs from the off-diagonal products u_i u_j.
    for i in range(3):
        if i != k and B[k, i] < 0.0:
            u[i] = -u[i]
    nrm = np.linalg.norm(u)
    if nrm == 0.0:
        return np.zeros(3)
    u = u / nrm
    if u[int(np.argmax(np.abs(u)))] < 0.0:
        u = -u
    return u * th


def so3_left_jacobian(r):
    r = np.asarray(r, dtype=float)
    th = np.linalg.norm(r)
    X = skew(r)
    if th < SMALL_ANGLE:
        b = 0.5 - th * th / 24.0
        c = 1.0 / 6.0 - th * th / 120.0
    else:
        b = (1.0 - np.cos(th)) / (th * th)
        c = (th - np.sin(th)) / (th ** 3)
    return np.eye(3) + b * X + c * (X @ X)


def so3_left_jacobian_inv(r):
    r = np.asarray(r, dtype=float)
    th = np.linalg.norm(r)
    X = skew(r)
    if th < SMALL_ANGLE:
        c = 1.0 / 12.0 + th * th / 720.0
    else:
        c = 1.0 / (th * th) - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th))
    return np.eye(3) - 0.5 * X + c * (X @ X)


def _se3_Q(rho, phi):
    """Coupling block of the SE(3) left Jacobian (Barfoot-style closed form)."""
    th = np.linalg.norm(phi)
    px = skew(rho)
    qx = skew(phi)
    if th < SMALL_ANGLE:
        c1 = 1.0 / 6.0 - th * th / 120.0
        c2 = -(1.0 / 24.0 - th * th / 720.0)
        c4 = 1.0 / 120.0 - th * th / 5040.0
    else:
        c1 = (th - np.sin(th)) / th ** 3
        c2 = (1.0 - th * th / 2.0 - np.cos(th)) / th ** 4
        c4 = (th - np.sin(th) - th ** 3 / 6.0) / th ** 5
    c3 = 0.5 * (c2 - 3.0 * c4)
    qp = qx @ px
    pq = px @ qx
    qpq = qx @ pq
    return (0.5 * px
            + c1 * (qp + pq + qpq)
            - c2 * (qx @ qp + pq @ qx - 3.0 * qpq)
            - c3 * (qpq @ qx + qx @ qpq))


# ---------------------------------------------------------------------------
# Group exp / log
# ---------------------------------------------------------------------------

def exp_map(p):
    """Tangent vector -> homogeneous rigid transform (3x3 or 4x4)."""
    p = np.asarray(p, dtype=float)
    if p.shape[0] == 3:
        rho, phi = p[:2], p[2]
        T = np.eye(3)
        T[:2, :2] = np.array([[np.cos(phi), -np.sin(phi)],
                              [np.sin(phi), np.cos(phi)]])
        T[:2, 2] = _se2_V(phi) @ rho
        return T
    rho, r = p[:3], p[3:]
    T = np.eye(4)
    T[:3, :3] = so3_exp(r)
    T[:3, 3] = so3_left_jacobian(r) @ rho
    return T


def _se2_V(phi):
    if abs(phi) < SMALL_ANGLE:
        a = 1.0 - phi * phi / 6.0
        b = phi / 2.0 - phi ** 3 / 24.0
    else:
        a = np.sin(phi) / phi
        b = (1.0 - np.cos(phi)) / phi
    return np.array([[a, -b], [b, a]])


def log_map(T):
    """Homogeneous rigid transform -> tangent vector."""
    T = np.asarray(T, dtype=float)
    if T.shape[0] == 3:
        phi = wrap_angle(np.arctan2(T[1, 0], T[0, 0]))
        rho = np.linalg.solve(_se2_V(phi), T[:2, 2])
        return np.array([rho[0], rho[1], phi])
    r = so3_log(T[:3, :3])
    rho = np.linalg.solve(so3_left_jacobian(r), T[:3, 3])
    return np.concatenate([rho, r])


def normalize(p):
    """Re-wrap the rotation part of a pose vector into the canonical range."""
    p = np.asarray(p, dtype=float).copy()
    if p.shape[0] == 3:
        p[2] = wrap_angle(p[2])
        return p
    th = np.linalg.norm(p[3:])
    if th > np.pi:
        return log_map(exp_map(p))
    return p


def transform_inverse(T):
    T = np.asarray(T, dtype=float)
    d = T.shape[0] - 1
    Ti = np.eye(d + 1)
    Ti[:d, :d] = T[:d, :d].T
    Ti[:d, d] = -T[:d, :d].T @ T[:d, d]
    return Ti


def inverse(p):
    """Tangent vector of the inverse transform (= -p for the true exp)."""
    return -np.asarray(p, dtype=float)


def compose(p, q):
    """p (+) q = log(exp(p) exp(q))."""
    return log_map(exp_map(p) @ exp_map(q))


def inverse_compose(p, q):
    """p (-) q = log(P Q^-1)."""
    return log_map(exp_map(p) @ transform_inverse(exp_map(q)))


def relative_displacement(mu_i, mu_n):
    """Displacement of mu_n expressed in the frame of mu_i: log(P_i^-1 P_n)."""
    return log_map(transform_inverse(exp_map(mu_i)) @ exp_map(mu_n))


# ---------------------------------------------------------------------------
# Adjoints and group Jacobians
# ---------------------------------------------------------------------------

def adjoint(T):
    """Adjoint of a transform matrix (6x6 for SE(3), 3x3 for SE(2))."""
    T = np.asarray(T, dtype=float)
    if T.shape[0] == 3:
        A = np.eye(3)
        A[:2, :2] = T[:2, :2]
        A[:2, 2] = -_J2 @ T[:2, 2]
        return A
    A = np.zeros((6, 6))
    R = T[:3, :3]
    A[:3, :3] = R
    A[3:, 3:] = R
    A[:3, 3:] = skew(T[:3, 3]) @ R
    return A


def left_jacobian(p):
    """Left Jacobian of the group exponential at tangent vector p."""
    p = np.asarray(p, dtype=float)
    if p.shape[0] == 3:
        rho, phi = p[:2], p[2]
        J = np.eye(3)
        V = _se2_V(phi)
        J[:2, :2] = V
        if abs(phi) < SMALL_ANGLE:
            a = -phi / 6.0 + phi ** 3 / 120.0   # (sin(phi) - phi) / phi^2
            b = 0.5 - phi * phi / 24.0          # (1 - cos(phi)) / phi^2
        else:
            a = (np.sin(phi) - phi) / (phi * phi)
            b = (1.0 - np.cos(phi)) / (phi * phi)
        J[:2, 2] = -(a * np.eye(2) + b * _J2) @ rho
        return J
    rho, r = p[:3], p[3:]
    J = np.zeros((6, 6))
    J3 = so3_left_jacobian(r)
    J[:3, :3] = J3
    J[3:, 3:] = J3
    J[:3, 3:] = _se3_Q(rho, r)
    return J


def right_jacobian(p):
    return left_jacobian(-np.asarray(p, dtype=float))


def right_jacobian_inv(p):
    p = np.asarray(p, dtype=float)
    if p.shape[0] == 3:
        return np.linalg.inv(right_jacobian(p))
    rho, r = -p[:3], -p[3:]
    J3i = so3_left_jacobian_inv(r)
    Q = _se3_Q(rho, r)
    Ji = np.zeros((6, 6))
    Ji[:3, :3] = J3i
    Ji[3:, 3:] = J3i
    Ji[:3, 3:] = -J3i @ Q @ J3i
    return Ji


def compose_jacobians(p, q):
    """Jacobians of compose(p, q) w.r.t. both tangent-vector arguments."""
    c = compose(p, q)
    Jci = right_jacobian_inv(c)
    Jp = Jci @ adjoint(transform_inverse(exp_map(q))) @ right_jacobian(p)
    Jq = Jci @ right_jacobian(q)
    return Jp, Jq


def displacement_jacobians(mu_i, mu_n):
    """Jacobians of relative_displacement(mu_i, mu_n) w.r.t. both arguments."""
    d = relative_displacement(mu_i, mu_n)
    Jdi = right_jacobian_inv(d)
    J_n = Jdi @ right_jacobian(mu_n)
    J_i = -Jdi @ adjoint(transform_inverse(exp_map(d))) @ right_jacobian(mu_i)
    return J_i, J_n


def compose_jacobians_local(p, q):
    """Jacobians of compose(p, q) under right-perturbations.

    Perturbing either argument by exp(delta) on the right perturbs the
    composed transform by exp(eps) on the right with eps = J delta; this
    returns (J_p, J_q) = (Adj(Q^-1), I).  These are Jacobians between
    group perturbations, the convention in which all covariances in this
    package are expressed.
    """
    n = np.asarray(p, dtype=float).shape[0]
    Jp = adjoint(transform_inverse(exp_map(q)))
    return Jp, np.eye(n)


def displacement_jacobians_local(mu_i, mu_n):
    """Right-perturbation Jacobians of the displacement transform.

    A right-perturbation delta of either endpoint pose maps to a
    right-perturbation eps = J delta of exp(relative_displacement):
    (J_i, J_n) = (-Adj(D^-1), I).
    """
    n = np.asarray(mu_i, dtype=float).shape[0]
    d = relative_displacement(mu_i, mu_n)
    J_i = -adjoint(transform_inverse(exp_map(d)))
    return J_i, np.eye(n)


def reverse_measurement(z, cov):
    """Measurement of the opposite direction: negated tangent vector with
    the covariance transported by the adjoint of the original transform."""
    A = adjoint(exp_map(np.asarray(z, float)))
    return -np.asarray(z, float), A @ np.asarray(cov, float) @ A.T


def concatenate_measurement(m1, m2):
    """Compose two (pose, covariance) measurements.

    The mean composes on the group; the covariance (over right group
    perturbations) is propagated to first order: noise of the first
    measurement is carried through the second transform's adjoint.
    """
    p1, S1 = m1
    p2, S2 = m2
    mean = normalize(compose(p1, p2))
    J1, J2 = compose_jacobians_local(p1, p2)
    S = J1 @ np.asarray(S1, dtype=float) @ J1.T + J2 @ np.asarray(S2, dtype=float) @ J2.T
    return mean, 0.5 * (S + S.T)


def check_pose_cov(S, tol_factor=1e-10):
    """Validate symmetry and positive semidefiniteness of a pose covariance."""
    S = np.asarray(S, dtype=float)
    if not np.allclose(S, S.T, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise ValueError("covariance not symmetric")
    w = np.linalg.eigvalsh(0.5 * (S + S.T))
    if w.min() < -tol_factor * max(np.trace(S), 1e-300):
        raise ValueError("covariance not positive semidefinite")
    return S
