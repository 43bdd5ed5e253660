"""Quaternion / SO(3) algebra and pose interpolation.

Conventions used throughout the package:

* Quaternions are length-4 numpy arrays ``[x, y, z, w]`` (vector part first,
  scalar last, JPL style).  ``quat_to_rot(q_AB)`` returns the frame-rotation
  matrix mapping {B}-coordinates to {A}-coordinates, so for the IMU attitude
  ``q_IG`` the matrix maps global vectors into the IMU frame.
* The attitude error is multiplicative and applied on the left:
  ``q_true = small(dtheta) * q_est``, equivalently
  ``R_true = so3_exp(-dtheta) @ R_est``.
* ``so3_exp`` is the plain Rodrigues exponential (active rotation); the
  minus sign above is a consequence of the frame-rotation reading of
  ``quat_to_rot``.

Everything here is a pure function over immutable values; results never
alias their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUAT_IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])

_SMALL_ANGLE = 1e-7


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        return QUAT_IDENTITY.copy()
    q = q / n
    # canonical sign keeps round-trips deterministic
    if q[3] < 0.0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """JPL product: quat_to_rot(a*b) == quat_to_rot(a) @ quat_to_rot(b)."""
    a = quat_normalize(a)
    b = quat_normalize(b)
    av, aw = a[:3], a[3]
    bv, bw = b[:3], b[3]
    # note the minus cross term (JPL handedness)
    v = aw * bv + bw * av - np.cross(av, bv)
    w = aw * bw - av @ bv
    return quat_normalize(np.append(v, w))


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Frame-rotation matrix of q (maps "from" frame coords to "to" frame)."""
    q = quat_normalize(q)
    v, w = q[:3], q[3]
    return (2.0 * w * w - 1.0) * np.eye(3) - 2.0 * w * skew(v) + 2.0 * np.outer(v, v)


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of quat_to_rot (canonical sign, w >= 0)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    # Shepperd's method on the JPL map
    cand = np.array([R[0, 0], R[1, 1], R[2, 2], tr])
    i = int(np.argmax(cand))
    q = np.empty(4)
    if i == 3:
        q[3] = 0.5 * np.sqrt(1.0 + tr)
        q[0] = (R[1, 2] - R[2, 1]) / (4.0 * q[3])
        q[1] = (R[2, 0] - R[0, 2]) / (4.0 * q[3])
        q[2] = (R[0, 1] - R[1, 0]) / (4.0 * q[3])
    else:
        j, k = (i + 1) % 3, (i + 2) % 3
        q[i] = 0.5 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q[3] = (R[j, k] - R[k, j]) / (4.0 * q[i])
        q[j] = (R[i, j] + R[j, i]) / (4.0 * q[i])
        q[k] = (R[i, k] + R[k, i]) / (4.0 * q[i])
    return quat_normalize(q)


def quat_from_small_angle(dtheta: np.ndarray) -> np.ndarray:
    """Exact unit quaternion for the error vector dtheta.

    quat_to_rot of the result equals so3_exp(-dtheta).
    """
    dtheta = np.asarray(dtheta, dtype=float)
    ang = np.linalg.norm(dtheta)
    if ang < _SMALL_ANGLE:
        v = 0.5 * dtheta
        return quat_normalize(np.append(v, 1.0))
    v = np.sin(0.5 * ang) * (dtheta / ang)
    return np.append(v, np.cos(0.5 * ang))


def quat_boxplus(q: np.ndarray, dtheta: np.ndarray) -> np.ndarray:
    """Retract the attitude error dtheta onto q (left multiplicative)."""
    return quat_multiply(quat_from_small_angle(dtheta), q)


def quat_boxminus(q: np.ndarray, q_ref: np.ndarray) -> np.ndarray:
    """Error vector such that quat_boxplus(q_ref, dtheta) == q."""
    dq = quat_multiply(q, quat_conjugate(q_ref))
    v, w = dq[:3], dq[3]
    nv = np.linalg.norm(v)
    if nv < 1e-12:
        return 2.0 * v
    ang = 2.0 * np.arctan2(nv, w)
    return (ang / nv) * v


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues exponential with Taylor fallback below 1e-7 rad."""
    phi = np.asarray(phi, dtype=float)
    ang = np.linalg.norm(phi)
    K = skew(phi)
    if ang < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(ang) / ang
    b = (1.0 - np.cos(ang)) / (ang * ang)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Inverse of so3_exp on [0, pi].

    For a rotation by exactly pi the axis sign is ambiguous; the branch
    taken here picks the axis whose largest-magnitude component is
    positive, which keeps tests deterministic.
    """
    R = np.asarray(R, dtype=float)
    c = 0.5 * (np.trace(R) - 1.0)
    c = min(1.0, max(-1.0, c))
    ang = np.arccos(c)
    if ang < _SMALL_ANGLE:
        # first-order: R ~ I + skew(phi)
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - ang < 1e-6:
        # near pi: axis from the symmetric part
        S = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(S), 0.0))
        k = int(np.argmax(axis))
        if axis[k] < 1e-12:
            return np.array([np.pi, 0.0, 0.0])
        # fix relative signs from the off-diagonal terms
        axis[(k + 1) % 3] = np.copysign(axis[(k + 1) % 3], S[k, (k + 1) % 3])
        axis[(k + 2) % 3] = np.copysign(axis[(k + 2) % 3], S[k, (k + 2) % 3])
        axis /= np.linalg.norm(axis)
        return ang * axis
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return (0.5 * ang / np.sin(ang)) * v


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """Integral of so3_exp along the geodesic; used for closed-form helices."""
    phi = np.asarray(phi, dtype=float)
    ang = np.linalg.norm(phi)
    K = skew(phi)
    if ang < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a = (1.0 - np.cos(ang)) / (ang * ang)
    b = (ang - np.sin(ang)) / (ang ** 3)
    return np.eye(3) + a * K + b * (K @ K)


def rot_interpolate(R0: np.ndarray, R1: np.ndarray, lam: float) -> np.ndarray:
    """Geodesic interpolation R0 @ exp(lam * log(R0^T R1))."""
    return R0 @ so3_exp(lam * so3_log(R0.T @ R1))


# ---------------------------------------------------------------------------
# batched variants (deskewing touches every LiDAR point)

def so3_exp_many(phi: np.ndarray) -> np.ndarray:
    """Rodrigues on an (N,3) stack of rotation vectors -> (N,3,3)."""
    phi = np.asarray(phi, dtype=float)
    n = phi.shape[0]
    ang = np.linalg.norm(phi, axis=1)
    K = np.zeros((n, 3, 3))
    K[:, 0, 1] = -phi[:, 2]
    K[:, 0, 2] = phi[:, 1]
    K[:, 1, 0] = phi[:, 2]
    K[:, 1, 2] = -phi[:, 0]
    K[:, 2, 0] = -phi[:, 1]
    K[:, 2, 1] = phi[:, 0]
    small = ang < _SMALL_ANGLE
    a = np.empty(n)
    b = np.empty(n)
    a[small] = 1.0
    b[small] = 0.5
    ns = ~small
    a[ns] = np.sin(ang[ns]) / ang[ns]
    b[ns] = (1.0 - np.cos(ang[ns])) / (ang[ns] ** 2)
    KK = K @ K
    return np.eye(3)[None, :, :] + a[:, None, None] * K + b[:, None, None] * KK


@dataclass(frozen=True)
class Pose:
    """Stamped pose: q is the frame rotation global->local, p the position
    of the local origin in the global frame."""

    q: np.ndarray
    p: np.ndarray
    stamp: float

    def rot(self) -> np.ndarray:
        return quat_to_rot(self.q)


def pose_interpolate(p0: Pose, p1: Pose, t: float) -> Pose:
    """SO(3)-geodesic orientation, linear position, between two stamped poses.

    Raises ValueError outside [p0.stamp, p1.stamp]; extrapolation is never
    what the deskewing caller wants.
    """
    if not (p0.stamp <= t <= p1.stamp):
        raise ValueError(f"interpolation time {t} outside [{p0.stamp}, {p1.stamp}]")
    if p0.stamp == p1.stamp:
        raise ValueError("pose_interpolate needs distinct stamps")
    lam = (t - p0.stamp) / (p1.stamp - p0.stamp)
    R = rot_interpolate(quat_to_rot(p0.q), quat_to_rot(p1.q), lam)
    p = (1.0 - lam) * p0.p + lam * p1.p
    return Pose(q=rot_to_quat(R), p=p, stamp=t)
