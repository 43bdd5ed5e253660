"""IMU error-state propagation and the high-rate pose buffer.

The mean is integrated with RK4 on the strapdown kinematics; the 15x15
state-transition matrix is integrated alongside with the same RK4 stages,
which makes it the (numerically exact) Jacobian of the discrete mean map
and lets finite-difference tests pin it down tightly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Pose,
    quat_normalize,
    quat_to_rot,
    rot_to_quat,
    skew,
    so3_exp_many,
    so3_log,
)
from .state import IMU_DIM, FilterState, StateError, symmetrize

GRAVITY = np.array([0.0, 0.0, -9.81])


class ImuGapWarning(UserWarning):
    """Gap between consecutive IMU samples exceeded twice the nominal period."""


@dataclass
class ImuSample:
    stamp: float
    omega: np.ndarray      # rad/s, body frame
    accel: np.ndarray      # m/s^2, specific force, body frame


@dataclass
class ImuNoise:
    """Continuous-time noise densities plus the gravity vector."""

    gyro_white: float = 1.6968e-04
    gyro_walk: float = 1.9393e-05
    accel_white: float = 2.0000e-03
    accel_walk: float = 3.0000e-03
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        for name in ("gyro_white", "gyro_walk", "accel_white", "accel_walk"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _quat_deriv(q, omega):
    # JPL kinematics: qdot = 0.5 * Omega(omega) q
    v, w = q[:3], q[3]
    return 0.5 * np.concatenate([-np.cross(omega, v) + w * omega, [-omega @ v]])


def _unit(q):
    # magnitude-only normalization: integration must stay on the continuous
    # double cover, a canonical sign flip mid-step corrupts the RK4 stages
    return q / np.linalg.norm(q)


def _f_matrix(q, a_hat, w_hat):
    F = np.zeros((IMU_DIM, IMU_DIM))
    R_GI = quat_to_rot(q).T
    F[0:3, 0:3] = -skew(w_hat)
    F[0:3, 3:6] = -np.eye(3)
    F[6:9, 0:3] = -R_GI @ skew(a_hat)
    F[6:9, 9:12] = -R_GI
    F[12:15, 6:9] = np.eye(3)
    return F


def _rk4_step(q, v, p, bg, ba, w0, a0, w1, a1, dt, gravity):
    """One RK4 step of the mean and the variational equation together.

    Returns (q, v, p, Phi_step) with Phi_step the one-interval transition.
    """

    def deriv(qs, vs, w_m, a_m):
        w_hat = w_m - bg
        a_hat = a_m - ba
        dq = _quat_deriv(qs, w_hat)
        dv = quat_to_rot(qs).T @ a_hat + gravity
        return dq, dv, w_hat, a_hat

    wm = 0.5 * (w0 + w1)
    am = 0.5 * (a0 + a1)

    k1q, k1v, wh1, ah1 = deriv(q, v, w0, a0)
    k1p = v
    q2 = _unit(q + 0.5 * dt * k1q)
    k2q, k2v, wh2, ah2 = deriv(q2, v + 0.5 * dt * k1v, wm, am)
    k2p = v + 0.5 * dt * k1v
    q3 = _unit(q + 0.5 * dt * k2q)
    k3q, k3v, wh3, ah3 = deriv(q3, v + 0.5 * dt * k2v, wm, am)
    k3p = v + 0.5 * dt * k2v
    q4 = _unit(q + dt * k3q)
    k4q, k4v, wh4, ah4 = deriv(q4, v + dt * k3v, w1, a1)
    k4p = v + dt * k3v

    q_out = _unit(q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q))
    v_out = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    p_out = p + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)

    F1 = _f_matrix(q, ah1, wh1)
    F2 = _f_matrix(q2, ah2, wh2)
    F3 = _f_matrix(q3, ah3, wh3)
    F4 = _f_matrix(q4, ah4, wh4)
    I = np.eye(IMU_DIM)
    K1 = F1
    K2 = F2 @ (I + 0.5 * dt * K1)
    K3 = F3 @ (I + 0.5 * dt * K2)
    K4 = F4 @ (I + dt * K3)
    Phi_step = I + dt / 6.0 * (K1 + 2 * K2 + 2 * K3 + K4)
    return q_out, v_out, p_out, Phi_step


def propagate(state: FilterState, samples: list, noise: ImuNoise,
              pose_buffer: "PoseBuffer | None" = None,
              nominal_dt: float | None = None):
    """Propagate the mean/covariance through an IMU sample batch.

    Returns (new_state, Phi) with Phi the accumulated 15x15 transition
    matrix of the IMU error block.  Clone and landmark blocks are carried
    through their cross-covariance only.  samples[0].stamp must equal the
    state time; stamps must be strictly increasing.
    """
    if not samples:
        return state.copy(), np.eye(IMU_DIM)
    if abs(samples[0].stamp - state.time) > 1e-9:
        raise StateError(
            f"sample batch starts at {samples[0].stamp}, state at {state.time}")
    stamps = np.array([s.stamp for s in samples])
    if np.any(np.diff(stamps) <= 0):
        raise StateError("IMU stamps not strictly increasing")
    if nominal_dt is not None and len(samples) > 1:
        if np.max(np.diff(stamps)) > 2.0 * nominal_dt:
            warnings.warn(
                f"IMU gap {np.max(np.diff(stamps)):.4f}s exceeds 2x nominal "
                f"period {nominal_dt:.4f}s", ImuGapWarning)

    out = state.copy()
    q, v, p = out.imu.q, out.imu.v, out.imu.p
    bg, ba = out.imu.bg, out.imu.ba
    Phi = np.eye(IMU_DIM)
    Qacc = np.zeros((IMU_DIM, IMU_DIM))
    GQG = np.zeros((IMU_DIM, IMU_DIM))
    GQG[0:3, 0:3] = noise.gyro_white**2 * np.eye(3)
    GQG[3:6, 3:6] = noise.gyro_walk**2 * np.eye(3)
    GQG[6:9, 6:9] = noise.accel_white**2 * np.eye(3)
    GQG[9:12, 9:12] = noise.accel_walk**2 * np.eye(3)

    if pose_buffer is not None:
        pose_buffer.append(Pose(q=q.copy(), p=p.copy(), stamp=float(stamps[0])))
    for k in range(len(samples) - 1):
        dt = stamps[k + 1] - stamps[k]
        q, v, p, Phi_step = _rk4_step(
            q, v, p, bg, ba,
            samples[k].omega, samples[k].accel,
            samples[k + 1].omega, samples[k + 1].accel, dt, noise.gravity)
        # trapezoidal discretization of the continuous white-noise covariance
        Q_step = 0.5 * dt * (Phi_step @ GQG @ Phi_step.T + GQG)
        Qacc = Phi_step @ Qacc @ Phi_step.T + Q_step
        Phi = Phi_step @ Phi
        if pose_buffer is not None:
            pose_buffer.append(Pose(q=q.copy(), p=p.copy(), stamp=float(stamps[k + 1])))

    out.imu.q, out.imu.v, out.imu.p = q, v, p
    out.time = float(stamps[-1])

    P = out.cov
    P[:IMU_DIM, :IMU_DIM] = Phi @ P[:IMU_DIM, :IMU_DIM] @ Phi.T + Qacc
    P[:IMU_DIM, IMU_DIM:] = Phi @ P[:IMU_DIM, IMU_DIM:]
    P[IMU_DIM:, :IMU_DIM] = P[:IMU_DIM, IMU_DIM:].T
    out.cov = symmetrize(P)
    return out, Phi


@dataclass
class PoseBuffer:
    """Ring buffer of propagated IMU poses for deskewing queries.

    Single writer (the propagation loop); queries are pure.  Old entries
    are trimmed so the span stays near max_span seconds but always covers
    at least one LiDAR sweep.
    """

    max_span: float = 3.0
    stamps: list = field(default_factory=list)
    quats: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    _cache: dict = field(default_factory=dict)

    def append(self, pose: Pose) -> None:
        if self.stamps and pose.stamp <= self.stamps[-1] + 1e-12:
            if abs(pose.stamp - self.stamps[-1]) < 1e-12:
                return   # idempotent re-append at batch boundaries
            raise StateError("pose buffer stamps must increase")
        self.stamps.append(float(pose.stamp))
        self.quats.append(pose.q.copy())
        self.positions.append(pose.p.copy())
        while self.stamps and self.stamps[-1] - self.stamps[0] > self.max_span:
            self.stamps.pop(0)
            self.quats.pop(0)
            self.positions.pop(0)
        self._cache.clear()

    def span(self):
        if not self.stamps:
            return None
        return self.stamps[0], self.stamps[-1]

    def query(self, t: float) -> Pose:
        R, p = self.query_many(np.array([t]))
        return Pose(q=rot_to_quat(R[0]), p=p[0], stamp=float(t))

    def query_many(self, ts: np.ndarray):
        """Interpolated poses at each query time: (N,3,3) rotations global->IMU
        and (N,3) positions."""
        ts = np.asarray(ts, dtype=float)
        if not self.stamps:
            raise StateError("pose buffer empty")
        s = np.asarray(self.stamps)
        if ts.min() < s[0] - 1e-9 or ts.max() > s[-1] + 1e-9:
            raise StateError(
                f"query range [{ts.min()}, {ts.max()}] outside buffer span "
                f"[{s[0]}, {s[-1]}]")
        ts = np.clip(ts, s[0], s[-1])
        hi = np.clip(np.searchsorted(s, ts, side="right"), 1, len(s) - 1)
        lo = hi - 1
        lam = (ts - s[lo]) / (s[hi] - s[lo])

        if "R" not in self._cache:
            Rs = np.stack([quat_to_rot(q) for q in self.quats])
            rel = np.stack([
                so3_log(Rs[i].T @ Rs[i + 1]) for i in range(len(s) - 1)
            ]) if len(s) > 1 else np.zeros((0, 3))
            self._cache["R"] = Rs
            self._cache["rel"] = rel
            self._cache["P"] = np.asarray(self.positions)
        Rs = self._cache["R"]
        rel = self._cache["rel"]
        P = self._cache["P"]
        Rq = Rs[lo] @ so3_exp_many(lam[:, None] * rel[lo])
        pq = (1.0 - lam)[:, None] * P[lo] + lam[:, None] * P[hi]
        return Rq, pq
