"""Filter state vector and covariance bookkeeping.

Error-state ordering (must stay in sync with every Jacobian in the
package):

    [ imu(15) | cam calib(7) | lidar calib(7) | cam clones(6 each)
      | lidar clones(6 each) | point landmarks(3 each) | planes(3 each) ]

with imu = (dtheta, bg, v, ba, p) and each calib block = (dtheta, p, td).
Clones are kept sorted by stamp; landmark blocks follow insertion order.

Plane landmarks use the closest-point parameterization (normal times
distance) expressed in the LiDAR frame of their anchor clone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import quat_boxplus, quat_normalize, quat_to_rot, skew

CAM = "cam"
LID = "lid"

IMU_DIM = 15
CALIB_DIM = 7
CLONE_DIM = 6

# closest-point singularity guard: planes through the anchor origin are
# unrepresentable, so reject anything closer than this
D_MIN = 0.1

SLAM_PLANE_ANGLE_DEG = 10.0
SLAM_PLANE_BUDGET = 8


class StateError(Exception):
    """Violated precondition on a state operation."""


@dataclass
class ImuCoreState:
    q: np.ndarray                    # q_IG, global -> IMU
    bg: np.ndarray
    v: np.ndarray                    # G_v_I
    ba: np.ndarray
    p: np.ndarray                    # G_p_I

    def copy(self) -> "ImuCoreState":
        return ImuCoreState(self.q.copy(), self.bg.copy(), self.v.copy(),
                            self.ba.copy(), self.p.copy())


@dataclass
class CalibState:
    q: np.ndarray                    # q_SI, IMU -> sensor
    p: np.ndarray                    # S_p_I, IMU origin in sensor frame
    td: float                        # sensor stamp + td = IMU-clock time

    def copy(self) -> "CalibState":
        return CalibState(self.q.copy(), self.p.copy(), float(self.td))


@dataclass
class CloneState:
    clone_id: int
    stamp: float                     # IMU-clock event time
    q: np.ndarray                    # q_IG at stamp
    p: np.ndarray                    # G_p_I at stamp
    omega: np.ndarray                # bias-corrected body rate at stamp
    vel: np.ndarray                  # G_v_I at stamp

    def copy(self) -> "CloneState":
        return CloneState(self.clone_id, self.stamp, self.q.copy(),
                          self.p.copy(), self.omega.copy(), self.vel.copy())


@dataclass
class PlaneLandmark:
    cp: np.ndarray                   # closest point, anchor LiDAR frame
    anchor_id: int                   # LiDAR clone id

    def copy(self) -> "PlaneLandmark":
        return PlaneLandmark(self.cp.copy(), self.anchor_id)


@dataclass
class FilterState:
    imu: ImuCoreState
    calib_cam: CalibState
    calib_lid: CalibState
    cam_clones: list = field(default_factory=list)
    lid_clones: list = field(default_factory=list)
    points: dict = field(default_factory=dict)      # feat id -> G_p_f
    planes: dict = field(default_factory=dict)      # plane id -> PlaneLandmark
    cov: np.ndarray = None
    time: float = 0.0
    max_cam_clones: int = 11
    max_lid_clones: int = 8
    _next_clone_id: int = 0

    # ----------------------------------------------------------- layout
    def dim(self) -> int:
        return (IMU_DIM + 2 * CALIB_DIM
                + CLONE_DIM * (len(self.cam_clones) + len(self.lid_clones))
                + 3 * len(self.points) + 3 * len(self.planes))

    def calib_slice(self, which: str) -> slice:
        base = IMU_DIM if which == CAM else IMU_DIM + CALIB_DIM
        return slice(base, base + CALIB_DIM)

    def _clone_base(self, which: str) -> int:
        base = IMU_DIM + 2 * CALIB_DIM
        if which == LID:
            base += CLONE_DIM * len(self.cam_clones)
        return base

    def clones(self, which: str) -> list:
        return self.cam_clones if which == CAM else self.lid_clones

    def clone_index(self, which: str, clone_id: int) -> int:
        for i, c in enumerate(self.clones(which)):
            if c.clone_id == clone_id:
                return i
        raise StateError(f"no {which} clone with id {clone_id}")

    def clone_slice(self, which: str, clone_id: int) -> slice:
        base = self._clone_base(which) + CLONE_DIM * self.clone_index(which, clone_id)
        return slice(base, base + CLONE_DIM)

    def get_clone(self, which: str, clone_id: int) -> CloneState:
        return self.clones(which)[self.clone_index(which, clone_id)]

    def _landmark_base(self) -> int:
        return (IMU_DIM + 2 * CALIB_DIM
                + CLONE_DIM * (len(self.cam_clones) + len(self.lid_clones)))

    def point_slice(self, feat_id: int) -> slice:
        ids = list(self.points.keys())
        base = self._landmark_base() + 3 * ids.index(feat_id)
        return slice(base, base + 3)

    def plane_slice(self, plane_id: int) -> slice:
        ids = list(self.planes.keys())
        base = self._landmark_base() + 3 * len(self.points) + 3 * ids.index(plane_id)
        return slice(base, base + 3)

    # ------------------------------------------------------- frame math
    def lidar_pose_of_clone(self, clone_id: int):
        """(R_LG, G_p_L) of the LiDAR frame attached to a LiDAR clone."""
        c = self.get_clone(LID, clone_id)
        R_LI = quat_to_rot(self.calib_lid.q)
        R_IG = quat_to_rot(c.q)
        R_LG = R_LI @ R_IG
        p_L = c.p - R_IG.T @ (R_LI.T @ self.calib_lid.p)
        return R_LG, p_L

    # ----------------------------------------------------------- copies
    def copy(self) -> "FilterState":
        return FilterState(
            imu=self.imu.copy(),
            calib_cam=self.calib_cam.copy(),
            calib_lid=self.calib_lid.copy(),
            cam_clones=[c.copy() for c in self.cam_clones],
            lid_clones=[c.copy() for c in self.lid_clones],
            points={k: v.copy() for k, v in self.points.items()},
            planes={k: v.copy() for k, v in self.planes.items()},
            cov=self.cov.copy(),
            time=self.time,
            max_cam_clones=self.max_cam_clones,
            max_lid_clones=self.max_lid_clones,
            _next_clone_id=self._next_clone_id,
        )

    # ------------------------------------------------------ corrections
    def apply_correction(self, dx: np.ndarray) -> "FilterState":
        """Boxplus the error-state correction dx onto the state (new object)."""
        if dx.shape[0] != self.dim():
            raise StateError(f"correction dim {dx.shape[0]} != state dim {self.dim()}")
        out = self.copy()
        out.imu.q = quat_boxplus(out.imu.q, dx[0:3])
        out.imu.bg = out.imu.bg + dx[3:6]
        out.imu.v = out.imu.v + dx[6:9]
        out.imu.ba = out.imu.ba + dx[9:12]
        out.imu.p = out.imu.p + dx[12:15]
        for which in (CAM, LID):
            sl = out.calib_slice(which)
            calib = out.calib_cam if which == CAM else out.calib_lid
            calib.q = quat_boxplus(calib.q, dx[sl.start:sl.start + 3])
            calib.p = calib.p + dx[sl.start + 3:sl.start + 6]
            calib.td = calib.td + dx[sl.start + 6]
        for which in (CAM, LID):
            base = out._clone_base(which)
            for i, c in enumerate(out.clones(which)):
                s = base + CLONE_DIM * i
                c.q = quat_boxplus(c.q, dx[s:s + 3])
                c.p = c.p + dx[s + 3:s + 6]
        for fid in out.points:
            sl = out.point_slice(fid)
            out.points[fid] = out.points[fid] + dx[sl]
        for pid in out.planes:
            sl = out.plane_slice(pid)
            out.planes[pid].cp = out.planes[pid].cp + dx[sl]
        return out


# ---------------------------------------------------------------------------
# covariance helpers

def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def check_covariance(state: FilterState, eig_floor: float = -1e-10) -> None:
    P = state.cov
    if P.shape != (state.dim(), state.dim()):
        raise StateError(f"covariance shape {P.shape} != dim {state.dim()}")
    scale = max(1.0, float(np.abs(P).max()))
    if np.abs(P - P.T).max() > 1e-9 * scale:
        raise StateError("covariance asymmetric")
    w = np.linalg.eigvalsh(symmetrize(P))
    if w.min() < eig_floor * scale:
        raise StateError(f"covariance indefinite: min eig {w.min():.3e}")


def _augment_cov(P: np.ndarray, J: np.ndarray, at: int) -> np.ndarray:
    """Insert a new block x_new = J @ x_old at error index `at`."""
    n = P.shape[0]
    k = J.shape[0]
    JP = J @ P
    old = np.r_[np.arange(at), np.arange(at + k, n + k)]
    new = np.arange(at, at + k)
    out = np.empty((n + k, n + k))
    out[np.ix_(old, old)] = P
    out[np.ix_(new, old)] = JP
    out[np.ix_(old, new)] = JP.T
    out[np.ix_(new, new)] = J @ JP.T
    return symmetrize(out)


def _delete_cov(P: np.ndarray, sl: slice) -> np.ndarray:
    idx = np.arange(sl.start, sl.stop)
    return np.delete(np.delete(P, idx, axis=0), idx, axis=1)


# ---------------------------------------------------------------------------
# state operations

def clone_pose(state: FilterState, which: str, stamp: float,
               omega=None, vel=None) -> tuple:
    """Append a stochastic clone of the current IMU pose to a window.

    Returns (new_state, clone_id).  omega/vel default to the current
    bias-corrected estimates and feed the time-offset Jacobian columns.
    """
    window = state.clones(which)
    if window and stamp < window[-1].stamp:
        raise StateError(f"clone stamp {stamp} precedes newest {window[-1].stamp}")
    limit = state.max_cam_clones if which == CAM else state.max_lid_clones
    if len(window) >= limit:
        raise StateError(f"{which} clone window full ({limit}); marginalize first")
    out = state.copy()
    cid = out._next_clone_id
    out._next_clone_id += 1
    clone = CloneState(
        clone_id=cid, stamp=float(stamp), q=out.imu.q.copy(), p=out.imu.p.copy(),
        omega=np.zeros(3) if omega is None else np.asarray(omega, float).copy(),
        vel=out.imu.v.copy() if vel is None else np.asarray(vel, float).copy(),
    )
    at = out._clone_base(which) + CLONE_DIM * len(out.clones(which))
    J = np.zeros((CLONE_DIM, state.dim()))
    J[0:3, 0:3] = np.eye(3)       # clone dtheta tracks IMU dtheta
    J[3:6, 12:15] = np.eye(3)     # clone position tracks IMU position
    out.clones(which).append(clone)
    out.cov = _augment_cov(state.cov, J, at)
    return out, cid


def marginalize_oldest(state: FilterState, which: str) -> FilterState:
    """Drop the oldest clone of a window (plain row/column deletion)."""
    window = state.clones(which)
    if not window:
        raise StateError(f"{which} window empty")
    victim = window[0]
    if which == LID:
        for pid, plane in state.planes.items():
            if plane.anchor_id == victim.clone_id:
                raise StateError(
                    f"plane {pid} still anchored in clone {victim.clone_id}; "
                    "move_anchor before marginalizing")
    sl = state.clone_slice(which, victim.clone_id)
    out = state.copy()
    out.clones(which).pop(0)
    out.cov = _delete_cov(state.cov, sl)
    return out


def remove_plane(state: FilterState, plane_id: int) -> FilterState:
    if plane_id not in state.planes:
        raise StateError(f"no plane {plane_id}")
    sl = state.plane_slice(plane_id)
    out = state.copy()
    del out.planes[plane_id]
    out.cov = _delete_cov(state.cov, sl)
    return out


def remove_point(state: FilterState, feat_id: int) -> FilterState:
    if feat_id not in state.points:
        raise StateError(f"no point landmark {feat_id}")
    sl = state.point_slice(feat_id)
    out = state.copy()
    del out.points[feat_id]
    out.cov = _delete_cov(state.cov, sl)
    return out


def _reanchor_map(state: FilterState, cp: np.ndarray, old_id: int, new_id: int):
    """Closest point in the new anchor frame plus its first-order Jacobians.

    Returns (cp_new, jac) where jac maps errors of
    (cp, dtheta_a, p_a, dtheta_b, p_b, dtheta_LI, p_LI) to the error of the
    re-anchored closest point; a/b are the old/new anchor clones.
    """
    ca = state.get_clone(LID, old_id)
    cb = state.get_clone(LID, new_id)
    R_LI = quat_to_rot(state.calib_lid.q)
    p_LI = state.calib_lid.p
    Ra, Rb = quat_to_rot(ca.q), quat_to_rot(cb.q)

    d = np.linalg.norm(cp)
    n = cp / d
    w = cb.p - Rb.T @ (R_LI.T @ p_LI) - ca.p      # G_p_Lb - p_a
    t = R_LI @ (Ra @ w) + p_LI                    # L_b origin in {L_a}
    R_ba = R_LI @ Rb @ Ra.T @ R_LI.T              # {L_a} -> {L_b}

    s = d - t @ n
    u = R_ba @ n
    cp_new = s * u

    dn_dcp = (np.eye(3) - np.outer(n, n)) / d
    ds_dcp = n - dn_dcp.T @ t                     # row as vector
    du_dcp = R_ba @ dn_dcp
    J_cp = np.outer(u, ds_dcp) + s * du_dcp

    def from_dt_du(dt, du):
        # d cp_new = u * (-n^T dt) + s * du
        return -np.outer(u, n) @ dt + s * du

    m = R_LI.T @ p_LI
    # old anchor orientation
    dt_a = R_LI @ skew(Ra @ w)
    du_a = -R_LI @ Rb @ Ra.T @ skew(R_LI.T @ n)
    # old anchor position
    dt_pa = -R_LI @ Ra
    du_pa = np.zeros((3, 3))
    # new anchor orientation
    dt_b = R_LI @ Ra @ Rb.T @ skew(m)
    du_b = R_LI @ skew(Rb @ Ra.T @ R_LI.T @ n)
    # new anchor position
    dt_pb = R_LI @ Ra
    du_pb = np.zeros((3, 3))
    # extrinsic orientation
    dt_li = skew(t - p_LI) + R_LI @ Ra @ Rb.T @ R_LI.T @ skew(p_LI)
    du_li = skew(u) - R_ba @ skew(n)
    # extrinsic position
    dt_pli = np.eye(3) - R_LI @ Ra @ Rb.T @ R_LI.T
    du_pli = np.zeros((3, 3))

    jac = {
        "cp": J_cp,
        "theta_a": from_dt_du(dt_a, du_a),
        "p_a": from_dt_du(dt_pa, du_pa),
        "theta_b": from_dt_du(dt_b, du_b),
        "p_b": from_dt_du(dt_pb, du_pb),
        "theta_li": from_dt_du(dt_li, du_li),
        "p_li": from_dt_du(dt_pli, du_pli),
    }
    return cp_new, jac


def move_anchor(state: FilterState, plane_id: int, new_anchor_id: int) -> FilterState:
    """Re-express a SLAM plane in another live LiDAR clone frame.

    The covariance is updated to first order through the analytic Jacobian
    of the re-anchoring map.  Raises StateError if the plane would land
    inside the closest-point singularity guard.
    """
    plane = state.planes[plane_id]
    if plane.anchor_id == new_anchor_id:
        return state.copy()
    state.clone_index(LID, new_anchor_id)   # both clones must be live
    cp_new, jac = _reanchor_map(state, plane.cp, plane.anchor_id, new_anchor_id)
    if np.linalg.norm(cp_new) < D_MIN:
        raise StateError(
            f"plane {plane_id} re-anchored inside singularity guard "
            f"(|cp|={np.linalg.norm(cp_new):.3f} < {D_MIN}); drop the landmark")

    n = state.dim()
    J = np.eye(n)
    psl = state.plane_slice(plane_id)
    J[psl, psl] = jac["cp"]
    sa = state.clone_slice(LID, plane.anchor_id)
    sb = state.clone_slice(LID, new_anchor_id)
    sc = state.calib_slice(LID)
    J[psl, sa.start:sa.start + 3] = jac["theta_a"]
    J[psl, sa.start + 3:sa.start + 6] = jac["p_a"]
    J[psl, sb.start:sb.start + 3] = jac["theta_b"]
    J[psl, sb.start + 3:sb.start + 6] = jac["p_b"]
    J[psl, sc.start:sc.start + 3] = jac["theta_li"]
    J[psl, sc.start + 3:sc.start + 6] = jac["p_li"]

    out = state.copy()
    out.planes[plane_id] = PlaneLandmark(cp=cp_new, anchor_id=new_anchor_id)
    out.cov = symmetrize(J @ state.cov @ J.T)
    return out


def plane_normal_global(state: FilterState, plane: PlaneLandmark) -> np.ndarray:
    R_LG, _ = state.lidar_pose_of_clone(plane.anchor_id)
    n_a = plane.cp / np.linalg.norm(plane.cp)
    return R_LG.T @ n_a


def insert_slam_plane(state: FilterState, plane: PlaneLandmark,
                      init_cov: np.ndarray, cross_cov: np.ndarray | None = None,
                      angle_thresh_deg: float = SLAM_PLANE_ANGLE_DEG,
                      budget: int = SLAM_PLANE_BUDGET) -> tuple:
    """Insert a plane landmark, enforcing the normal-novelty rule.

    A candidate is rejected (StateError) if its global normal is within
    angle_thresh_deg of any plane already in the state, if it violates the
    closest-point guard, or if the budget is exhausted.  cross_cov is the
    3 x dim cross-covariance row from delayed initialization (zeros when
    omitted).  Returns (new_state, plane_id).
    """
    if np.linalg.norm(plane.cp) < D_MIN:
        raise StateError("plane closest point inside singularity guard")
    if len(state.planes) >= budget:
        raise StateError(f"SLAM plane budget ({budget}) exhausted")
    n_new = plane_normal_global(state, plane)
    for pid, existing in state.planes.items():
        n_old = plane_normal_global(state, existing)
        ang = np.degrees(np.arccos(np.clip(abs(n_new @ n_old), -1.0, 1.0)))
        if ang < angle_thresh_deg:
            raise StateError(
                f"candidate normal within {ang:.1f} deg of plane {pid}; "
                "treat as MSCKF plane")

    n = state.dim()
    at = n   # planes live at the very end of the vector
    out = state.copy()
    plane_id = (max(out.planes.keys()) + 1) if out.planes else 0
    out.planes[plane_id] = plane.copy()
    P = np.zeros((n + 3, n + 3))
    P[:n, :n] = state.cov
    P[n:, n:] = init_cov
    if cross_cov is not None:
        P[n:, :n] = cross_cov
        P[:n, n:] = cross_cov.T
    out.cov = symmetrize(P)
    return out, plane_id


def insert_point_landmark(state: FilterState, p_global: np.ndarray,
                          init_cov: np.ndarray,
                          cross_cov: np.ndarray | None = None,
                          feat_id: int | None = None) -> tuple:
    """Insert a visual point landmark (delayed initialization)."""
    out = state.copy()
    if feat_id is None:
        feat_id = (max(out.points.keys()) + 1) if out.points else 0
    if feat_id in out.points:
        raise StateError(f"point {feat_id} already in state")
    n = state.dim()
    at = out._landmark_base() + 3 * len(out.points)
    out.points[feat_id] = np.asarray(p_global, float).copy()
    J = np.zeros((3, n))
    out.cov = _augment_cov(state.cov, J, at)
    sl = out.point_slice(feat_id)
    out.cov[sl, sl] = init_cov
    if cross_cov is not None:
        old = np.r_[np.arange(at), np.arange(at + 3, n + 3)]
        out.cov[np.ix_(range(sl.start, sl.stop), old)] = cross_cov
        out.cov[np.ix_(old, range(sl.start, sl.stop))] = cross_cov.T
    out.cov = symmetrize(out.cov)
    return out, feat_id


# ---------------------------------------------------------------------------
# snapshot serialization (field names mirror the state-vector blocks)

def state_to_snapshot(state: FilterState, include_cov: bool = False) -> dict:
    def vec(x):
        return np.asarray(x, float).tolist()

    def calib(c):
        return {"q_SI": vec(c.q), "p_SI": vec(c.p), "t_d": float(c.td)}

    def clone(c):
        return {"clone_id": c.clone_id, "stamp": c.stamp, "q_IG": vec(c.q),
                "p_GI": vec(c.p), "omega": vec(c.omega), "v_GI": vec(c.vel)}

    snap = {
        "time": state.time,
        "x_I": {"q_IG": vec(state.imu.q), "b_g": vec(state.imu.bg),
                "v_GI": vec(state.imu.v), "b_a": vec(state.imu.ba),
                "p_GI": vec(state.imu.p)},
        "x_calib_C": calib(state.calib_cam),
        "x_calib_L": calib(state.calib_lid),
        "x_C": [clone(c) for c in state.cam_clones],
        "x_L": [clone(c) for c in state.lid_clones],
        "x_f": [{"id": k, "p_Gf": vec(v)} for k, v in state.points.items()],
        "x_pi": [{"id": k, "anchor_id": v.anchor_id, "cp": vec(v.cp)}
                 for k, v in state.planes.items()],
    }
    if include_cov:
        snap["covariance"] = state.cov.tolist()
    return snap


def state_from_snapshot(snap: dict) -> FilterState:
    def calib(d):
        return CalibState(q=quat_normalize(np.array(d["q_SI"])),
                          p=np.array(d["p_SI"], float), td=float(d["t_d"]))

    def clone(d):
        return CloneState(clone_id=int(d["clone_id"]), stamp=float(d["stamp"]),
                          q=quat_normalize(np.array(d["q_IG"])),
                          p=np.array(d["p_GI"], float),
                          omega=np.array(d["omega"], float),
                          vel=np.array(d["v_GI"], float))

    xi = snap["x_I"]
    imu = ImuCoreState(q=quat_normalize(np.array(xi["q_IG"])),
                       bg=np.array(xi["b_g"], float), v=np.array(xi["v_GI"], float),
                       ba=np.array(xi["b_a"], float), p=np.array(xi["p_GI"], float))
    state = FilterState(
        imu=imu, calib_cam=calib(snap["x_calib_C"]), calib_lid=calib(snap["x_calib_L"]),
        cam_clones=[clone(c) for c in snap["x_C"]],
        lid_clones=[clone(c) for c in snap["x_L"]],
        points={int(f["id"]): np.array(f["p_Gf"], float) for f in snap["x_f"]},
        planes={int(p["id"]): PlaneLandmark(cp=np.array(p["cp"], float),
                                            anchor_id=int(p["anchor_id"]))
                for p in snap["x_pi"]},
        time=float(snap["time"]),
    )
    if "covariance" in snap:
        state.cov = np.array(snap["covariance"], float)
    else:
        state.cov = np.zeros((state.dim(), state.dim()))
    ids = [c.clone_id for c in state.cam_clones + state.lid_clones]
    state._next_clone_id = max(ids) + 1 if ids else 0
    return state


def snapshot_json(state: FilterState, include_cov: bool = False) -> str:
    return json.dumps(state_to_snapshot(state, include_cov), sort_keys=True)
