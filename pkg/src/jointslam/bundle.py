"""Dynamic bundle adjustment.

Jointly refines camera poses, static points, object twist variables and
object points over a keyframe window. Camera poses exist for temporal and
spatial keyframes; object twist variables only for temporal keyframes, and
each one perturbs a frozen object-pose snapshot: the optimized object pose
at keyframe i is exp(B c_i) @ snapshot_i with B the world-frame freedom
basis of the cluster's joint, so joint constraints hold exactly.

Three residual families:
  * stat: stereo reprojection (u_left, v, u_right) of a world point;
  * dyna: stereo reprojection of an object point moved by the twist variable;
  * constvel: difference of consecutive log-derived inter-pose twists,
    projected into the joint frame and weighted by a diagonal matrix.

Reprojection residuals carry the right-image column u_right = u - disparity:
with monocular rows only, one fixed camera leaves the reconstruction scale
unobservable and noiseless recovery of the ground truth is impossible.

The damped normal equations are solved either densely or with the Schur
complement on the (block-diagonal) point part; both paths build the same
matrix and agree to linear-algebra roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, Diverged, EmptyWindow, SingularReducedSystem
from .geometry import PinholeCamera, projection_jacobian
from .joints import JointSpec, conjugated_projector, projector, world_freedom_basis
from .liegroup import (
    Pose,
    adjoint,
    compose,
    exp_se3,
    inverse,
    log_se3,
    se3_dexp,
    se3_dlog,
    skew,
)
from .tracking import RobustConfig, huber_rho, mad_sigma

DEFAULT_TWIST_WEIGHTS = np.array([1.0, 1.0, 1.0, 10.0, 10.0, 10.0])
_GATE_DELTAS = 3.0


@dataclass(frozen=True)
class BAConfig:
    max_iters: int = 30
    lambda_init: float = 1e-4
    tol: float = 1e-8
    use_schur: bool = True
    huber_delta_px: float = 2.0
    huber_delta_vel: float = 1.0
    robust: RobustConfig = field(default_factory=RobustConfig)


@dataclass
class CameraVar:
    kf_index: int
    pose: Pose            # T_cw
    fixed: bool = False


@dataclass
class PointVar:
    point_id: int
    position: np.ndarray
    owner_cluster: int
    is_static: bool
    fixed: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)


@dataclass
class TwistVar:
    cluster_id: int
    kf_index: int
    coords: np.ndarray    # d freedom coordinates; twist = basis @ coords
    snapshot: Pose        # frozen linearization anchor T_wo at this keyframe
    fixed: bool = False

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1)


@dataclass(frozen=True)
class StatBlock:
    kf_index: int
    point_id: int
    z: np.ndarray             # (u_left, v, u_right)


@dataclass(frozen=True)
class DynaBlock:
    kf_index: int
    cluster_id: int
    point_id: int
    z: np.ndarray             # (u_left, v, u_right)
    twist_key: tuple | None   # (cluster_id, kf_index) or None when the
    frozen_pose: Pose | None  # object pose is held fixed at this keyframe


@dataclass(frozen=True)
class ConstVelBlock:
    cluster_id: int
    frames: tuple             # three consecutive temporal keyframe indices


@dataclass
class ClusterJointInfo:
    joint: JointSpec
    basis: np.ndarray         # world freedom basis B (6, d)
    p_world: np.ndarray       # conjugated projector (6, 6)
    pi_l: np.ndarray
    ad_lw: np.ndarray


class BAProblem:
    def __init__(self, cam: PinholeCamera, weights=DEFAULT_TWIST_WEIGHTS):
        self.cam = cam
        self.weights = np.asarray(weights, dtype=float).reshape(6)
        self.cameras: dict[int, CameraVar] = {}
        self.points: dict[int, PointVar] = {}
        self.twists: dict[tuple, TwistVar] = {}
        self.cluster_joints: dict[int, ClusterJointInfo] = {}
        self.stat_blocks: list[StatBlock] = []
        self.dyna_blocks: list[DynaBlock] = []
        self.constvel_blocks: list[ConstVelBlock] = []
        self.sigma_stat: float = 1.0
        self.sigma_dyna: dict[int, float] = {}

    # -- variable access ----------------------------------------------------

    def fixed_mask(self) -> dict:
        """Per-variable constant flags, keyed like the variable dicts."""
        mask = {("camera", k): v.fixed for k, v in self.cameras.items()}
        mask.update({("point", k): v.fixed for k, v in self.points.items()})
        mask.update({("twist", k): v.fixed for k, v in self.twists.items()})
        return mask

    def object_pose(self, cluster_id: int, kf_index: int) -> Pose:
        var = self.twists.get((cluster_id, kf_index))
        if var is None:
            raise KeyError(f"no twist variable for cluster {cluster_id} at kf {kf_index}")
        basis = self.cluster_joints[cluster_id].basis
        return compose(exp_se3(basis @ var.coords), var.snapshot)

    def dump(self, path):
        """Structured-text export of variables and blocks."""
        with open(path, "w") as fh:
            fh.write("ba_problem v1\n")
            for kf, var in sorted(self.cameras.items()):
                flat = " ".join(f"{x:.12g}" for x in var.pose.matrix()[:3].ravel())
                fh.write(f"camera {kf} fixed={int(var.fixed)} {flat}\n")
            for pid, var in sorted(self.points.items()):
                flat = " ".join(f"{x:.12g}" for x in var.position)
                fh.write(f"point {pid} cluster={var.owner_cluster} "
                         f"static={int(var.is_static)} fixed={int(var.fixed)} {flat}\n")
            for key, var in sorted(self.twists.items()):
                flat = " ".join(f"{x:.12g}" for x in var.coords)
                fh.write(f"twist {key[0]} {key[1]} fixed={int(var.fixed)} {flat}\n")
            fh.write(f"blocks stat={len(self.stat_blocks)} dyna={len(self.dyna_blocks)} "
                     f"constvel={len(self.constvel_blocks)}\n")


@dataclass
class BAReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    used_schur: bool


# -- per-block residuals (the test surface; the solver vectorizes these) ----


def _whiten_weight(res: np.ndarray, sigma: float, delta: float) -> np.ndarray:
    white = res / sigma
    _, weight = huber_rho(float(white @ white), delta)
    return np.sqrt(weight) * white


def _stereo_projection(cam: PinholeCamera, x_c: np.ndarray) -> np.ndarray:
    """(u_left, v, u_right) of a camera-frame point."""
    return np.array([cam.fx * x_c[0] / x_c[2] + cam.cx,
                     cam.fy * x_c[1] / x_c[2] + cam.cy,
                     cam.fx * (x_c[0] - cam.baseline) / x_c[2] + cam.cx])


def residual_stat(problem: BAProblem, block: StatBlock,
                  cfg: BAConfig = BAConfig()) -> np.ndarray:
    """Whitened Huber-weighted stereo reprojection residual of a static
    point through a camera variable."""
    cam_var = problem.cameras[block.kf_index]
    point = problem.points[block.point_id]
    x_c = cam_var.pose.apply(point.position)
    if x_c[2] <= 1e-6:
        raise BehindCamera(f"static point {block.point_id} behind kf {block.kf_index}")
    pred = _stereo_projection(problem.cam, x_c)
    return _whiten_weight(block.z - pred, problem.sigma_stat, cfg.huber_delta_px)


def _dyna_object_pose(problem: BAProblem, block: DynaBlock) -> Pose:
    if block.twist_key is not None:
        var = problem.twists[block.twist_key]
        basis = problem.cluster_joints[block.cluster_id].basis
        return compose(exp_se3(basis @ var.coords), var.snapshot)
    return block.frozen_pose


def residual_dyna(problem: BAProblem, block: DynaBlock,
                  cfg: BAConfig = BAConfig()) -> np.ndarray:
    """Whitened Huber-weighted reprojection of an object point moved by the
    exponential of the twist variable."""
    cam_var = problem.cameras[block.kf_index]
    point = problem.points[block.point_id]
    pose_wo = _dyna_object_pose(problem, block)
    x_c = cam_var.pose.apply(pose_wo.apply(point.position))
    if x_c[2] <= 1e-6:
        raise BehindCamera(f"object point {block.point_id} behind kf {block.kf_index}")
    pred = _stereo_projection(problem.cam, x_c)
    sigma = problem.sigma_dyna.get(block.cluster_id, 1.0)
    return _whiten_weight(block.z - pred, sigma, cfg.huber_delta_px)


def _constvel_relative_twists(problem: BAProblem, block: ConstVelBlock):
    """Inter-pose world twists nu_prev, nu_next and their relative poses."""
    poses = []
    for kf in block.frames:
        var = problem.twists.get((block.cluster_id, kf))
        if var is None:
            raise KeyError(f"constvel block misses twist ({block.cluster_id}, {kf})")
        basis = problem.cluster_joints[block.cluster_id].basis
        poses.append(compose(exp_se3(basis @ var.coords), var.snapshot))
    t_prev = compose(poses[1], inverse(poses[0]))
    t_next = compose(poses[2], inverse(poses[1]))
    return log_se3(t_prev).vector, log_se3(t_next).vector, t_prev, t_next


def residual_constvel(problem: BAProblem, block: ConstVelBlock,
                      cfg: BAConfig = BAConfig()) -> np.ndarray:
    """Difference of consecutive inter-pose twists in the joint frame,
    weighted by the diagonal twist weights and Huber-robustified."""
    info = problem.cluster_joints[block.cluster_id]
    nu_prev, nu_next, _, _ = _constvel_relative_twists(problem, block)
    diff = info.pi_l @ info.ad_lw @ (nu_next - nu_prev)
    res = np.sqrt(problem.weights) * diff
    _, weight = huber_rho(float(res @ res), cfg.huber_delta_vel)
    return np.sqrt(weight) * res


def dyna_twist_jacobian(problem: BAProblem, block: DynaBlock,
                        cfg: BAConfig = BAConfig()) -> np.ndarray:
    """d(residual_dyna)/d(twist coordinates) for one block, matching the
    solver's chain: -dpi (q^T kron R_cw) dexp(B c) B, Huber-weighted."""
    if block.twist_key is None:
        raise ValueError("block has no twist variable")
    var = problem.twists[block.twist_key]
    info = problem.cluster_joints[block.cluster_id]
    cam_pose = problem.cameras[block.kf_index].pose
    basis = info.basis
    motion = exp_se3(basis @ var.coords)
    pose_wo = compose(motion, var.snapshot)
    p_o = problem.points[block.point_id].position
    x_c = cam_pose.apply(pose_wo.apply(p_o))
    if x_c[2] <= 1e-6:
        raise BehindCamera(f"object point {block.point_id} behind camera")
    sigma = problem.sigma_dyna.get(block.cluster_id, 1.0)
    cam = problem.cam
    z = x_c[2]
    dpi = np.array([
        [cam.fx / z, 0.0, -cam.fx * x_c[0] / z**2],
        [0.0, cam.fy / z, -cam.fy * x_c[1] / z**2],
        [cam.fx / z, 0.0, -cam.fx * (x_c[0] - cam.baseline) / z**2],
    ]) / sigma
    q = np.append(var.snapshot.apply(p_o), 1.0)
    chain = np.kron(q.reshape(1, 4), cam_pose.rotation)
    jac = -dpi @ chain @ se3_dexp(basis @ var.coords) @ basis
    pred = _stereo_projection(cam, x_c)
    white = (block.z - pred) / sigma
    _, weight = huber_rho(float(white @ white), cfg.huber_delta_px)
    return np.sqrt(weight) * jac


def constvel_jacobians(problem: BAProblem, block: ConstVelBlock,
                       cfg: BAConfig = BAConfig()) -> dict:
    """d(residual_constvel)/d(twist coordinates) for the three variables of
    a constant-velocity block, keyed by (cluster_id, kf_index)."""
    info = problem.cluster_joints[block.cluster_id]
    basis = info.basis
    keys = [(block.cluster_id, kf) for kf in block.frames]
    coords = [problem.twists[k].coords for k in keys]
    snaps = [problem.twists[k].snapshot for k in keys]
    motions = [exp_se3(basis @ c) for c in coords]
    poses = [compose(m, s) for m, s in zip(motions, snaps)]
    t_prev = compose(poses[1], inverse(poses[0]))
    t_next = compose(poses[2], inverse(poses[1]))
    proj_joint = info.pi_l @ info.ad_lw
    dlog_prev = proj_joint @ se3_dlog(t_prev)
    dlog_next = proj_joint @ se3_dlog(t_next)

    def d_rel(dlog, m_b, snap_b, snap_a, m_a, c_b, c_a):
        d_mat = compose(snap_b, inverse(snap_a))
        right = compose(d_mat, inverse(m_a)).matrix()
        db = dlog @ np.kron(right.T, np.eye(3)) @ se3_dexp(basis @ c_b) @ basis
        left_r = compose(m_b, d_mat).rotation
        dexp_neg = se3_dexp(-(basis @ c_a))
        rotated = np.einsum("ij,sjd->sid", left_r,
                            dexp_neg.reshape(4, 3, 6)).reshape(12, 6)
        da = dlog @ rotated @ (-basis)
        return db, da

    d_prev_1, d_prev_0 = d_rel(dlog_prev, motions[1], snaps[1], snaps[0],
                               motions[0], coords[1], coords[0])
    d_next_2, d_next_1 = d_rel(dlog_next, motions[2], snaps[2], snaps[1],
                               motions[1], coords[2], coords[1])
    nu_prev = log_se3(t_prev).vector
    nu_next = log_se3(t_next).vector
    raw = np.sqrt(problem.weights) * (proj_joint @ (nu_next - nu_prev))
    _, weight = huber_rho(float(raw @ raw), cfg.huber_delta_vel)
    scale = np.sqrt(weight) * np.sqrt(problem.weights)[:, None]
    return {
        keys[0]: scale * (-d_prev_0),
        keys[1]: scale * (d_next_1 - d_prev_1),
        keys[2]: scale * d_next_2,
    }


# -- problem construction -----------------------------------------------------


def build_problem(world, cam: PinholeCamera, temporal_frames, spatial_frames=(),
                  weights=DEFAULT_TWIST_WEIGHTS, cfg: BAConfig = BAConfig(),
                  fixed_frames=()) -> BAProblem:
    """Lay out variables and residual blocks over a keyframe window.

    Camera variables cover temporal plus spatial keyframes (oldest fixed as
    gauge). Twist variables exist per (dynamic cluster, temporal keyframe)
    with the oldest one per cluster fixed: it anchors the object frame the
    same way the oldest camera anchors the world frame. Every observed
    point is free: one stereo observation already determines a point (three
    equations for three unknowns), so no fixing is needed for rank.
    """
    temporal = sorted(set(temporal_frames))
    spatial = sorted(set(spatial_frames) - set(temporal))
    fixed = sorted(set(fixed_frames) - set(temporal) - set(spatial))
    window = sorted(set(temporal) | set(spatial) | set(fixed))
    if not set(temporal) | set(spatial):
        raise EmptyWindow("no keyframes in the window")
    missing = [f for f in window if f not in world.keyframes]
    if missing:
        raise EmptyWindow(f"frames {missing} are not keyframes")

    problem = BAProblem(cam, weights)
    fixed_set = set(fixed)
    free_frames = [f for f in window if f not in fixed_set]
    for kf_index in window:
        # an outer ring of fixed past cameras anchors the window; without
        # one, the oldest camera provides the gauge
        is_gauge = kf_index == free_frames[0] if not fixed_set else False
        problem.cameras[kf_index] = CameraVar(
            kf_index=kf_index, pose=world.keyframes[kf_index].pose,
            fixed=kf_index in fixed_set or is_gauge)

    cluster_static = {cid: c.is_static for cid, c in world.clusters.items()}
    obs_count: dict[int, int] = {}
    for kf_index in window:
        for obs in world.keyframes[kf_index].observations:
            obs_count[obs.point_id] = obs_count.get(obs.point_id, 0) + 1

    for pid in sorted(obs_count):
        point = world.points[pid]
        problem.points[pid] = PointVar(
            point_id=pid, position=point.position.copy(),
            owner_cluster=point.owner_cluster,
            is_static=cluster_static[point.owner_cluster])

    for cluster in sorted(world.dynamic_clusters(), key=lambda c: c.id):
        joint = cluster.joint or JointSpec.free()
        tp = conjugated_projector(joint)
        problem.cluster_joints[cluster.id] = ClusterJointInfo(
            joint=joint, basis=world_freedom_basis(joint), p_world=tp.p_world,
            pi_l=tp.pi_l, ad_lw=adjoint(inverse(joint.frame)))
        frames = [f for f in temporal if f in cluster.poses]
        dof = problem.cluster_joints[cluster.id].basis.shape[1]
        for k, kf_index in enumerate(frames):
            problem.twists[(cluster.id, kf_index)] = TwistVar(
                cluster_id=cluster.id, kf_index=kf_index, coords=np.zeros(dof),
                snapshot=cluster.poses[kf_index], fixed=k == 0)
        for trio in zip(frames, frames[1:], frames[2:]):
            problem.constvel_blocks.append(ConstVelBlock(cluster.id, trio))

    temporal_set = set(temporal)
    for kf_index in window:
        for obs in world.keyframes[kf_index].observations:
            z = np.array([obs.u, obs.v, obs.u - obs.disparity])
            cid = obs.cluster_id
            if cluster_static.get(cid, True):
                problem.stat_blocks.append(StatBlock(kf_index, obs.point_id, z))
            else:
                cluster = world.clusters[cid]
                key = (cid, kf_index)
                if kf_index in temporal_set and key in problem.twists:
                    problem.dyna_blocks.append(DynaBlock(
                        kf_index, cid, obs.point_id, z, key, None))
                elif kf_index in cluster.poses:
                    problem.dyna_blocks.append(DynaBlock(
                        kf_index, cid, obs.point_id, z, None, cluster.poses[kf_index]))

    _estimate_sigmas(problem, cfg)
    return problem


def _estimate_sigmas(problem: BAProblem, cfg: BAConfig):
    """MAD scales from the raw residuals at the initial variables."""
    robust = cfg.robust
    stat_res = []
    for block in problem.stat_blocks:
        cam_var = problem.cameras[block.kf_index]
        x_c = cam_var.pose.apply(problem.points[block.point_id].position)
        if x_c[2] <= 1e-6:
            continue
        stat_res.extend(block.z - _stereo_projection(problem.cam, x_c))
    problem.sigma_stat = mad_sigma(stat_res, robust) if stat_res else robust.sigma_floor
    by_cluster: dict[int, list] = {}
    for block in problem.dyna_blocks:
        cam_var = problem.cameras[block.kf_index]
        pose_wo = _dyna_object_pose(problem, block)
        x_c = cam_var.pose.apply(pose_wo.apply(problem.points[block.point_id].position))
        if x_c[2] <= 1e-6:
            continue
        by_cluster.setdefault(block.cluster_id, []).extend(
            block.z - _stereo_projection(problem.cam, x_c))
    for cid in problem.cluster_joints:
        res = by_cluster.get(cid)
        problem.sigma_dyna[cid] = mad_sigma(res, robust) if res else robust.sigma_floor


# -- solver -------------------------------------------------------------------


class _Layout:
    """Column layout: cameras and twists first (kept after Schur), then
    points; fixed variables get no columns."""

    def __init__(self, problem: BAProblem):
        self.cam_keys = sorted(problem.cameras)
        self.twist_keys = sorted(problem.twists)
        self.point_keys = sorted(problem.points)
        self.cam_col = {}
        offset = 0
        for key in self.cam_keys:
            if problem.cameras[key].fixed:
                self.cam_col[key] = -1
            else:
                self.cam_col[key] = offset
                offset += 6
        self.twist_col = {}
        self.twist_dof = {}
        for key in self.twist_keys:
            var = problem.twists[key]
            dof = len(var.coords)
            self.twist_dof[key] = dof
            if var.fixed or dof == 0:
                self.twist_col[key] = -1
            else:
                self.twist_col[key] = offset
                offset += dof
        self.n_pose = offset
        self.point_col = {}
        p_offset = 0
        for key in self.point_keys:
            if problem.points[key].fixed:
                self.point_col[key] = -1
            else:
                self.point_col[key] = p_offset
                p_offset += 3
        self.n_point = p_offset


class _State:
    """Solver state as stacked arrays in layout row order."""

    def __init__(self, problem: BAProblem, layout: _Layout):
        self.cam_pose = {k: problem.cameras[k].pose for k in layout.cam_keys}
        self.twist_coords = {k: problem.twists[k].coords.copy() for k in layout.twist_keys}
        self.point_rows = {k: i for i, k in enumerate(layout.point_keys)}
        self.points = np.array([problem.points[k].position for k in layout.point_keys]) \
            if layout.point_keys else np.zeros((0, 3))
        self.cam_rows = {k: i for i, k in enumerate(layout.cam_keys)}
        self._refresh_cam_arrays(layout)

    def _refresh_cam_arrays(self, layout: _Layout):
        self.cam_r = np.array([self.cam_pose[k].rotation for k in layout.cam_keys]) \
            if layout.cam_keys else np.zeros((0, 3, 3))
        self.cam_t = np.array([self.cam_pose[k].translation for k in layout.cam_keys]) \
            if layout.cam_keys else np.zeros((0, 3))

    def point_position(self, key) -> np.ndarray:
        return self.points[self.point_rows[key]]

    def perturbed(self, problem: BAProblem, layout: _Layout,
                  dp: np.ndarray, dl: np.ndarray) -> "_State":
        out = _State.__new__(_State)
        out.cam_pose = {}
        for key in layout.cam_keys:
            col = layout.cam_col[key]
            pose = self.cam_pose[key]
            out.cam_pose[key] = pose if col < 0 else compose(exp_se3(dp[col:col + 6]), pose)
        out.twist_coords = {}
        for key in layout.twist_keys:
            col = layout.twist_col[key]
            coords = self.twist_coords[key]
            out.twist_coords[key] = coords if col < 0 else coords + dp[col:col + layout.twist_dof[key]]
        out.point_rows = self.point_rows
        out.cam_rows = self.cam_rows
        out.points = self.points.copy()
        for key in layout.point_keys:
            col = layout.point_col[key]
            if col >= 0:
                out.points[self.point_rows[key]] += dl[col:col + 3]
        out._refresh_cam_arrays(layout)
        return out


class _Compiled:
    """Per-solve index arrays that do not change across iterations."""

    def __init__(self, problem: BAProblem, layout: _Layout):
        cam_rows = {k: i for i, k in enumerate(layout.cam_keys)}
        point_rows = {k: i for i, k in enumerate(layout.point_keys)}
        blocks = problem.stat_blocks
        self.stat_kf_rows = np.array([cam_rows[b.kf_index] for b in blocks], dtype=int)
        self.stat_pt_rows = np.array([point_rows[b.point_id] for b in blocks], dtype=int)
        self.stat_z = np.array([b.z for b in blocks]) if blocks else np.zeros((0, 3))
        self.stat_cam_cols = np.array([layout.cam_col[b.kf_index] for b in blocks], dtype=int)
        self.stat_pt_cols = np.array([layout.point_col[b.point_id] for b in blocks], dtype=int)

        groups: dict = {}
        for idx, block in enumerate(problem.dyna_blocks):
            groups.setdefault((block.cluster_id, block.kf_index,
                               block.twist_key is None), []).append(idx)
        self.dyna_groups = []
        for group_key in sorted(groups):
            idxs = groups[group_key]
            members = [problem.dyna_blocks[i] for i in idxs]
            cid, kf_index, frozen = group_key
            self.dyna_groups.append({
                "cid": cid,
                "kf_index": kf_index,
                "frozen": frozen,
                "idxs": np.array(idxs, dtype=int),
                "z": np.array([b.z for b in members]),
                "pt_rows": np.array([point_rows[b.point_id] for b in members], dtype=int),
                "pt_cols": np.array([layout.point_col[b.point_id] for b in members], dtype=int),
                "frozen_pose": members[0].frozen_pose if frozen else None,
            })


def _project_batch(cam: PinholeCamera, points_c: np.ndarray):
    valid = points_c[:, 2] > 1e-6
    z = np.where(valid, points_c[:, 2], 1.0)
    pred = np.column_stack([cam.fx * points_c[:, 0] / z + cam.cx,
                            cam.fy * points_c[:, 1] / z + cam.cy,
                            cam.fx * (points_c[:, 0] - cam.baseline) / z + cam.cx])
    return pred, valid


def _dpi_batch(cam: PinholeCamera, points_c: np.ndarray) -> np.ndarray:
    z = np.maximum(points_c[:, 2], 1e-6)
    out = np.zeros((len(points_c), 3, 3))
    out[:, 0, 0] = cam.fx / z
    out[:, 0, 2] = -cam.fx * points_c[:, 0] / z**2
    out[:, 1, 1] = cam.fy / z
    out[:, 1, 2] = -cam.fy * points_c[:, 1] / z**2
    out[:, 2, 0] = cam.fx / z
    out[:, 2, 2] = -cam.fx * (points_c[:, 0] - cam.baseline) / z**2
    return out


def _dcam_batch(points_c: np.ndarray) -> np.ndarray:
    """d X_c / d(left camera increment): [I | -skew(X_c)] stacked."""
    n = len(points_c)
    out = np.zeros((n, 3, 6))
    out[:, 0, 0] = out[:, 1, 1] = out[:, 2, 2] = 1.0
    out[:, 0, 4], out[:, 0, 5] = points_c[:, 2], -points_c[:, 1]
    out[:, 1, 3], out[:, 1, 5] = -points_c[:, 2], points_c[:, 0]
    out[:, 2, 3], out[:, 2, 4] = points_c[:, 1], -points_c[:, 0]
    return out


class _Accumulator:
    def __init__(self, layout: _Layout):
        self.h_pp = np.zeros((layout.n_pose, layout.n_pose))
        self.h_pl = np.zeros((layout.n_pose, layout.n_point))
        self.h_ll = np.zeros((layout.n_point // 3, 3, 3)) if layout.n_point else np.zeros((0, 3, 3))
        self.g_p = np.zeros(layout.n_pose)
        self.g_l = np.zeros(layout.n_point)

    def add_pose_block(self, col_a: int, jac_a: np.ndarray, col_b: int, jac_b: np.ndarray):
        da, db = jac_a.shape[1], jac_b.shape[1]
        self.h_pp[col_a:col_a + da, col_b:col_b + db] += jac_a.T @ jac_b
        if col_a != col_b:
            self.h_pp[col_b:col_b + db, col_a:col_a + da] += jac_b.T @ jac_a


def _solve_reduced(h_pp, h_pl, h_ll, g_p, g_l, lam: float, use_schur: bool):
    """Solve the damped normal equations; returns (d_pose, d_point)."""
    n_pose = h_pp.shape[0]
    n_point = g_l.size
    damped_pp = h_pp + lam * np.diag(np.maximum(np.diag(h_pp), 1e-12))
    if n_point == 0:
        try:
            return np.linalg.solve(damped_pp, -g_p), np.zeros(0)
        except np.linalg.LinAlgError as exc:
            raise SingularReducedSystem(str(exc)) from exc
    damped_ll = h_ll.copy()
    for k in range(damped_ll.shape[0]):
        diag = np.maximum(np.diag(damped_ll[k]), 1e-12)
        damped_ll[k] += lam * np.diag(diag)
    try:
        if use_schur:
            ll_inv = np.linalg.inv(damped_ll)
            n_blocks = damped_ll.shape[0]
            hpl_blocks = h_pl.reshape(n_pose, n_blocks, 3)
            # H_pl H_ll^-1 as (n_pose, n_blocks, 3)
            hpl_llinv = np.einsum("pbj,bjk->pbk", hpl_blocks, ll_inv)
            schur = damped_pp - hpl_llinv.reshape(n_pose, -1) @ h_pl.T
            rhs = -g_p + hpl_llinv.reshape(n_pose, -1) @ g_l
            d_pose = np.linalg.solve(schur, rhs)
            rhs_l = -g_l - h_pl.T @ d_pose
            d_point = np.einsum("bjk,bk->bj", ll_inv, rhs_l.reshape(-1, 3)).ravel()
            return d_pose, d_point
        full = np.zeros((n_pose + n_point, n_pose + n_point))
        full[:n_pose, :n_pose] = damped_pp
        full[:n_pose, n_pose:] = h_pl
        full[n_pose:, :n_pose] = h_pl.T
        for k in range(damped_ll.shape[0]):
            full[n_pose + 3 * k:n_pose + 3 * k + 3,
                 n_pose + 3 * k:n_pose + 3 * k + 3] = damped_ll[k]
        step = np.linalg.solve(full, -np.concatenate([g_p, g_l]))
        return step[:n_pose], step[n_pose:]
    except np.linalg.LinAlgError as exc:
        raise SingularReducedSystem(str(exc)) from exc


def _linearize(problem: BAProblem, layout: _Layout, state: _State,
               cfg: BAConfig, with_jacobians: bool, gates=None,
               compiled: _Compiled | None = None):
    """Residuals (and optionally normal-equation contributions) at a state.

    gates: (stat_gate, dyna_gate) boolean arrays frozen by the caller; when
    None they are derived from these residuals.
    """
    cam = problem.cam
    acc = _Accumulator(layout) if with_jacobians else None
    cost = 0.0
    compiled = compiled or _Compiled(problem, layout)

    # ---- stat blocks, fully vectorized
    new_gates = [None, None]
    if problem.stat_blocks:
        rot = state.cam_r[compiled.stat_kf_rows]
        trn = state.cam_t[compiled.stat_kf_rows]
        pts = state.points[compiled.stat_pt_rows]
        x_c = np.einsum("nij,nj->ni", rot, pts) + trn
        pred, valid = _project_batch(cam, x_c)
        res = (compiled.stat_z - pred) / problem.sigma_stat
        r2 = np.einsum("ni,ni->n", res, res)
        cost_terms, weights = huber_rho(r2, cfg.huber_delta_px)
        if gates is not None:
            gate = gates[0]
        else:
            gate = r2 <= (_GATE_DELTAS * cfg.huber_delta_px) ** 2
            if (valid & gate).sum() < 0.5 * valid.sum():
                # never trim the majority: a coarse initialization inflates
                # every residual and the gate must not empty the problem
                gate = np.ones_like(gate, dtype=bool)
        new_gates[0] = gate
        keep = valid & gate
        cost += float(np.where(keep, cost_terms, 0.0).sum())
        if with_jacobians:
            w = np.where(keep, weights, 0.0)
            dpi = _dpi_batch(cam, x_c) / problem.sigma_stat
            j_cam = -np.einsum("nij,njk->nik", dpi, _dcam_batch(x_c))
            j_pt = -np.einsum("nij,njk->nik", dpi, rot)
            _scatter_reproj(acc, layout, w, res, compiled.stat_cam_cols, j_cam, 6,
                            compiled.stat_pt_cols, j_pt)

    # ---- dyna blocks, vectorized per (cluster, keyframe) group
    if problem.dyna_blocks:
        dyna_gate = (gates[1] if gates is not None
                     else np.ones(len(problem.dyna_blocks), dtype=bool))
        fresh_gate = np.ones(len(problem.dyna_blocks), dtype=bool)
        for group in compiled.dyna_groups:
            cid, kf_index, frozen = group["cid"], group["kf_index"], group["frozen"]
            sigma = problem.sigma_dyna.get(cid, 1.0)
            info = problem.cluster_joints[cid]
            cam_pose = state.cam_pose[kf_index]
            if frozen:
                pose_wo = group["frozen_pose"]
                twist_col = -1
            else:
                key = (cid, kf_index)
                coords = state.twist_coords[key]
                pose_wo = compose(exp_se3(info.basis @ coords), problem.twists[key].snapshot)
                twist_col = layout.twist_col[key]
            p_o = state.points[group["pt_rows"]]
            x_w = pose_wo.apply(p_o)
            x_c = cam_pose.apply(x_w)
            pred, valid = _project_batch(cam, x_c)
            res = (group["z"] - pred) / sigma
            r2 = np.einsum("ni,ni->n", res, res)
            cost_terms, weights = huber_rho(r2, cfg.huber_delta_px)
            if gates is None:
                gate = r2 <= (_GATE_DELTAS * cfg.huber_delta_px) ** 2
                if (valid & gate).sum() < 0.5 * valid.sum():
                    gate = np.ones_like(gate, dtype=bool)
                fresh_gate[group["idxs"]] = gate
            else:
                gate = dyna_gate[group["idxs"]]
            keep = valid & gate
            cost += float(np.where(keep, cost_terms, 0.0).sum())
            if not with_jacobians:
                continue
            w = np.where(keep, weights, 0.0)
            dpi = _dpi_batch(cam, x_c) / sigma
            j_cam = -np.einsum("nij,njk->nik", dpi, _dcam_batch(x_c))
            j_pt = -np.einsum("nij,jk->nik", dpi, cam_pose.rotation @ pose_wo.rotation)
            cam_cols = np.full(len(p_o), layout.cam_col[kf_index], dtype=int)
            if twist_col >= 0:
                snapshot = problem.twists[(cid, kf_index)].snapshot
                q = np.hstack([snapshot.apply(p_o), np.ones((len(p_o), 1))])
                k_mat = se3_dexp(info.basis @ state.twist_coords[(cid, kf_index)]) @ info.basis
                k_rot = np.einsum("ij,sjd->sid", cam_pose.rotation,
                                  k_mat.reshape(4, 3, -1))
                dxc = np.einsum("ns,sid->nid", q, k_rot)
                j_tw = -np.einsum("nij,njd->nid", dpi, dxc)
            else:
                j_tw = None
            _scatter_reproj(acc, layout, w, res, cam_cols, j_cam, 6,
                            group["pt_cols"], j_pt, twist_col=twist_col, j_tw=j_tw)
        new_gates[1] = fresh_gate if gates is None else dyna_gate

    # ---- constant-velocity blocks
    sqrt_w = np.sqrt(problem.weights)
    for block in problem.constvel_blocks:
        info = problem.cluster_joints[block.cluster_id]
        basis = info.basis
        keys = [(block.cluster_id, kf) for kf in block.frames]
        poses = []
        motions = []
        for key in keys:
            coords = state.twist_coords[key]
            motion = exp_se3(basis @ coords)
            motions.append(motion)
            poses.append(compose(motion, problem.twists[key].snapshot))
        t_prev = compose(poses[1], inverse(poses[0]))
        t_next = compose(poses[2], inverse(poses[1]))
        nu_prev = log_se3(t_prev).vector
        nu_next = log_se3(t_next).vector
        proj_joint = info.pi_l @ info.ad_lw
        res = sqrt_w * (proj_joint @ (nu_next - nu_prev))
        cost_term, weight = huber_rho(float(res @ res), cfg.huber_delta_vel)
        cost += cost_term
        if not with_jacobians:
            continue
        sw = np.sqrt(weight)
        cols = [layout.twist_col[key] for key in keys]
        jacs = _constvel_jacobians(problem, layout, state, block, info,
                                   poses, motions, t_prev, t_next)
        entries = [(col, sw * (sqrt_w[:, None] * jac))
                   for col, jac in zip(cols, jacs) if col >= 0]
        res_w = sw * res
        for col_a, jac_a in entries:
            acc.g_p[col_a:col_a + jac_a.shape[1]] += jac_a.T @ res_w
            da = jac_a.shape[1]
            acc.h_pp[col_a:col_a + da, col_a:col_a + da] += jac_a.T @ jac_a
        for i in range(len(entries)):
            for j in range(i + 1, len(entries)):
                col_a, jac_a = entries[i]
                col_b, jac_b = entries[j]
                acc.h_pp[col_a:col_a + jac_a.shape[1], col_b:col_b + jac_b.shape[1]] += jac_a.T @ jac_b
                acc.h_pp[col_b:col_b + jac_b.shape[1], col_a:col_a + jac_a.shape[1]] += jac_b.T @ jac_a

    return cost, acc, new_gates


def _constvel_jacobians(problem, layout, state, block, info, poses, motions,
                        t_prev, t_next):
    """d(joint-frame twist difference)/d(coords) for the three variables."""
    basis = info.basis
    proj_joint = info.pi_l @ info.ad_lw
    dlog_prev = proj_joint @ se3_dlog(t_prev)
    dlog_next = proj_joint @ se3_dlog(t_next)
    keys = [(block.cluster_id, kf) for kf in block.frames]
    snaps = [problem.twists[key].snapshot for key in keys]
    coords = [state.twist_coords[key] for key in keys]

    def d_rel(dlog, m_b, snap_b, snap_a, m_a, c_b, c_a):
        """Derivatives of log(M_b D M_a^-1), D = snap_b snap_a^-1, w.r.t.
        the coordinates of b and a."""
        d_mat = compose(snap_b, inverse(snap_a))
        right = compose(d_mat, inverse(m_a)).matrix()      # K: T_rel = M_b K
        db = dlog @ np.kron(right.T, np.eye(3)) @ se3_dexp(basis @ c_b) @ basis
        left_r = compose(m_b, d_mat).rotation              # L: T_rel = L exp(-B c_a)
        dexp_neg = se3_dexp(-(basis @ c_a))
        rotated = np.einsum("ij,sjd->sid", left_r, dexp_neg.reshape(4, 3, 6)).reshape(12, 6)
        da = dlog @ rotated @ (-basis)
        return db, da

    d_prev_1, d_prev_0 = d_rel(dlog_prev, motions[1], snaps[1], snaps[0],
                               motions[0], coords[1], coords[0])
    d_next_2, d_next_1 = d_rel(dlog_next, motions[2], snaps[2], snaps[1],
                               motions[1], coords[2], coords[1])
    # residual = P_joint (nu_next - nu_prev)
    j0 = -d_prev_0
    j1 = d_next_1 - d_prev_1
    j2 = d_next_2
    return [j0, j1, j2]


def _scatter_reproj(acc: _Accumulator, layout: _Layout, w, res, cam_cols, j_cam,
                    cam_dim, pt_cols, j_pt, twist_col=-1, j_tw=None):
    """Accumulate one reprojection family into the normal equations.

    Vectorized with np.add.at; duplicate indices accumulate. The twist
    column (when present) is constant across the family, as is the camera
    column of a dyna group.
    """
    sw = np.sqrt(w)
    j_cam = j_cam * sw[:, None, None]
    j_pt = j_pt * sw[:, None, None]
    res_w = res * sw[:, None]
    cam_cols = np.asarray(cam_cols)
    pt_cols = np.asarray(pt_cols)
    r6 = np.arange(6)
    r3 = np.arange(3)

    has_cam = cam_cols >= 0
    if has_cam.any():
        idx = cam_cols[has_cam]
        jc = j_cam[has_cam]
        rows = idx[:, None, None] + r6[None, :, None]
        cols = idx[:, None, None] + r6[None, None, :]
        np.add.at(acc.h_pp, (rows, cols), np.einsum("nij,nik->njk", jc, jc))
        np.add.at(acc.g_p, idx[:, None] + r6[None, :],
                  np.einsum("nij,ni->nj", jc, res_w[has_cam]))

    has_pt = pt_cols >= 0
    if has_pt.any():
        jp = j_pt[has_pt]
        np.add.at(acc.h_ll, pt_cols[has_pt] // 3, np.einsum("nij,nik->njk", jp, jp))
        np.add.at(acc.g_l, pt_cols[has_pt][:, None] + r3[None, :],
                  np.einsum("nij,ni->nj", jp, res_w[has_pt]))

    both = has_cam & has_pt
    if both.any():
        rows = cam_cols[both][:, None, None] + r6[None, :, None]
        cols = pt_cols[both][:, None, None] + r3[None, None, :]
        np.add.at(acc.h_pl, (rows, cols),
                  np.einsum("nij,nik->njk", j_cam[both], j_pt[both]))

    if twist_col >= 0 and j_tw is not None:
        j_tw = j_tw * sw[:, None, None]
        dof = j_tw.shape[2]
        acc.h_pp[twist_col:twist_col + dof, twist_col:twist_col + dof] += \
            np.einsum("nij,nik->jk", j_tw, j_tw)
        acc.g_p[twist_col:twist_col + dof] += np.einsum("nij,ni->j", j_tw, res_w)
        if has_cam.any():
            cc = int(cam_cols[0])
            cross = np.einsum("nij,nik->jk", j_cam, j_tw)
            acc.h_pp[cc:cc + 6, twist_col:twist_col + dof] += cross
            acc.h_pp[twist_col:twist_col + dof, cc:cc + 6] += cross.T
        if has_pt.any():
            view = acc.h_pl[twist_col:twist_col + dof]
            n_sel = int(has_pt.sum())
            rows = np.broadcast_to(np.arange(dof)[None, :, None], (n_sel, dof, 3))
            cols = np.broadcast_to(pt_cols[has_pt][:, None, None] + r3[None, None, :],
                                   (n_sel, dof, 3))
            np.add.at(view, (rows, cols),
                      np.einsum("nij,nik->njk", j_tw[has_pt], j_pt[has_pt]))


def solve_ba(problem: BAProblem, cfg: BAConfig = BAConfig()) -> BAReport:
    """Levenberg-Marquardt over the problem; updates variables in place."""
    layout = _Layout(problem)
    state = _State(problem, layout)
    compiled = _Compiled(problem, layout)
    lam = cfg.lambda_init
    cost, _, gates = _linearize(problem, layout, state, cfg, with_jacobians=False,
                                compiled=compiled)
    initial_cost = cost
    iterations = 0
    converged = cost <= 1e-20
    rejects = 0
    while not converged and iterations < cfg.max_iters:
        _, acc, gates = _linearize(problem, layout, state, cfg, with_jacobians=True,
                                   compiled=compiled)
        grad_norm = max(np.max(np.abs(acc.g_p)) if acc.g_p.size else 0.0,
                        np.max(np.abs(acc.g_l)) if acc.g_l.size else 0.0)
        if grad_norm < 1e-12:
            converged = True
            break
        accepted = False
        while not accepted:
            d_pose, d_point = _solve_reduced(acc.h_pp, acc.h_pl, acc.h_ll,
                                             acc.g_p, acc.g_l, lam, cfg.use_schur)
            step_norm = max(np.max(np.abs(d_pose)) if d_pose.size else 0.0,
                            np.max(np.abs(d_point)) if d_point.size else 0.0)
            if step_norm < 1e-14:
                converged = True
                break
            candidate = state.perturbed(problem, layout, d_pose, d_point)
            new_cost, _, _ = _linearize(problem, layout, candidate, cfg,
                                        with_jacobians=False, gates=gates,
                                        compiled=compiled)
            iterations += 1
            if new_cost < cost:
                lam = max(lam / 10.0, 1e-12)
                rejects = 0
                accepted = True
                improvement = cost - new_cost
                state = candidate
                cost = new_cost
                if improvement <= cfg.tol * max(cost, 1e-30) or cost <= 1e-20:
                    converged = True
            else:
                lam *= 10.0
                rejects += 1
                if rejects >= cfg.max_iters or lam > 1e15:
                    raise Diverged(f"bundle adjustment rejected {rejects} "
                                   f"consecutive steps")
            if iterations >= cfg.max_iters:
                break

    for key in layout.cam_keys:
        problem.cameras[key].pose = state.cam_pose[key]
    for key in layout.twist_keys:
        problem.twists[key].coords = state.twist_coords[key]
    for key in layout.point_keys:
        problem.points[key].position = state.point_position(key)
    return BAReport(initial_cost=initial_cost, final_cost=cost,
                    iterations=iterations, converged=converged,
                    used_schur=cfg.use_schur)
