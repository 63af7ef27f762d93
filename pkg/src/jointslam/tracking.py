"""Frame-to-frame robust estimators.

Camera pose is estimated from static-cluster observations only; object
motion is estimated as a twist constrained to the joint freedom space by
optimizing in the d coordinates of the world-frame freedom basis, so the
returned twist lies in range(P) by construction.

Both solvers are Levenberg-Marquardt with Huber weights on residuals
whitened by a MAD scale estimate recomputed once per outer iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import Diverged, InsufficientPoints
from .geometry import PinholeCamera, projection_jacobian
from .joints import JointSpec, TwistProjector, conjugated_projector, world_freedom_basis
from .liegroup import Pose, Twist, compose, exp_se3, se3_dexp, skew

MIN_CAMERA_POINTS = 6
MIN_OBJECT_MATCHES = 3
_GRAD_TOL = 1e-12
_STEP_TOL = 1e-14
_LAMBDA_MAX = 1e15


@dataclass(frozen=True)
class RobustConfig:
    huber_delta: float = 2.0          # pixels, in whitened units
    mad_scale: float = 1.4826
    sigma_floor: float = 0.1          # pixels
    max_lm_iters: int = 30
    lm_lambda_init: float = 1e-4
    convergence_tol: float = 1e-8


@dataclass
class TrackResult:
    estimate: Pose | Twist
    final_cost: float
    inlier_count: int
    iterations: int
    converged: bool
    initial_cost: float = 0.0
    coasted: bool = False


def huber_rho(r2, delta: float):
    """Huber cost and IRLS weight on a squared residual.

    Quadratic (cost = r2) below delta^2 and linear above, with
    weight 1 inside and delta/|r| outside.
    """
    r2 = np.asarray(r2, dtype=float)
    r = np.sqrt(r2)
    outside = r > delta
    cost = np.where(outside, delta * (2.0 * r - delta), r2)
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(outside, delta / np.where(r > 0, r, 1.0), 1.0)
    if r2.ndim == 0:
        return float(cost), float(weight)
    return cost, weight


def mad_sigma(residuals, cfg: RobustConfig) -> float:
    """Robust standard-deviation estimate: scaled median absolute
    deviation, floored at cfg.sigma_floor."""
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("mad_sigma needs at least one residual")
    mad = np.median(np.abs(r - np.median(r)))
    return max(cfg.mad_scale * float(mad), cfg.sigma_floor)


def _pixel_residuals(cam: PinholeCamera, points_c: np.ndarray, pixels: np.ndarray):
    """Residuals z - proj(X_c) for a stack of camera-frame points.

    Measurements may be monocular (u, v) or stereo (u, v, u_right); points
    at or behind the image plane get a False validity flag.
    """
    valid = points_c[:, 2] > 1e-6
    z = np.where(valid, points_c[:, 2], 1.0)
    cols = [cam.fx * points_c[:, 0] / z + cam.cx,
            cam.fy * points_c[:, 1] / z + cam.cy]
    if pixels.shape[1] == 3:
        cols.append(cam.fx * (points_c[:, 0] - cam.baseline) / z + cam.cx)
    pred = np.column_stack(cols)
    return pixels - pred, valid


def _dpi(cam: PinholeCamera, points_c: np.ndarray, width: int) -> np.ndarray:
    """(N, width, 3) projection Jacobians, rows (u, v[, u_right])."""
    z = np.maximum(points_c[:, 2], 1e-6)
    out = np.zeros((len(points_c), width, 3))
    out[:, 0, 0] = cam.fx / z
    out[:, 0, 2] = -cam.fx * points_c[:, 0] / z**2
    out[:, 1, 1] = cam.fy / z
    out[:, 1, 2] = -cam.fy * points_c[:, 1] / z**2
    if width == 3:
        out[:, 2, 0] = cam.fx / z
        out[:, 2, 2] = -cam.fx * (points_c[:, 0] - cam.baseline) / z**2
    return out


# whitened residuals beyond this many huber deltas are trimmed entirely;
# pure Huber keeps a linear outlier pull that can overpower saturated
# inliers at gross-outlier fractions around 30%
_GATE_DELTAS = 3.0


def _robustify(res: np.ndarray, valid: np.ndarray, sigma: float, cfg: RobustConfig,
               gate: np.ndarray | None = None):
    """Whiten, Huber-weight and gate residuals.

    The gate is computed from these residuals unless one is supplied; a
    caller evaluating a trial step must reuse the reference gate so the
    accept/reject comparison stays consistent.
    """
    white = res / sigma
    r2 = np.einsum("ni,ni->n", white, white)
    if gate is None:
        gate = r2 <= (_GATE_DELTAS * cfg.huber_delta) ** 2
        kept = valid & gate
        # never trim the majority: from a coarse initialization the gate
        # would otherwise lock onto whatever agrees with the bad guess
        if kept.sum() < max(MIN_CAMERA_POINTS, 0.5 * valid.sum()):
            gate = np.ones_like(gate, dtype=bool)
    keep = valid & gate
    cost_terms, weights = huber_rho(r2, cfg.huber_delta)
    cost_terms = np.where(keep, cost_terms, 0.0)
    weights = np.where(keep, weights, 0.0)
    return white, float(cost_terms.sum()), weights, gate


def _solve_damped(h: np.ndarray, g: np.ndarray, lam: float) -> np.ndarray:
    damped = h + lam * np.diag(np.maximum(np.diag(h), 1e-12))
    return np.linalg.solve(damped, -g)


class _LmLoop:
    """Shared accept/reject bookkeeping for the trackers."""

    def __init__(self, cfg: RobustConfig):
        self.cfg = cfg
        self.lam = cfg.lm_lambda_init
        self.iterations = 0
        self.consecutive_rejects = 0
        self.converged = False

    def out_of_budget(self) -> bool:
        return self.iterations >= self.cfg.max_lm_iters

    def accept(self, old_cost: float, new_cost: float) -> bool:
        self.iterations += 1
        if new_cost < old_cost:
            self.lam = max(self.lam / 10.0, 1e-12)
            self.consecutive_rejects = 0
            if old_cost - new_cost <= self.cfg.convergence_tol * max(old_cost, 1e-30):
                self.converged = True
            return True
        self.lam *= 10.0
        self.consecutive_rejects += 1
        if self.consecutive_rejects >= self.cfg.max_lm_iters or self.lam > _LAMBDA_MAX:
            raise Diverged(f"no damped step decreased the cost after "
                           f"{self.consecutive_rejects} attempts")
        return False


def track_camera(static_matches, cam: PinholeCamera, initial_pose_cw: Pose,
                 cfg: RobustConfig = RobustConfig()) -> TrackResult:
    """Camera pose from observations of static points.

    static_matches: list of (pixel z (2,), world point (3,)) pairs. Only
    static-cluster observations may be fed here; the pipeline enforces it.
    Minimizes the robustified reprojection cost over a left-multiplied
    6-DoF twist increment of T_cw.
    """
    if len(static_matches) < MIN_CAMERA_POINTS:
        raise InsufficientPoints(f"camera tracking needs >= {MIN_CAMERA_POINTS} "
                                 f"static points, got {len(static_matches)}")
    pixels = np.array([m[0] for m in static_matches], dtype=float)
    world = np.array([m[1] for m in static_matches], dtype=float)
    pose = initial_pose_cw

    def evaluate(p: Pose):
        points_c = world @ p.rotation.T + p.translation
        res, valid = _pixel_residuals(cam, points_c, pixels)
        return points_c, res, valid

    loop = _LmLoop(cfg)
    sigma = np.inf
    cost = np.inf
    first_cost = None
    while not loop.converged and not loop.out_of_budget():
        points_c, res, valid = evaluate(pose)
        if int(valid.sum()) < MIN_CAMERA_POINTS:
            raise InsufficientPoints("too few points in front of the camera")
        # the scale may only tighten within one solve: letting it grow would
        # flatten the whitened cost and reward uniformly bad fits
        sigma = min(sigma, mad_sigma(res[valid], cfg))
        white, cost, weights, gate = _robustify(res, valid, sigma, cfg)
        if first_cost is None:
            first_cost = cost
        if cost <= 1e-20:
            loop.converged = True
            break
        # residual Jacobian wrt the left increment: -dpi/dXc @ [I | -skew(Xc)]
        dpi = _dpi(cam, points_c, pixels.shape[1])
        dx = np.zeros((len(world), 3, 6))
        dx[:, :, :3] = np.eye(3)
        dx[:, 0, 4], dx[:, 0, 5] = points_c[:, 2], -points_c[:, 1]
        dx[:, 1, 3], dx[:, 1, 5] = -points_c[:, 2], points_c[:, 0]
        dx[:, 2, 3], dx[:, 2, 4] = points_c[:, 1], -points_c[:, 0]
        jac = -np.einsum("nij,njk->nik", dpi, dx) / sigma
        scaled = jac * weights[:, None, None]
        h = np.einsum("nij,nik->jk", scaled, jac)
        g = np.einsum("nij,ni->j", scaled, white)
        if np.max(np.abs(g)) < _GRAD_TOL:
            loop.converged = True
            break
        accepted = False
        while not accepted:
            step = _solve_damped(h, g, loop.lam)
            if np.max(np.abs(step)) < _STEP_TOL:
                loop.converged = True
                break
            candidate = compose(exp_se3(step), pose)
            _, res_new, valid_new = evaluate(candidate)
            _, new_cost, _, _ = _robustify(res_new, valid_new, sigma, cfg, gate=gate)
            accepted = loop.accept(cost, new_cost)
            if accepted:
                pose = candidate
                cost = new_cost

    _, res, valid = evaluate(pose)
    if valid.any():
        sigma = min(sigma, mad_sigma(res[valid], cfg))
    white, final_cost, weights, _ = _robustify(res, valid, sigma, cfg)
    inliers = int(np.sum(valid & (np.einsum("ni,ni->n", white, white)
                                  <= cfg.huber_delta**2)))
    init_c = world @ initial_pose_cw.rotation.T + initial_pose_cw.translation
    init_res, init_valid = _pixel_residuals(cam, init_c, pixels)
    _, initial_cost, _, _ = _robustify(init_res, init_valid, sigma, cfg)
    return TrackResult(estimate=pose, final_cost=final_cost, inlier_count=inliers,
                       iterations=loop.iterations, converged=loop.converged,
                       initial_cost=initial_cost)


def _twist_basis(joint: JointSpec | None, proj: TwistProjector | None):
    joint = joint or JointSpec.free()
    tp = proj or conjugated_projector(joint)
    basis = world_freedom_basis(joint)
    return tp, basis


def track_object_twist(cluster, matches, frame_index: int, cam: PinholeCamera,
                       pose_cw: Pose, cfg: RobustConfig = RobustConfig(),
                       projector: TwistProjector | None = None,
                       initial_twist: Twist | None = None,
                       update_cluster: bool = True) -> TrackResult:
    """World-frame twist of a dynamic cluster between the previous frame
    and frame_index, constrained to its joint freedom space.

    matches: list of (point_id, object-frame position (3,), pixel z (2,)).
    The optimization runs in the d freedom coordinates, so the returned
    twist satisfies xi == P xi; the cluster pose history is updated with
    exp(P xi) composed onto the previous pose.
    """
    if len(matches) < MIN_OBJECT_MATCHES:
        raise InsufficientPoints(f"object tracking needs >= {MIN_OBJECT_MATCHES} "
                                 f"matches, got {len(matches)}")
    prev_frames = [f for f in cluster.poses if f < frame_index]
    if not prev_frames:
        raise ValueError(f"cluster {cluster.id} has no pose before frame {frame_index}")
    prev_pose = cluster.poses[max(prev_frames)]

    tp, basis = _twist_basis(cluster.joint, projector)
    dof = basis.shape[1]
    pixels = np.array([m[2] for m in matches], dtype=float)
    p_obj = np.array([m[1] for m in matches], dtype=float)
    # world-frame homogeneous points at the previous pose, fixed over the solve
    q = np.hstack([prev_pose.apply(p_obj), np.ones((len(matches), 1))])
    r_cw, t_cw = pose_cw.rotation, pose_cw.translation

    def evaluate(coords: np.ndarray):
        motion = exp_se3(basis @ coords)
        x_w = q @ np.hstack([motion.rotation, motion.translation[:, None]]).T
        x_c = x_w @ r_cw.T + t_cw
        res, valid = _pixel_residuals(cam, x_c, pixels)
        return x_c, res, valid

    if dof == 0:
        coords = np.zeros(0)
        _, res, valid = evaluate(coords)
        sigma = mad_sigma(res[valid], cfg) if valid.any() else cfg.sigma_floor
        _, cost, _, _ = _robustify(res, valid, sigma, cfg)
        result = TrackResult(estimate=Twist.zero(), final_cost=cost,
                             inlier_count=int(valid.sum()), iterations=0,
                             converged=True, initial_cost=cost)
        if update_cluster:
            cluster.poses[frame_index] = prev_pose
            cluster.twists[frame_index] = Twist.zero()
        return result

    coords = np.zeros(dof)
    if initial_twist is not None:
        coords, *_ = np.linalg.lstsq(basis, initial_twist.vector, rcond=None)

    loop = _LmLoop(cfg)
    sigma = np.inf
    cost = np.inf
    while not loop.converged and not loop.out_of_budget():
        x_c, res, valid = evaluate(coords)
        if int(valid.sum()) < MIN_OBJECT_MATCHES:
            raise InsufficientPoints("too few object points in front of the camera")
        sigma = min(sigma, mad_sigma(res[valid], cfg))
        white, cost, weights, gate = _robustify(res, valid, sigma, cfg)
        if cost <= 1e-20:
            loop.converged = True
            break
        dpi = _dpi(cam, x_c, pixels.shape[1])
        # d vec(exp(B c)) / dc, folded with the camera rotation
        k = se3_dexp(basis @ coords) @ basis          # (12, d)
        k_rot = np.einsum("ij,sjd->sid", r_cw, k.reshape(4, 3, dof))
        dxc = np.einsum("ns,sid->nid", q, k_rot)      # (N, 3, d)
        jac = -np.einsum("nij,njd->nid", dpi, dxc) / sigma
        scaled = jac * weights[:, None, None]
        h = np.einsum("nij,nik->jk", scaled, jac)
        g = np.einsum("nij,ni->j", scaled, white)
        if np.max(np.abs(g)) < _GRAD_TOL:
            loop.converged = True
            break
        accepted = False
        while not accepted:
            step = _solve_damped(h, g, loop.lam)
            if np.max(np.abs(step)) < _STEP_TOL:
                loop.converged = True
                break
            candidate = coords + step
            _, res_new, valid_new = evaluate(candidate)
            _, new_cost, _, _ = _robustify(res_new, valid_new, sigma, cfg, gate=gate)
            accepted = loop.accept(cost, new_cost)
            if accepted:
                coords = candidate
                cost = new_cost

    twist_vec = basis @ coords
    _, res, valid = evaluate(coords)
    if valid.any():
        sigma = min(sigma, mad_sigma(res[valid], cfg))
    white, final_cost, _, _ = _robustify(res, valid, sigma, cfg)
    inliers = int(np.sum(valid & (np.einsum("ni,ni->n", white, white)
                                  <= cfg.huber_delta**2)))
    _, res0, valid0 = evaluate(np.zeros(dof))
    _, initial_cost, _, _ = _robustify(res0, valid0, sigma, cfg)
    result = TrackResult(estimate=Twist.from_vector(twist_vec), final_cost=final_cost,
                         inlier_count=inliers, iterations=loop.iterations,
                         converged=loop.converged, initial_cost=initial_cost)
    if update_cluster:
        cluster.poses[frame_index] = compose(exp_se3(twist_vec), prev_pose)
        cluster.twists[frame_index] = Twist.from_vector(twist_vec)
    return result


def refine_with_map_projection(cluster, frame_observations, matches,
                               result: TrackResult, frame_index: int,
                               cam: PinholeCamera, pose_cw: Pose,
                               cfg: RobustConfig, search_radius_px: float,
                               point_positions: dict,
                               projector: TwistProjector | None = None,
                               update_cluster: bool = True):
    """Search extra matches by projecting cluster map points with the
    current twist, then re-solve; keeps the input estimate when the
    refinement does not improve the per-inlier cost.

    Returns (TrackResult, match list); the match list is always a superset
    of the input matches.
    """
    if search_radius_px <= 0.0 or not frame_observations:
        return result, matches
    matched_ids = {pid for pid, _, _ in matches}
    candidates = [obs for obs in frame_observations
                  if obs.cluster_id == cluster.id and obs.point_id not in matched_ids]
    if not candidates:
        return result, matches
    prev_frames = [f for f in cluster.poses if f < frame_index]
    prev_pose = cluster.poses[max(prev_frames)] if prev_frames else cluster.poses[frame_index]
    motion = exp_se3(result.estimate.vector if isinstance(result.estimate, Twist)
                     else np.zeros(6))
    predicted = compose(motion, prev_pose)

    extra = []
    used_obs = set()
    for pid, p_o in sorted(point_positions.items()):
        if pid in matched_ids:
            continue
        x_c = pose_cw.apply(predicted.apply(p_o))
        if x_c[2] <= 1e-6:
            continue
        uv = np.array([cam.fx * x_c[0] / x_c[2] + cam.cx,
                       cam.fy * x_c[1] / x_c[2] + cam.cy])
        best = None
        best_d = search_radius_px
        for k, obs in enumerate(candidates):
            if k in used_obs:
                continue
            d = float(np.hypot(obs.u - uv[0], obs.v - uv[1]))
            if d <= best_d:
                best, best_d = k, d
        if best is not None:
            used_obs.add(best)
            obs = candidates[best]
            if matches and len(matches[0][2]) == 3:
                z_new = np.array([obs.u, obs.v, obs.u - obs.disparity])
            else:
                z_new = np.array([obs.u, obs.v])
            extra.append((obs.point_id, p_o, z_new))
    if not extra:
        return result, matches

    merged = list(matches) + extra
    refined = track_object_twist(cluster, merged, frame_index, cam, pose_cw, cfg,
                                 projector=projector,
                                 initial_twist=result.estimate
                                 if isinstance(result.estimate, Twist) else None,
                                 update_cluster=False)
    old_per_inlier = result.final_cost / max(result.inlier_count, 1)
    new_per_inlier = refined.final_cost / max(refined.inlier_count, 1)
    if refined.inlier_count >= result.inlier_count and new_per_inlier <= old_per_inlier:
        if update_cluster:
            prev = cluster.poses[max(f for f in cluster.poses if f < frame_index)]
            cluster.poses[frame_index] = compose(exp_se3(refined.estimate.vector), prev)
            cluster.twists[frame_index] = refined.estimate
        return refined, merged
    return result, matches


def object_twist_jacobian(point_obj, pose_cw: Pose, prev_pose_wo: Pose,
                          p_world: np.ndarray, cam: PinholeCamera,
                          xi) -> np.ndarray:
    """2x6 Jacobian of the constrained reprojection residual
    z - proj(T_cw exp(P xi) T_wo p_o) with respect to xi.

    Chain: dpi/dXc (q^T kron R_cw) dexp(P xi) P, with q the homogeneous
    world point at the previous pose. Columns outside the freedom space
    vanish: J (I - P) = 0.
    """
    xi = xi.vector if isinstance(xi, Twist) else np.asarray(xi, dtype=float).reshape(6)
    q = np.append(prev_pose_wo.apply(np.asarray(point_obj, dtype=float)), 1.0)
    projected_xi = p_world @ xi
    motion = exp_se3(projected_xi)
    x_w = motion.rotation @ q[:3] + motion.translation * q[3]
    x_c = pose_cw.apply(x_w)
    dpi = projection_jacobian(cam, x_c)  # raises BehindCamera
    chain = np.kron(q.reshape(1, 4), pose_cw.rotation)  # (3, 12)
    return -dpi @ chain @ se3_dexp(projected_xi) @ p_world
