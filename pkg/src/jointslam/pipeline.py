"""End-to-end experiment: simulate, track, refine, evaluate.

Per frame: the camera is tracked on static-class observations against the
map, dynamic clusters are tracked as joint-constrained twists from oracle
associations, every frame becomes a temporal keyframe and old ones are
culled, and a windowed bundle adjustment runs every few frames. At the end
the estimated trajectories are scored (ATE, RPE, out-of-plane drift) and
written out together with per-frame twist tables.

Cluster semantics (class labels per cluster id) come from the simulator's
segmentation oracle; whether a class may move, and which joint its objects
get, is configuration.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bundle import (
    BAConfig,
    DEFAULT_TWIST_WEIGHTS,
    build_problem,
    solve_ba,
)
from .errors import Degenerate, DisparityTooSmall, InsufficientPoints, JointSlamError, NoConsensus
from .geometry import PlaneModel, fit_plane_ransac, triangulate_stereo
from .joints import (
    DEFAULT_JOINT_TABLE,
    JointSpec,
    JointType,
    joint_from_plane,
    parse_joint_table,
)
from .liegroup import Pose, Twist, compose, exp_se3, inverse, log_se3
from .metrics import Trajectory, ate, out_of_plane_drift, rpe
from .simulate import (
    SceneConfig,
    associate,
    generate_scene,
    load_scene_config,
    with_free_joints,
)
from .tracking import (
    RobustConfig,
    refine_with_map_projection,
    track_camera,
    track_object_twist,
)
from .worldmap import DEFAULT_DYNAMIC_CLASSES, Cluster, MapPoint, WorldMap, fuse_semantic_vote


@dataclass(frozen=True)
class PipelineConfig:
    robust: RobustConfig = field(default_factory=RobustConfig)
    ba: BAConfig = field(default_factory=BAConfig)
    ba_interval: int = 5              # frames between windowed refinements; 0 disables
    ba_window: int = 15               # temporal keyframes per local refinement
    constrained: bool = True          # False turns every joint into a free joint
    joint_table: dict = field(default_factory=lambda: dict(DEFAULT_JOINT_TABLE))
    dynamic_classes: frozenset = DEFAULT_DYNAMIC_CLASSES
    search_radius_px: float = 4.0
    plane_min_points: int = 30
    plane_refit_interval: int = 10
    joint_recompute_deg: float = 0.5  # hysteresis on joint-plane normal changes
    ransac_iters: int = 200
    ransac_tol: float = 0.05
    lost_after: int = 10
    twist_weights: tuple = tuple(DEFAULT_TWIST_WEIGHTS)
    # stereo depth error grows ~ z^2: points are admitted to the map only
    # once triangulated closer than this multiple of the baseline
    max_depth_baselines: float = 40.0

    def to_json(self, path):
        doc = {
            "robust": {k: getattr(self.robust, k) for k in
                       ("huber_delta", "mad_scale", "sigma_floor", "max_lm_iters",
                        "lm_lambda_init", "convergence_tol")},
            "ba": {k: getattr(self.ba, k) for k in
                   ("max_iters", "lambda_init", "tol", "use_schur",
                    "huber_delta_px", "huber_delta_vel")},
            "ba_interval": self.ba_interval,
            "constrained": self.constrained,
            "joint_table": {k: [v[0], v[1].value] for k, v in self.joint_table.items()},
            "dynamic_classes": sorted(self.dynamic_classes),
            "search_radius_px": self.search_radius_px,
            "plane_min_points": self.plane_min_points,
            "plane_refit_interval": self.plane_refit_interval,
            "joint_recompute_deg": self.joint_recompute_deg,
            "ransac_iters": self.ransac_iters,
            "ransac_tol": self.ransac_tol,
            "lost_after": self.lost_after,
            "twist_weights": list(self.twist_weights),
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json(path) -> "PipelineConfig":
        with open(path) as fh:
            doc = json.load(fh)
        kwargs = {}
        if "robust" in doc:
            kwargs["robust"] = RobustConfig(**doc["robust"])
        if "ba" in doc:
            kwargs["ba"] = BAConfig(**doc["ba"])
        if "joint_table" in doc:
            kwargs["joint_table"] = parse_joint_table(doc["joint_table"])
        if "dynamic_classes" in doc:
            kwargs["dynamic_classes"] = frozenset(doc["dynamic_classes"])
        for key in ("ba_interval", "constrained", "search_radius_px",
                    "plane_min_points", "plane_refit_interval", "joint_recompute_deg",
                    "ransac_iters", "ransac_tol", "lost_after"):
            if key in doc:
                kwargs[key] = doc[key]
        if "twist_weights" in doc:
            kwargs["twist_weights"] = tuple(doc["twist_weights"])
        return PipelineConfig(**kwargs)


@dataclass
class ObjectReport:
    ate_m: float
    rpe_t_m_per_frame: float
    rpe_r_deg_per_frame: float
    out_of_plane_drift_m: float
    tracked_frames: int


@dataclass
class ExperimentReport:
    seed: int
    n_frames: int
    camera_ate_m: float
    camera_rpe_t_m_per_frame: float
    camera_rpe_r_deg_per_frame: float
    objects: dict            # cluster id -> ObjectReport
    runtime_s: float

    def lines(self) -> list[str]:
        """Deterministic key: value lines (runtime intentionally absent)."""
        out = [
            f"seed: {self.seed}",
            f"frames: {self.n_frames}",
            f"camera_ate_m: {self.camera_ate_m:.9g}",
            f"camera_rpe_t_m_per_frame: {self.camera_rpe_t_m_per_frame:.9g}",
            f"camera_rpe_r_deg_per_frame: {self.camera_rpe_r_deg_per_frame:.9g}",
        ]
        for cid in sorted(self.objects):
            rep = self.objects[cid]
            out.append(f"object_{cid}_ate_m: {rep.ate_m:.9g}")
            out.append(f"object_{cid}_rpe_t_m_per_frame: {rep.rpe_t_m_per_frame:.9g}")
            out.append(f"object_{cid}_rpe_r_deg_per_frame: {rep.rpe_r_deg_per_frame:.9g}")
            out.append(f"object_{cid}_out_of_plane_drift_m: {rep.out_of_plane_drift_m:.9g}")
            out.append(f"object_{cid}_tracked_frames: {rep.tracked_frames}")
        return out


class PipelineEngine:
    """Stateful tracker over a synthetic scene."""

    def __init__(self, scene: SceneConfig, cfg: PipelineConfig = PipelineConfig()):
        if not cfg.constrained:
            scene = with_free_joints(scene)
        self.scene = scene
        self.cfg = cfg
        self.gt = generate_scene(scene)
        self.cam = scene.camera
        self.world = WorldMap(covisibility_min_shared=cfg.plane_min_points)
        self.camera_est: dict[int, Pose] = {}      # frame -> T_cw
        self.planes: dict[int, PlaneModel] = {}    # parent cluster -> fitted plane
        # first sightings of static points await a confirming second view
        self.static_candidates: dict[int, tuple] = {}
        self.prev_obs = []
        self.track_log: list[dict] = []

    # -- helpers -------------------------------------------------------------

    def class_of(self, cluster_id: int) -> str:
        # segmentation oracle: the simulator provides per-cluster labels
        return self.gt.cluster_classes[cluster_id]

    def is_dynamic_class(self, label: str) -> bool:
        return label in self.cfg.dynamic_classes

    def _joint_for(self, cluster_id: int, anchor) -> JointSpec:
        label = self.class_of(cluster_id)
        entry = self.cfg.joint_table.get(label)
        if not self.cfg.constrained or entry is None:
            return JointSpec.free()
        parent_label, jtype = entry
        plane = self._parent_plane(parent_label)
        if plane is None or jtype is JointType.FREE:
            return JointSpec.free()
        return joint_from_plane(plane, jtype, anchor, parent_class=parent_label,
                                child_class=label)

    def _parent_plane(self, parent_label: str) -> PlaneModel | None:
        for cid, plane in self.planes.items():
            if self.class_of(cid) == parent_label:
                return plane
        return None

    def _fit_planes(self):
        parents = {entry[0] for entry in self.cfg.joint_table.values()}
        for cluster in self.world.static_clusters():
            label = self.class_of(cluster.id)
            if label not in parents or len(cluster.points) < self.cfg.plane_min_points:
                continue
            pts = np.array([self.world.points[pid].position for pid in cluster.points])
            try:
                plane, _ = fit_plane_ransac(pts, max_iters=self.cfg.ransac_iters,
                                            inlier_tol=self.cfg.ransac_tol,
                                            seed=self.scene.seed * 1000 + cluster.id)
            except (NoConsensus, Degenerate):
                continue
            self.planes[cluster.id] = plane

    def _maintain_joints(self):
        threshold = np.cos(np.deg2rad(self.cfg.joint_recompute_deg))
        for cluster in self.world.dynamic_clusters():
            if cluster.lost or not cluster.poses:
                continue
            label = self.class_of(cluster.id)
            entry = self.cfg.joint_table.get(label)
            if entry is None or not self.cfg.constrained:
                continue
            parent_label, jtype = entry
            plane = self._parent_plane(parent_label)
            if plane is None or jtype is JointType.FREE:
                continue
            anchor = cluster.poses[max(cluster.poses)].translation
            if cluster.joint is None or cluster.joint.jtype is JointType.FREE:
                cluster.joint = joint_from_plane(plane, jtype, anchor,
                                                 parent_class=parent_label,
                                                 child_class=label)
                continue
            old_normal = cluster.joint.frame.rotation[:, 2]
            if float(old_normal @ plane.unit_normal) < threshold:
                cluster.joint = joint_from_plane(plane, jtype, anchor,
                                                 parent_class=parent_label,
                                                 child_class=label)

    def _triangulate_world(self, obs, pose_cw: Pose, depth_gate: bool = True):
        # the depth gate protects the long-lived static map from far-stereo
        # noise; object points are local and densely re-estimated, so they
        # skip it (a partial cloud would also bias the object anchor)
        x_c = triangulate_stereo(self.cam, obs)
        if depth_gate and x_c[2] > self.cfg.max_depth_baselines * self.cam.baseline:
            raise DisparityTooSmall(f"depth {x_c[2]:.1f} m unreliable")
        return inverse(pose_cw).apply(x_c)

    ADMISSION_TOL_PX = 3.0

    def _add_new_points(self, observations, pose_cw: Pose):
        """Admit observations of unknown points.

        Dynamic-cluster points are triangulated immediately (object tracking
        needs them within a frame or two). A static point stays a candidate
        until a second sighting confirms its reprojection: a point born from
        a gross-outlier measurement never agrees with a later view, so it
        never reaches the map.
        """
        for obs in observations:
            if obs.point_id in self.world.points:
                fuse_semantic_vote(self.world.points[obs.point_id],
                                   self.class_of(obs.cluster_id))
                continue
            label = self.class_of(obs.cluster_id)
            dynamic = self.is_dynamic_class(label)
            cluster = self.world.clusters.get(obs.cluster_id)
            if cluster is None:
                continue  # dynamic clusters are created explicitly
            if not dynamic:
                self._admit_static(obs, pose_cw)
                continue
            try:
                x_w = self._triangulate_world(obs, pose_cw, depth_gate=False)
            except DisparityTooSmall:
                continue
            frame = max(cluster.poses)
            position = inverse(cluster.poses[frame]).apply(x_w)
            point = MapPoint(id=obs.point_id, position=position,
                             owner_cluster=obs.cluster_id,
                             created_frame=obs.frame_index)
            fuse_semantic_vote(point, label)
            self.world.add_point(point)

    def _admit_static(self, obs, pose_cw: Pose, tol_px: float | None = None):
        candidate = self.static_candidates.get(obs.point_id)
        if candidate is None:
            try:
                x_w = self._triangulate_world(obs, pose_cw)
            except DisparityTooSmall:
                return
            self.static_candidates[obs.point_id] = (obs, x_w)
            return
        first_obs, x_w = candidate
        if first_obs.frame_index == obs.frame_index:
            return
        x_c = pose_cw.apply(x_w)
        consistent = False
        if x_c[2] > 1e-6:
            pred_u = self.cam.fx * x_c[0] / x_c[2] + self.cam.cx
            pred_v = self.cam.fy * x_c[1] / x_c[2] + self.cam.cy
            pred_ur = pred_u - self.cam.fx * self.cam.baseline / x_c[2]
            err = np.linalg.norm([obs.u - pred_u, obs.v - pred_v,
                                  (obs.u - obs.disparity) - pred_ur])
            consistent = err <= (tol_px or self.ADMISSION_TOL_PX)
        if not consistent:
            # either sighting may be the bad one: restart from this view
            del self.static_candidates[obs.point_id]
            self._admit_static(obs, pose_cw)
            return
        del self.static_candidates[obs.point_id]
        point = MapPoint(id=obs.point_id, position=x_w,
                         owner_cluster=obs.cluster_id,
                         created_frame=first_obs.frame_index)
        fuse_semantic_vote(point, self.class_of(first_obs.cluster_id))
        fuse_semantic_vote(point, self.class_of(obs.cluster_id))
        self.world.add_point(point)

    def _bootstrap_confirm(self, observations, pose_cw: Pose):
        """Admit frame-0 candidates before the first tracked frame.

        There is no map to track against yet, so confirmation runs against
        the motion-model pose with a tolerance that covers one frame of
        camera motion; gross-outlier candidates are still hundreds of
        pixels off and stay out.
        """
        for obs in observations:
            if obs.point_id in self.world.points:
                continue
            if self.is_dynamic_class(self.class_of(obs.cluster_id)):
                continue
            if self.world.clusters.get(obs.cluster_id) is None:
                continue
            self._admit_static(obs, pose_cw, tol_px=25.0)

    def _create_dynamic_cluster(self, cluster_id: int, observations, pose_cw: Pose):
        """Anchor a new object at the centroid of its triangulated points."""
        positions = []
        usable = []
        for obs in observations:
            try:
                positions.append(self._triangulate_world(obs, pose_cw, depth_gate=False))
                usable.append(obs)
            except DisparityTooSmall:
                continue
        if len(usable) < 3:
            return None
        centroid = np.mean(positions, axis=0)
        label = self.class_of(cluster_id)
        cluster = Cluster(id=cluster_id, class_label=label, is_static=False)
        cluster.joint = self._joint_for(cluster_id, centroid)
        frame = usable[0].frame_index
        cluster.poses[frame] = Pose(np.eye(3), centroid)
        cluster.twists[frame] = Twist.zero()
        self.world.add_cluster(cluster)
        for obs, x_w in zip(usable, positions):
            point = MapPoint(id=obs.point_id, position=x_w - centroid,
                             owner_cluster=cluster_id)
            fuse_semantic_vote(point, label)
            self.world.add_point(point)
        return cluster

    # -- per-frame step ------------------------------------------------------

    def step(self, frame: int):
        cfg = self.cfg
        observations = render_observations_cached(self.gt, frame)
        timestamp = frame / self.scene.frame_rate
        by_cluster: dict[int, list] = {}
        for obs in observations:
            by_cluster.setdefault(obs.cluster_id, []).append(obs)

        if frame == 0:
            pose_cw = self.gt.camera_pose_cw(0)  # the start defines the world frame
        else:
            if frame == 1:
                self._bootstrap_confirm(observations, self._predict_camera(1))
            static_pairs = []
            for obs in observations:
                if self.is_dynamic_class(self.class_of(obs.cluster_id)):
                    continue
                point = self.world.points.get(obs.point_id)
                if point is not None:
                    static_pairs.append((obs, point))
            matches = [(np.array([o.u, o.v, o.u - o.disparity]), p.position)
                       for o, p in static_pairs]
            init = self._best_init(frame, matches)
            result = track_camera(matches, self.cam, init, cfg.robust)
            pose_cw = result.estimate
            self._cull_misfit_points(static_pairs, pose_cw)
        self.camera_est[frame] = pose_cw

        # static clusters exist from the first time their class is seen
        for cid, cluster_obs in sorted(by_cluster.items()):
            label = self.class_of(cid)
            if self.is_dynamic_class(label):
                continue
            if cid not in self.world.clusters:
                self.world.add_cluster(Cluster(id=cid, class_label=label,
                                               is_static=True))
        static_obs = [o for o in observations
                      if not self.is_dynamic_class(self.class_of(o.cluster_id))]
        self._add_new_points(static_obs, pose_cw)
        if frame <= 1 or (cfg.plane_refit_interval and
                          frame % cfg.plane_refit_interval == 0):
            self._fit_planes()
            self._maintain_joints()

        # dynamic objects
        assoc = associate(self.prev_obs, observations, self.scene) if frame else []
        assoc_by_cluster: dict[int, list] = {}
        for prev, curr in assoc:
            if self.is_dynamic_class(self.class_of(curr.cluster_id)):
                assoc_by_cluster.setdefault(curr.cluster_id, []).append((prev, curr))
        for cid, cluster_obs in sorted(by_cluster.items()):
            label = self.class_of(cid)
            if not self.is_dynamic_class(label):
                continue
            cluster = self.world.clusters.get(cid)
            if cluster is None:
                self._create_dynamic_cluster(cid, cluster_obs, pose_cw)
                continue
            if cluster.lost or frame == 0:
                continue
            self._track_object(cluster, assoc_by_cluster.get(cid, []),
                               cluster_obs, frame, pose_cw)
            self._add_new_points(cluster_obs, pose_cw)

        kf_obs = [o for o in observations if o.point_id in self.world.points]
        self.world.promote_temporal_keyframe(frame, timestamp, pose_cw, kf_obs)
        self.world.cull_keyframes(now=timestamp)

        if cfg.ba_interval and frame > 0 and frame % cfg.ba_interval == 0:
            self.run_window_ba(window=cfg.ba_window)
        self.prev_obs = observations

    def _cull_misfit_points(self, static_pairs, pose_cw: Pose,
                            threshold_px: float = 4.0):
        """Delete landmarks that repeatedly misfit their observations.

        Points triangulated from a gross-outlier observation are wrong for
        every later view and die here within two sightings; a good point hit
        by one outlier pixel only collects a single strike.
        """
        doomed = []
        for obs, point in static_pairs:
            x_c = pose_cw.apply(point.position)
            point.seen_count += 1
            if x_c[2] <= 1e-6:
                point.misfit_count += 1
            else:
                pred_u = self.cam.fx * x_c[0] / x_c[2] + self.cam.cx
                pred_v = self.cam.fy * x_c[1] / x_c[2] + self.cam.cy
                pred_ur = pred_u - self.cam.fx * self.cam.baseline / x_c[2]
                err = np.linalg.norm([obs.u - pred_u, obs.v - pred_v,
                                      (obs.u - obs.disparity) - pred_ur])
                if err > threshold_px:
                    point.misfit_count += 1
            if point.misfit_count >= 2 and point.misfit_count * 2 > point.seen_count:
                doomed.append(point.id)
        for pid in doomed:
            self.world.remove_point(pid)

    def _predict_camera(self, frame: int) -> Pose:
        prev = self.camera_est.get(frame - 1)
        if prev is None:
            return Pose.identity()
        before = self.camera_est.get(frame - 2)
        if before is None:
            return prev
        return compose(compose(prev, inverse(before)), prev)

    def _best_init(self, frame: int, matches) -> Pose:
        """Previous pose unless the motion-model prediction is clearly
        better.

        Extrapolating the init is poison in steady state: the solver leaves
        a fraction of the init error along its softest direction every
        frame, and an extrapolated init compounds that fraction
        geometrically. The prediction is only worth it when the camera
        really outruns the previous pose's convergence basin.
        """
        predicted = self._predict_camera(frame)
        previous = self.camera_est.get(frame - 1)
        if previous is None or not matches:
            return predicted
        pixels = np.array([m[0] for m in matches])
        world = np.array([m[1] for m in matches])

        def median_residual(pose: Pose) -> float:
            x_c = world @ pose.rotation.T + pose.translation
            z = np.maximum(x_c[:, 2], 1e-6)
            pred = np.column_stack([self.cam.fx * x_c[:, 0] / z + self.cam.cx,
                                    self.cam.fy * x_c[:, 1] / z + self.cam.cy])
            return float(np.median(np.linalg.norm(pixels[:, :2] - pred, axis=1)))

        med_prev = median_residual(previous)
        if med_prev > 2.0 and median_residual(predicted) < 0.5 * med_prev:
            return predicted
        return previous

    def _track_object(self, cluster: Cluster, pairs, cluster_obs, frame: int,
                      pose_cw: Pose):
        cfg = self.cfg
        matches = []
        for prev, curr in pairs:
            point = self.world.points.get(prev.point_id)
            if point is None or point.owner_cluster != cluster.id:
                continue
            matches.append((prev.point_id, point.position,
                            np.array([curr.u, curr.v, curr.u - curr.disparity])))
        prev_frame = cluster.latest_frame()
        initial = cluster.twists.get(prev_frame)
        try:
            result = track_object_twist(cluster, matches, frame, self.cam, pose_cw,
                                        cfg.robust, initial_twist=initial)
            positions = {pid: self.world.points[pid].position
                         for pid in cluster.points if pid in self.world.points}
            result, _ = refine_with_map_projection(
                cluster, cluster_obs, matches, result, frame, self.cam, pose_cw,
                cfg.robust, cfg.search_radius_px, positions)
            cluster.untracked_frames = 0
            coasted = False
        except InsufficientPoints:
            # constant-velocity coast, constrained to the joint
            prev_twist = initial.vector if initial is not None else np.zeros(6)
            cluster.poses[frame] = compose(exp_se3(prev_twist), cluster.poses[prev_frame])
            cluster.twists[frame] = Twist.from_vector(prev_twist)
            cluster.untracked_frames += 1
            coasted = True
            if cluster.untracked_frames > cfg.lost_after:
                cluster.lost = True
        self.track_log.append({"frame": frame, "cluster": cluster.id,
                               "coasted": coasted})

    # -- bundle adjustment ----------------------------------------------------

    def run_window_ba(self, window: int | None = None):
        all_temporal = [kf.frame_index for kf in self.world.temporal_keyframes()]
        temporal = all_temporal[-window:] if window else all_temporal
        if len(temporal) < 2:
            return None
        # fixed outer ring: past keyframes observing in-window points anchor
        # the sliding window at both ends (otherwise a soft bending mode
        # survives refinement); the full-window pass optimizes spatial
        # keyframes as free variables instead
        ring = all_temporal[-(window + 5):-window] if window else []
        spatial = []
        covisible = []
        for kf in self.world.spatial_keyframes():
            shared = max((self.world.covisibility(kf, self.world.keyframes[t])
                          for t in temporal), default=0)
            if shared >= self.world.covisibility_min_shared:
                covisible.append(kf.frame_index)
        if window:
            ring.extend(covisible)
        else:
            spatial = covisible
        problem = build_problem(self.world, self.cam, temporal, spatial,
                                weights=np.asarray(self.cfg.twist_weights),
                                cfg=self.cfg.ba, fixed_frames=ring)
        report = solve_ba(problem, self.cfg.ba)
        for kf_index, var in problem.cameras.items():
            self.world.keyframes[kf_index].pose = var.pose
            self.camera_est[kf_index] = var.pose
        for pid, var in problem.points.items():
            self.world.points[pid].position = var.position
        for (cid, kf_index), var in problem.twists.items():
            cluster = self.world.clusters[cid]
            cluster.poses[kf_index] = problem.object_pose(cid, kf_index)
        # refresh twist histories from the refined poses, cleaned by the
        # projector so containment is exact
        for cid in {key[0] for key in problem.twists}:
            cluster = self.world.clusters[cid]
            info = problem.cluster_joints[cid]
            frames = sorted(cluster.poses)
            for a, b in zip(frames, frames[1:]):
                if (cid, b) not in problem.twists:
                    continue
                xi = log_se3(compose(cluster.poses[b], inverse(cluster.poses[a]))).vector
                cluster.twists[b] = Twist.from_vector(info.p_world @ xi)
        return report

    # -- full run --------------------------------------------------------------

    def run(self) -> None:
        for frame in range(self.scene.n_frames):
            self.step(frame)
        if self.cfg.ba_interval:
            self.run_window_ba()  # final pass over the full temporal window

    # -- evaluation -------------------------------------------------------------

    def camera_trajectories(self) -> tuple[Trajectory, Trajectory]:
        rate = self.scene.frame_rate
        est = Trajectory([(f / rate, inverse(self.camera_est[f]))
                          for f in sorted(self.camera_est)])
        gt = Trajectory([(f / rate, self.gt.camera_poses_wc[f])
                         for f in range(self.scene.n_frames)])
        return est, gt

    def object_trajectories(self, cluster_id: int) -> tuple[Trajectory, Trajectory]:
        rate = self.scene.frame_rate
        cluster = self.world.clusters[cluster_id]
        frames = sorted(cluster.poses)
        est = Trajectory([(f / rate, cluster.poses[f]) for f in frames])
        gt_obj = self.gt.objects[cluster_id]
        gt = Trajectory([(f / rate, gt_obj.poses[f]) for f in frames])
        return est, gt

    def drift_plane(self, cluster_id: int) -> PlaneModel | None:
        cluster = self.world.clusters[cluster_id]
        joint = cluster.joint
        if joint is not None and joint.jtype is not JointType.FREE:
            return PlaneModel.from_coefficients(
                np.append(joint.frame.rotation[:, 2],
                          -joint.frame.rotation[:, 2] @ joint.frame.translation))
        entry = self.cfg.joint_table.get(self.class_of(cluster_id))
        if entry is not None:
            return self._parent_plane(entry[0])
        return None

    def evaluate(self, runtime_s: float = 0.0) -> ExperimentReport:
        cam_est, cam_gt = self.camera_trajectories()
        cam_ate = ate(cam_est, cam_gt)
        cam_rpe_t, cam_rpe_r = rpe(cam_est, cam_gt)
        objects = {}
        for cid in sorted(self.gt.objects):
            cluster = self.world.clusters.get(cid)
            if cluster is None or len(cluster.poses) < 3:
                continue
            est, gt = self.object_trajectories(cid)
            obj_ate = ate(est, gt)
            obj_rpe_t, obj_rpe_r = rpe(est, gt)
            plane = self.drift_plane(cid)
            drift = out_of_plane_drift(est, plane) if plane is not None else 0.0
            objects[cid] = ObjectReport(ate_m=obj_ate, rpe_t_m_per_frame=obj_rpe_t,
                                        rpe_r_deg_per_frame=obj_rpe_r,
                                        out_of_plane_drift_m=drift,
                                        tracked_frames=len(cluster.poses))
        return ExperimentReport(seed=self.scene.seed, n_frames=self.scene.n_frames,
                                camera_ate_m=cam_ate,
                                camera_rpe_t_m_per_frame=cam_rpe_t,
                                camera_rpe_r_deg_per_frame=cam_rpe_r,
                                objects=objects, runtime_s=runtime_s)

    def object_twist_rows(self, cluster_id: int) -> list[tuple]:
        """Per-frame joint-frame twists and speed for the CSV export."""
        cluster = self.world.clusters[cluster_id]
        joint = cluster.joint or JointSpec.free()
        from .liegroup import adjoint
        ad_lw = adjoint(inverse(joint.frame))
        rows = []
        frames = sorted(cluster.twists)
        rate = self.scene.frame_rate
        for prev, f in zip(frames, frames[1:]):
            xi = ad_lw @ cluster.twists[f].vector
            dt = cluster.poses[f].translation - cluster.poses[prev].translation
            speed_kmh = float(np.linalg.norm(dt)) * rate * 3.6
            rows.append((f, *xi, speed_kmh))
        return rows


def render_observations_cached(gt, frame):
    from .simulate import render_observations
    return render_observations(gt, frame)


def run_experiment(scene, config, out_dir, seed: int | None = None,
                   constrained: bool | None = None,
                   write_csv: bool = True) -> ExperimentReport:
    """Execute the full pipeline and write trajectories, report and CSVs.

    `scene` and `config` may be config objects or paths to their JSON files.
    The report file contains no timing so reruns with the same seed are
    byte-identical; wall time goes to a separate timing file.
    """
    import pathlib

    if not isinstance(scene, SceneConfig):
        scene = load_scene_config(scene)
    if not isinstance(config, PipelineConfig):
        config = PipelineConfig.from_json(config) if config else PipelineConfig()
    if seed is not None:
        scene = replace(scene, seed=int(seed))
    if constrained is not None:
        config = replace(config, constrained=bool(constrained))

    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    start = time.perf_counter()
    engine = PipelineEngine(scene, config)
    engine.run()
    runtime = time.perf_counter() - start
    report = engine.evaluate(runtime_s=runtime)

    cam_est, cam_gt = engine.camera_trajectories()
    cam_est.save(out / "camera_est.txt")
    cam_gt.save(out / "camera_gt.txt")
    for cid in sorted(report.objects):
        est, gt = engine.object_trajectories(cid)
        est.save(out / f"object_{cid}_est.txt")
        gt.save(out / f"object_{cid}_gt.txt")

    with open(out / "report.txt", "w") as fh:
        fh.write("\n".join(report.lines()) + "\n")
    with open(out / "timing.txt", "w") as fh:
        fh.write(f"runtime_s: {runtime:.3f}\n")

    if write_csv:
        _write_camera_csv(engine, out / "camera_metrics.csv")
        for cid in sorted(report.objects):
            _write_twist_csv(engine, cid, out / f"object_{cid}_twists.csv")
    return report


def _write_camera_csv(engine: PipelineEngine, path):
    from .liegroup import rotation_angle

    with open(path, "w") as fh:
        fh.write("frame,timestamp,err_t_m,err_r_deg\n")
        for frame in sorted(engine.camera_est):
            est_wc = inverse(engine.camera_est[frame])
            gt_wc = engine.gt.camera_poses_wc[frame]
            err = compose(inverse(gt_wc), est_wc)
            fh.write(f"{frame},{frame / engine.scene.frame_rate:.9g},"
                     f"{np.linalg.norm(err.translation):.9g},"
                     f"{np.degrees(rotation_angle(err.rotation)):.9g}\n")


def _write_twist_csv(engine: PipelineEngine, cluster_id: int, path):
    with open(path, "w") as fh:
        fh.write("frame,v_x,v_y,v_z,omega_x,omega_y,omega_z,speed_kmh\n")
        for row in engine.object_twist_rows(cluster_id):
            frame, *rest = row
            fh.write(f"{frame}," + ",".join(f"{x:.9g}" for x in rest) + "\n")
