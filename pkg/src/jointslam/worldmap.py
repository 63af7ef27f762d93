"""Semantic map: clusters of points, keyframes and their bookkeeping.

Static clusters keep world-frame points; dynamic clusters keep object-frame
points plus per-frame pose and twist histories. Every frame becomes a
temporal keyframe; after a fixed window it is either deleted or kept as a
spatial keyframe anchoring covisibility.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import StereoObservation
from .joints import JointSpec
from .liegroup import Pose, Twist

TEMPORAL_WINDOW_S = 5.0
COVISIBILITY_MIN_SHARED = 30
LOST_AFTER_FRAMES = 10

# Classes considered movable a priori; everything else (including the
# "unknown" class) is treated as static.
DEFAULT_DYNAMIC_CLASSES = frozenset({"car", "bus", "bike", "pedestrian"})

MAP_FORMAT_VERSION = 1


@dataclass
class MapPoint:
    """A 3D landmark; position is world-frame when its owner cluster is
    static, object-frame when dynamic."""

    id: int
    position: np.ndarray
    owner_cluster: int
    class_votes: dict = field(default_factory=dict)
    created_frame: int = 0
    seen_count: int = 0
    misfit_count: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)

    @property
    def effective_class(self) -> str:
        if not self.class_votes:
            return ""
        best = max(self.class_votes.values())
        return min(label for label, n in self.class_votes.items() if n == best)


def fuse_semantic_vote(point: MapPoint, label: str) -> MapPoint:
    """Add one semantic observation; the point's class is the vote argmax,
    ties broken by the lexically smallest label."""
    point.class_votes[label] = point.class_votes.get(label, 0) + 1
    return point


@dataclass
class Cluster:
    """A semantic object: its points plus (for dynamic clusters) pose and
    twist histories indexed by frame."""

    id: int
    class_label: str
    is_static: bool
    points: list = field(default_factory=list)
    poses: dict = field(default_factory=dict)      # frame -> Pose (T_wo)
    twists: dict = field(default_factory=dict)     # frame -> Twist (world frame)
    joint: JointSpec | None = None
    untracked_frames: int = 0
    lost: bool = False

    def latest_frame(self) -> int | None:
        return max(self.poses) if self.poses else None


@dataclass
class KeyFrame:
    frame_index: int
    timestamp: float
    pose: Pose  # T_cw (world -> camera)
    observations: list = field(default_factory=list)
    is_temporal: bool = True
    is_spatial: bool = False

    def point_ids(self) -> set:
        return {obs.point_id for obs in self.observations}


class WorldMap:
    """Single-writer container for clusters, points and keyframes."""

    def __init__(self, temporal_window: float = TEMPORAL_WINDOW_S,
                 covisibility_min_shared: int = COVISIBILITY_MIN_SHARED):
        self.clusters: dict[int, Cluster] = {}
        self.points: dict[int, MapPoint] = {}
        self.keyframes: dict[int, KeyFrame] = {}
        self.temporal_window = temporal_window
        self.covisibility_min_shared = covisibility_min_shared

    # -- clusters & points -------------------------------------------------

    def add_cluster(self, cluster: Cluster) -> Cluster:
        self.clusters[cluster.id] = cluster
        return cluster

    def add_point(self, point: MapPoint) -> MapPoint:
        if point.owner_cluster not in self.clusters:
            raise KeyError(f"unknown owner cluster {point.owner_cluster}")
        self.points[point.id] = point
        cluster = self.clusters[point.owner_cluster]
        if point.id not in cluster.points:
            cluster.points.append(point.id)
        return point

    def remove_point(self, point_id: int):
        """Delete a landmark and every reference to it (no dangling
        observations survive)."""
        point = self.points.pop(point_id, None)
        if point is None:
            return
        cluster = self.clusters.get(point.owner_cluster)
        if cluster is not None and point_id in cluster.points:
            cluster.points.remove(point_id)
        for kf in self.keyframes.values():
            kf.observations = [o for o in kf.observations if o.point_id != point_id]

    def static_clusters(self) -> list[Cluster]:
        return [c for c in self.clusters.values() if c.is_static]

    def dynamic_clusters(self) -> list[Cluster]:
        return [c for c in self.clusters.values() if not c.is_static]

    # -- keyframes ----------------------------------------------------------

    def promote_temporal_keyframe(self, frame_index: int, timestamp: float,
                                  pose_cw: Pose,
                                  observations: list[StereoObservation]) -> KeyFrame:
        """Every tracked frame enters the temporal keyframe set."""
        for obs in observations:
            if obs.point_id not in self.points:
                raise KeyError(f"observation of unknown point {obs.point_id}")
        kf = KeyFrame(frame_index=frame_index, timestamp=timestamp, pose=pose_cw,
                      observations=list(observations), is_temporal=True)
        self.keyframes[frame_index] = kf
        return kf

    def covisibility(self, a: KeyFrame, b: KeyFrame) -> int:
        return len(a.point_ids() & b.point_ids())

    def cull_keyframes(self, now: float) -> list[int]:
        """Expire keyframes older than the temporal window.

        An expiring keyframe is kept as a spatial keyframe when it still
        shares enough points with a retained keyframe but is not redundant
        with an already retained spatial one; otherwise it is deleted.
        Returns the deleted frame indices.
        """
        expired = sorted(kf.frame_index for kf in self.keyframes.values()
                         if kf.is_temporal and now - kf.timestamp > self.temporal_window)
        evicted = []
        for frame_index in expired:
            kf = self.keyframes[frame_index]
            kf.is_temporal = False
            ids = kf.point_ids()
            anchored = False
            redundant = False
            for other in self.keyframes.values():
                if other.frame_index == frame_index:
                    continue
                if not (other.is_temporal or other.is_spatial):
                    continue
                shared = len(ids & other.point_ids())
                if shared >= self.covisibility_min_shared:
                    anchored = True
                    if other.is_spatial:
                        redundant = True
                        break
            if anchored and not redundant:
                kf.is_spatial = True
            else:
                del self.keyframes[frame_index]
                evicted.append(frame_index)
        return evicted

    def temporal_keyframes(self) -> list[KeyFrame]:
        return sorted((kf for kf in self.keyframes.values() if kf.is_temporal),
                      key=lambda kf: kf.frame_index)

    def spatial_keyframes(self) -> list[KeyFrame]:
        return sorted((kf for kf in self.keyframes.values() if kf.is_spatial),
                      key=lambda kf: kf.frame_index)

    def check_integrity(self):
        """Raise if any observation dangles or a history is incoherent."""
        for kf in self.keyframes.values():
            for obs in kf.observations:
                if obs.point_id not in self.points:
                    raise AssertionError(f"dangling observation {obs.point_id} in kf {kf.frame_index}")
        for cluster in self.clusters.values():
            if cluster.is_static:
                if cluster.poses or cluster.twists:
                    raise AssertionError(f"static cluster {cluster.id} has a pose history")
            elif set(cluster.poses) != set(cluster.twists):
                raise AssertionError(f"cluster {cluster.id} pose/twist frames differ")

    # -- serialization -------------------------------------------------------

    def save(self, path):
        """Versioned structured-text dump (clusters, points, keyframes)."""
        doc = {
            "version": MAP_FORMAT_VERSION,
            "clusters": [
                {
                    "id": c.id,
                    "class": c.class_label,
                    "static": c.is_static,
                    "points": list(c.points),
                    "poses": {str(f): _pose_doc(p) for f, p in sorted(c.poses.items())},
                    "twists": {str(f): t.vector.tolist() for f, t in sorted(c.twists.items())},
                }
                for c in sorted(self.clusters.values(), key=lambda c: c.id)
            ],
            "points": [
                {
                    "id": p.id,
                    "position": p.position.tolist(),
                    "owner": p.owner_cluster,
                    "votes": dict(sorted(p.class_votes.items())),
                }
                for p in sorted(self.points.values(), key=lambda p: p.id)
            ],
            "keyframes": [
                {
                    "frame": kf.frame_index,
                    "timestamp": kf.timestamp,
                    "pose": _pose_doc(kf.pose),
                    "temporal": kf.is_temporal,
                    "spatial": kf.is_spatial,
                    "observations": [
                        [obs.u, obs.v, obs.disparity, obs.point_id, obs.cluster_id]
                        for obs in kf.observations
                    ],
                }
                for kf in sorted(self.keyframes.values(), key=lambda kf: kf.frame_index)
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "WorldMap":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != MAP_FORMAT_VERSION:
            raise ValueError(f"unsupported map version {doc.get('version')}")
        world = WorldMap()
        for c in doc["clusters"]:
            world.clusters[c["id"]] = Cluster(
                id=c["id"], class_label=c["class"], is_static=c["static"],
                points=list(c["points"]),
                poses={int(f): _pose_from_doc(p) for f, p in c["poses"].items()},
                twists={int(f): Twist.from_vector(t) for f, t in c["twists"].items()},
            )
        for p in doc["points"]:
            world.points[p["id"]] = MapPoint(id=p["id"], position=np.array(p["position"]),
                                             owner_cluster=p["owner"],
                                             class_votes=dict(p["votes"]))
        for k in doc["keyframes"]:
            world.keyframes[k["frame"]] = KeyFrame(
                frame_index=k["frame"], timestamp=k["timestamp"],
                pose=_pose_from_doc(k["pose"]),
                observations=[
                    StereoObservation(u=o[0], v=o[1], disparity=o[2], point_id=o[3],
                                      cluster_id=o[4], frame_index=k["frame"])
                    for o in k["observations"]
                ],
                is_temporal=k["temporal"], is_spatial=k["spatial"],
            )
        return world


def _pose_doc(pose: Pose) -> dict:
    return {"r": pose.rotation.tolist(), "t": pose.translation.tolist()}


def _pose_from_doc(doc: dict) -> Pose:
    return Pose(np.array(doc["r"]), np.array(doc["t"]))
