"""Shared helpers: build a WorldMap instance from simulator ground truth."""

import numpy as np

from jointslam.simulate import render_observations
from jointslam.worldmap import Cluster, MapPoint, WorldMap


def gt_world(gt, frames, free_joints=False):
    """A world populated with ground-truth poses, points and keyframes."""
    from jointslam.joints import JointSpec

    world = WorldMap()
    for cid in sorted(gt.static_cluster_ids):
        world.add_cluster(Cluster(id=cid, class_label=gt.cluster_classes[cid],
                                  is_static=True))
    for pid in sorted(gt.static_points):
        cid, pos = gt.static_points[pid]
        world.add_point(MapPoint(id=pid, position=pos.copy(), owner_cluster=cid))
    for cid in sorted(gt.objects):
        obj = gt.objects[cid]
        joint = JointSpec.free() if free_joints else obj.joint
        cluster = Cluster(id=cid, class_label=gt.cluster_classes[cid],
                          is_static=False, joint=joint)
        world.add_cluster(cluster)
        for pid in sorted(obj.points):
            world.add_point(MapPoint(id=pid, position=obj.points[pid].copy(),
                                     owner_cluster=cid))
        for f in frames:
            cluster.poses[f] = obj.poses[f]
            cluster.twists[f] = obj.twists_world[f]
    for f in frames:
        world.promote_temporal_keyframe(f, f / gt.config.frame_rate,
                                        gt.camera_pose_cw(f),
                                        render_observations(gt, f))
    return world
