import numpy as np
import pytest

from jointslam.geometry import StereoObservation
from jointslam.liegroup import Pose, Twist
from jointslam.worldmap import (
    Cluster,
    KeyFrame,
    MapPoint,
    WorldMap,
    fuse_semantic_vote,
)


def obs(point_id, cluster_id=0, frame=0):
    return StereoObservation(u=10.0, v=20.0, disparity=5.0, point_id=point_id,
                             cluster_id=cluster_id, frame_index=frame)


def make_world_with_points(n, cluster_id=0):
    world = WorldMap()
    world.add_cluster(Cluster(id=cluster_id, class_label="road", is_static=True))
    for pid in range(n):
        world.add_point(MapPoint(id=pid, position=[pid, 0, 0], owner_cluster=cluster_id))
    return world


def test_vote_first_label():
    p = MapPoint(id=0, position=[0, 0, 0], owner_cluster=0)
    fuse_semantic_vote(p, "car")
    assert p.effective_class == "car"


def test_vote_majority():
    p = MapPoint(id=0, position=[0, 0, 0], owner_cluster=0)
    counts = {"car": 3, "road": 1}
    for label, n in counts.items():
        for _ in range(n):
            fuse_semantic_vote(p, label)
    for _ in range(3):
        fuse_semantic_vote(p, "road")
    # brute-force majority oracle
    counts["road"] += 3
    expected = max(sorted(counts), key=lambda k: counts[k])
    assert p.effective_class == expected == "road"


def test_vote_lexical_tiebreak():
    p = MapPoint(id=0, position=[0, 0, 0], owner_cluster=0)
    for _ in range(2):
        fuse_semantic_vote(p, "road")
        fuse_semantic_vote(p, "car")
    assert p.effective_class == "car"


def test_point_requires_known_cluster():
    world = WorldMap()
    with pytest.raises(KeyError):
        world.add_point(MapPoint(id=0, position=[0, 0, 0], owner_cluster=99))


def test_promote_temporal_keyframe():
    world = make_world_with_points(5)
    kf = world.promote_temporal_keyframe(0, 0.0, Pose.identity(), [obs(0), obs(1)])
    assert kf.is_temporal
    assert 0 in world.keyframes


def test_promote_rejects_unknown_point():
    world = make_world_with_points(1)
    with pytest.raises(KeyError):
        world.promote_temporal_keyframe(0, 0.0, Pose.identity(), [obs(7)])


def test_cull_empty_map():
    assert WorldMap().cull_keyframes(now=100.0) == []


def test_cull_deletes_lonely_old_keyframe():
    world = make_world_with_points(1)
    world.promote_temporal_keyframe(0, 0.0, Pose.identity(), [obs(0)])
    evicted = world.cull_keyframes(now=6.0)
    assert evicted == [0]
    assert 0 not in world.keyframes


def test_cull_keeps_recent():
    world = make_world_with_points(1)
    world.promote_temporal_keyframe(0, 0.0, Pose.identity(), [obs(0)])
    assert world.cull_keyframes(now=4.0) == []
    assert world.keyframes[0].is_temporal


def test_temporal_set_bounded_by_window():
    # 200 frames at 10 Hz with a 5 s window: at most 50 temporal keyframes
    world = make_world_with_points(60)
    shared = [obs(i) for i in range(40)]
    peak = 0
    for frame in range(200):
        t = frame / 10.0
        world.promote_temporal_keyframe(frame, t, Pose.identity(), shared)
        world.cull_keyframes(now=t)
        peak = max(peak, len(world.temporal_keyframes()))
    assert peak <= 51  # window boundary is exclusive
    assert len(world.temporal_keyframes()) <= 51


def test_spatial_skeleton_thinner_than_temporal_peak():
    # overlapping chain: consecutive keyframes share >= 30 points
    world = make_world_with_points(400)
    temporal_peak = 0
    for frame in range(100):
        t = frame / 10.0
        window = [obs(pid) for pid in range(frame * 3, frame * 3 + 60)]
        world.promote_temporal_keyframe(frame, t, Pose.identity(), window)
        world.cull_keyframes(now=t)
        temporal_peak = max(temporal_peak, len(world.temporal_keyframes()))
        world.check_integrity()
        assert len(world.spatial_keyframes()) < max(2, temporal_peak)
    assert len(world.spatial_keyframes()) >= 1
    assert len(world.spatial_keyframes()) < temporal_peak


def test_expired_keyframe_becomes_spatial_with_covisibility():
    world = make_world_with_points(40)
    shared = [obs(i) for i in range(35)]
    world.promote_temporal_keyframe(0, 0.0, Pose.identity(), shared)
    world.promote_temporal_keyframe(1, 5.5, Pose.identity(), shared)
    evicted = world.cull_keyframes(now=5.8)
    assert evicted == []
    assert not world.keyframes[0].is_temporal
    assert world.keyframes[0].is_spatial


def test_static_dynamic_partition():
    world = WorldMap()
    world.add_cluster(Cluster(id=0, class_label="road", is_static=True))
    world.add_cluster(Cluster(id=1, class_label="car", is_static=False))
    ids_static = {c.id for c in world.static_clusters()}
    ids_dynamic = {c.id for c in world.dynamic_clusters()}
    assert ids_static & ids_dynamic == set()
    assert ids_static | ids_dynamic == set(world.clusters)


def test_frame_index_coherence_check():
    world = WorldMap()
    cluster = Cluster(id=1, class_label="car", is_static=False)
    world.add_cluster(cluster)
    cluster.poses[3] = Pose.identity()
    with pytest.raises(AssertionError):
        world.check_integrity()
    cluster.twists[3] = Twist.zero()
    world.check_integrity()


def test_save_load_roundtrip(tmp_path):
    world = make_world_with_points(3)
    car = world.add_cluster(Cluster(id=1, class_label="car", is_static=False))
    car.poses[0] = Pose(np.eye(3), [1.0, 2.0, 3.0])
    car.twists[0] = Twist([0.5, 0, 0], [0, 0, 0.1])
    world.add_point(MapPoint(id=100, position=[0.1, 0.2, 0.3], owner_cluster=1,
                             class_votes={"car": 4}))
    world.promote_temporal_keyframe(0, 0.0, Pose.identity(), [obs(0), obs(100, 1)])
    path = tmp_path / "map.json"
    world.save(path)
    again = WorldMap.load(path)
    assert set(again.points) == set(world.points)
    assert set(again.clusters) == set(world.clusters)
    assert np.allclose(again.clusters[1].poses[0].translation, [1, 2, 3])
    assert np.allclose(again.clusters[1].twists[0].vector, car.twists[0].vector)
    assert again.points[100].effective_class == "car"
    # byte-stable on rewrite
    path2 = tmp_path / "map2.json"
    again.save(path2)
    assert path.read_bytes() == path2.read_bytes()
