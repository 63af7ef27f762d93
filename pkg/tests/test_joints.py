import numpy as np
import pytest

from jointslam.errors import DegeneratePlane, RankDeficient
from jointslam.geometry import PlaneModel
from jointslam.joints import (
    DOF,
    JointSpec,
    JointType,
    conjugated_projector,
    freedom_basis,
    joint_from_plane,
    projector,
    world_freedom_basis,
)
from jointslam.liegroup import Pose, adjoint, exp_se3


def random_pose(rng, omega=2.0, trans=5.0):
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0, omega)
    return exp_se3(np.concatenate([rng.uniform(-trans, trans, 3), w]))


def test_degrees_of_freedom():
    for jtype, d in DOF.items():
        assert freedom_basis(jtype).shape == (6, d)


def test_planar_basis_columns():
    b = freedom_basis(JointType.PLANAR)
    eye = np.eye(6)
    assert np.array_equal(b[:, 0], eye[0])
    assert np.array_equal(b[:, 1], eye[1])
    assert np.array_equal(b[:, 2], eye[5])


def test_free_basis_is_identity():
    assert np.array_equal(freedom_basis(JointType.FREE), np.eye(6))


def test_revolute_basis_keeps_only_omega_z():
    b = freedom_basis(JointType.REVOLUTE)
    assert np.array_equal(b[:, 0], np.eye(6)[5])
    p = projector(b)
    xi = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    assert np.array_equal(p @ xi, np.array([0, 0, 0, 0, 0, 6.0]))


def test_planar_projector_exact():
    p = projector(freedom_basis(JointType.PLANAR))
    assert np.array_equal(p, np.diag([1.0, 1.0, 0.0, 0.0, 0.0, 1.0]))


def test_free_projector_identity():
    assert np.array_equal(projector(freedom_basis(JointType.FREE)), np.eye(6))


def test_planar_projection_of_generic_twist():
    p = projector(freedom_basis(JointType.PLANAR))
    xi = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    assert np.array_equal(p @ xi, np.array([1.0, 2.0, 0.0, 0.0, 0.0, 6.0]))


def test_projector_properties_all_joints():
    for jtype in JointType:
        b = freedom_basis(jtype)
        p = projector(b)
        assert np.linalg.norm(p @ p - p) <= 1e-10
        assert np.linalg.norm(p - p.T) <= 1e-10
        assert np.linalg.matrix_rank(p) == DOF[jtype]
        if b.shape[1]:
            assert np.allclose(p @ b, b, atol=1e-12)


def test_projector_rank_deficient():
    bad = np.zeros((6, 2))
    bad[:, 0] = np.eye(6)[0]
    bad[:, 1] = np.eye(6)[0]
    with pytest.raises(RankDeficient):
        projector(bad)


def test_conjugated_projector_identity_frame():
    joint = JointSpec(JointType.PLANAR, Pose.identity())
    tp = conjugated_projector(joint)
    assert np.array_equal(tp.p_world, tp.pi_l)


def test_conjugated_projector_idempotent_random_frames():
    rng = np.random.default_rng(0)
    for jtype in JointType:
        for _ in range(50):
            joint = JointSpec(jtype, random_pose(rng))
            tp = conjugated_projector(joint)
            assert np.linalg.norm(tp.p_world @ tp.p_world - tp.p_world) <= 1e-9


def test_planar_world_projector_omega_parallel_to_normal():
    rng = np.random.default_rng(1)
    for _ in range(50):
        frame = random_pose(rng)
        n = frame.rotation[:, 2]  # joint z-axis in world coordinates
        joint = JointSpec(JointType.PLANAR, frame)
        tp = conjugated_projector(joint)
        xi = rng.normal(size=6)
        omega = (tp.p_world @ xi)[3:]
        assert np.linalg.norm(np.cross(omega, n)) <= 1e-9 * max(1.0, np.linalg.norm(omega))


def test_planar_in_plane_rotation_invariance():
    rng = np.random.default_rng(2)
    for _ in range(30):
        frame = random_pose(rng)
        joint = JointSpec(JointType.PLANAR, frame)
        p0 = conjugated_projector(joint).p_world
        angle = rng.uniform(-np.pi, np.pi)
        spin = exp_se3([0, 0, 0, 0, 0, angle])
        from jointslam.liegroup import compose
        joint2 = JointSpec(JointType.PLANAR, compose(frame, spin))
        p1 = conjugated_projector(joint2).p_world
        assert np.linalg.norm(p0 - p1) <= 1e-10


def test_planar_motion_containment():
    # points on the joint plane stay on it under exp(P xi)
    rng = np.random.default_rng(3)
    plane = PlaneModel.from_coefficients([0.2, -0.4, 1.0, 0.7])
    joint = joint_from_plane(plane, JointType.PLANAR, anchor=[1.0, 2.0, 3.0])
    p_world = conjugated_projector(joint).p_world
    for _ in range(200):
        xi = rng.normal(size=6)
        xi = xi / max(1.0, np.linalg.norm(xi))
        motion = exp_se3(p_world @ xi)
        x_on = joint.frame.apply(np.append(rng.uniform(-3, 3, 2), 0.0))
        assert abs(plane.signed_distance(x_on)) <= 1e-9
        moved = motion.apply(x_on)
        assert abs(plane.signed_distance(moved)) <= 1e-8


def test_revolute_axis_points_fixed():
    rng = np.random.default_rng(4)
    for _ in range(50):
        frame = random_pose(rng)
        joint = JointSpec(JointType.REVOLUTE, frame)
        p_world = conjugated_projector(joint).p_world
        xi = rng.normal(size=6)
        motion = exp_se3(p_world @ xi)
        axis_point = frame.apply(np.array([0.0, 0.0, rng.uniform(-3, 3)]))
        assert np.linalg.norm(motion.apply(axis_point) - axis_point) <= 1e-8


def test_free_joint_world_projector_is_identity():
    rng = np.random.default_rng(5)
    joint = JointSpec(JointType.FREE, random_pose(rng))
    tp = conjugated_projector(joint)
    assert np.allclose(tp.p_world, np.eye(6), atol=1e-12)
    assert np.array_equal(world_freedom_basis(joint), np.eye(6))


def test_joint_from_plane_axis_aligned():
    plane = PlaneModel.from_coefficients([0, 0, 1, 0])
    joint = joint_from_plane(plane, JointType.PLANAR, anchor=[3.0, 4.0, 7.0])
    assert np.allclose(joint.frame.translation, [3, 4, 0], atol=1e-12)
    assert np.allclose(joint.frame.rotation[:, 2], [0, 0, 1], atol=1e-12)


def test_joint_from_plane_matches_identity_frame_projector():
    plane = PlaneModel.from_coefficients([0, 0, 1, 0])
    joint = joint_from_plane(plane, JointType.PLANAR, anchor=[0.0, 0.0, 0.0])
    built = conjugated_projector(joint).p_world
    reference = conjugated_projector(JointSpec(JointType.PLANAR, Pose.identity())).p_world
    assert np.allclose(built, reference, atol=1e-12)


def test_joint_from_plane_origin_on_plane():
    rng = np.random.default_rng(6)
    for _ in range(50):
        coeffs = rng.normal(size=4)
        plane = PlaneModel.from_coefficients(coeffs)
        joint = joint_from_plane(plane, JointType.PLANAR, anchor=rng.uniform(-5, 5, 3))
        homog = np.append(joint.frame.translation, 1.0)
        assert abs(plane.pi @ homog) <= 1e-9
        r = joint.frame.rotation
        assert np.linalg.norm(r.T @ r - np.eye(3)) <= 1e-12


def test_joint_from_plane_degenerate():
    with pytest.raises(DegeneratePlane):
        joint_from_plane(np.array([0.0, 0.0, 0.0, 1.0]), JointType.PLANAR, [0, 0, 0])


def test_projection_idempotence_on_twists():
    rng = np.random.default_rng(7)
    for _ in range(100):
        joint = JointSpec(JointType.PLANAR, random_pose(rng))
        p = conjugated_projector(joint).p_world
        xi = rng.normal(size=6)
        assert np.linalg.norm(p @ (p @ xi) - p @ xi) <= 1e-9
