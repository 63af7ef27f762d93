import numpy as np
import pytest
import scipy.linalg

from jointslam.errors import AngleAtPi
from jointslam.liegroup import (
    Pose,
    Twist,
    adjoint,
    compose,
    dexp_block,
    exp_se3,
    inverse,
    log_se3,
    pose_vec,
    se3_dexp,
    se3_dlog,
    se3_left_jacobian,
    skew,
    twist_hat,
)


def series_exp(m, terms=20):
    """Truncated matrix power series oracle for the exponential."""
    out = np.eye(m.shape[0])
    acc = np.eye(m.shape[0])
    for k in range(1, terms):
        acc = acc @ m / k
        out = out + acc
    return out


def random_twist(rng, max_omega=3.0, v_scale=5.0):
    w = rng.normal(size=3)
    n = np.linalg.norm(w)
    w = w / n * rng.uniform(0.0, max_omega)
    return np.concatenate([rng.uniform(-v_scale, v_scale, 3), w])


def test_skew_zero():
    assert np.array_equal(skew([0, 0, 0]), np.zeros((3, 3)))


def test_skew_formula():
    expected = np.array([[0, -3, 2], [3, 0, -1], [-2, 1, 0]], dtype=float)
    assert np.array_equal(skew([1, 2, 3]), expected)


def test_skew_matches_cross_product():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.normal(size=3), rng.normal(size=3)
        assert np.allclose(skew(a) @ b, np.cross(a, b), atol=1e-14)
        m = skew(a)
        assert np.array_equal(m, -m.T)


def test_twist_hat_zero():
    assert np.array_equal(twist_hat(Twist.zero()), np.zeros((4, 4)))


def test_twist_hat_structure():
    m = twist_hat(Twist([1, 0, 0], [0, 0, 0]))
    expected = np.zeros((4, 4))
    expected[0, 3] = 1.0
    assert np.array_equal(m, expected)

    rng = np.random.default_rng(1)
    for _ in range(20):
        m = twist_hat(rng.normal(size=6))
        assert np.array_equal(m[3], np.zeros(4))


def test_exp_zero_is_identity():
    p = exp_se3(Twist.zero())
    assert np.allclose(p.matrix(), np.eye(4), atol=0)


def test_exp_pure_translation():
    p = exp_se3(Twist([1, 0, 0], [0, 0, 0]))
    assert np.allclose(p.rotation, np.eye(3), atol=0)
    assert np.allclose(p.translation, [1, 0, 0], atol=0)


def test_exp_quarter_turn_matches_series():
    xi = np.array([0, 0, 0, 0, 0, np.pi / 2])
    p = exp_se3(xi)
    expected_r = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
    assert np.allclose(p.rotation, expected_r, atol=1e-12)
    assert np.allclose(p.translation, np.zeros(3), atol=1e-12)
    assert np.allclose(p.matrix(), series_exp(twist_hat(xi)), atol=1e-12)


def test_exp_matches_series_random():
    rng = np.random.default_rng(2)
    for _ in range(200):
        xi = random_twist(rng)
        assert np.allclose(exp_se3(xi).matrix(), series_exp(twist_hat(xi), 30), atol=1e-11)


def test_exp_output_is_orthonormal():
    rng = np.random.default_rng(3)
    for _ in range(500):
        p = exp_se3(random_twist(rng))
        assert p.orthonormality_error() <= 1e-12
        assert abs(np.linalg.det(p.rotation) - 1.0) <= 1e-12


def test_log_identity():
    assert np.allclose(log_se3(Pose.identity()).vector, np.zeros(6), atol=0)


def test_log_pure_translation():
    xi = log_se3(Pose(np.eye(3), [0, 2, 0]))
    assert np.allclose(xi.v, [0, 2, 0], atol=0)
    assert np.allclose(xi.omega, np.zeros(3), atol=0)


def test_exp_log_roundtrip():
    rng = np.random.default_rng(4)
    for _ in range(2000):
        xi = random_twist(rng)
        back = log_se3(exp_se3(xi)).vector
        assert np.max(np.abs(back - xi)) <= 1e-9


def test_log_raises_at_pi():
    r = np.diag([1.0, -1.0, -1.0])  # angle exactly pi
    with pytest.raises(AngleAtPi):
        log_se3(Pose(r, np.zeros(3)))


def test_adjoint_identity():
    assert np.array_equal(adjoint(Pose.identity()), np.eye(6))


def test_adjoint_pure_rotation_block_diagonal():
    r = exp_se3([0, 0, 0, 0.3, -0.2, 0.9]).rotation
    ad = adjoint(Pose(r, np.zeros(3)))
    assert np.allclose(ad[:3, :3], r, atol=0)
    assert np.allclose(ad[3:, 3:], r, atol=0)
    assert np.allclose(ad[:3, 3:], np.zeros((3, 3)), atol=0)
    assert np.allclose(ad[3:, :3], np.zeros((3, 3)), atol=0)


def test_adjoint_pure_translation_upper_right():
    ad = adjoint(Pose(np.eye(3), [1, 0, 0]))
    assert np.allclose(ad[:3, 3:], skew([1, 0, 0]), atol=0)


def test_adjoint_of_product():
    rng = np.random.default_rng(5)
    for _ in range(100):
        a, b = exp_se3(random_twist(rng)), exp_se3(random_twist(rng))
        lhs = adjoint(compose(a, b))
        rhs = adjoint(a) @ adjoint(b)
        assert np.allclose(lhs, rhs, atol=1e-9)


def test_adjoint_intertwining():
    rng = np.random.default_rng(6)
    for _ in range(200):
        t = exp_se3(random_twist(rng))
        xi = random_twist(rng, max_omega=1.5, v_scale=2.0)
        lhs = exp_se3(adjoint(t) @ xi).matrix()
        rhs = compose(t, compose(exp_se3(xi), inverse(t))).matrix()
        assert np.allclose(lhs, rhs, atol=1e-9)


def test_left_right_update_consistency():
    # exp(xi_w) * T == T * exp(Ad(T^-1) xi_w)
    rng = np.random.default_rng(7)
    for _ in range(200):
        t = exp_se3(random_twist(rng))
        xi = random_twist(rng, max_omega=1.5, v_scale=2.0)
        lhs = compose(exp_se3(xi), t).matrix()
        rhs = compose(t, exp_se3(adjoint(inverse(t)) @ xi)).matrix()
        assert np.allclose(lhs, rhs, atol=1e-9)


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(8)
    b = exp_se3(random_twist(rng))
    assert np.allclose(compose(Pose.identity(), b).matrix(), b.matrix(), atol=0)
    a = exp_se3(random_twist(rng))
    assert np.allclose(inverse(inverse(a)).matrix(), a.matrix(), atol=1e-14)
    assert np.allclose(compose(a, inverse(a)).matrix(), np.eye(4), atol=1e-12)


def test_compose_matches_dense_matmul():
    rng = np.random.default_rng(9)
    for _ in range(100):
        a, b = exp_se3(random_twist(rng)), exp_se3(random_twist(rng))
        assert np.allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-13)


# --- derivative blocks ---------------------------------------------------


def vec_exp(xi):
    return pose_vec(exp_se3(xi))


def fd_jacobian(f, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        cols.append((f(x + e) - f(x - e)) / (2.0 * step))
    return np.stack(cols, axis=1)


def test_dexp_block_structure():
    d = dexp_block()
    assert np.array_equal(d[9:12, 0:3], np.eye(3))
    assert np.array_equal(d[0:9, 0:3], np.zeros((9, 3)))
    assert np.array_equal(d[0:3, 3:6], -skew([1, 0, 0]))
    assert np.array_equal(d[3:6, 3:6], -skew([0, 1, 0]))
    assert np.array_equal(d[6:9, 3:6], -skew([0, 0, 1]))


def test_dexp_block_matches_finite_differences_at_zero():
    fd = fd_jacobian(vec_exp, np.zeros(6), step=1e-6)
    assert np.allclose(dexp_block(), fd, atol=1e-6)
    assert np.allclose(se3_dexp(np.zeros(6)), dexp_block(), atol=1e-14)


def van_loan_dexp(xi):
    """Exact directional derivatives of the matrix exponential.

    expm([[A, E], [0, A]]) has the directional derivative of expm at A in
    direction E as its upper-right block.
    """
    a = twist_hat(xi)
    cols = []
    for j in range(6):
        e = np.zeros(6)
        e[j] = 1.0
        big = np.zeros((8, 8))
        big[:4, :4] = a
        big[4:, 4:] = a
        big[:4, 4:] = twist_hat(e)
        d = scipy.linalg.expm(big)[:4, 4:]
        cols.append(np.concatenate([d[:3, 0], d[:3, 1], d[:3, 2], d[:3, 3]]))
    return np.stack(cols, axis=1)


def quadrature_left_jacobian(xi, nodes=32):
    """Independent oracle: J_l(xi) = integral_0^1 Ad(exp(s xi)) ds."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    s = 0.5 * (x + 1.0)
    out = np.zeros((6, 6))
    for si, wi in zip(s, w):
        out += 0.5 * wi * adjoint(exp_se3(si * np.asarray(xi)))
    return out


def test_left_jacobian_matches_quadrature():
    rng = np.random.default_rng(10)
    for _ in range(50):
        xi = random_twist(rng, max_omega=2.5)
        assert np.allclose(se3_left_jacobian(xi), quadrature_left_jacobian(xi), atol=1e-10)
    # small-angle branch
    for _ in range(20):
        xi = random_twist(rng, max_omega=1e-5)
        assert np.allclose(se3_left_jacobian(xi), quadrature_left_jacobian(xi), atol=1e-10)


def test_dexp_matches_van_loan_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        xi = random_twist(rng, max_omega=2.5)
        assert np.allclose(se3_dexp(xi), van_loan_dexp(xi), atol=1e-9)


def test_dexp_matches_finite_differences():
    rng = np.random.default_rng(12)
    for _ in range(100):
        xi = random_twist(rng, max_omega=2.5)
        fd = fd_jacobian(vec_exp, xi, step=1e-6)
        assert np.allclose(se3_dexp(xi), fd, atol=5e-6)


def test_dlog_inverse_of_dexp_at_identity():
    prod = se3_dlog(Pose.identity()) @ dexp_block()
    assert np.allclose(prod, np.eye(6), atol=1e-6)


def test_dlog_matches_finite_differences_on_manifold():
    # perturb T along tangent directions exp(eps * dir) and compare the
    # change of log against dlog applied to the 12-vector pose change
    rng = np.random.default_rng(13)
    for _ in range(100):
        xi = random_twist(rng, max_omega=0.5, v_scale=1.0)
        t = exp_se3(xi)
        dl = se3_dlog(t)
        for _ in range(3):
            direction = rng.normal(size=6)
            step = 1e-6
            tp = compose(t, exp_se3(step * direction))
            tm = compose(t, exp_se3(-step * direction))
            dlog_fd = (log_se3(tp).vector - log_se3(tm).vector) / (2 * step)
            dvec = (pose_vec(tp) - pose_vec(tm)) / (2 * step)
            err = np.linalg.norm(dl @ dvec - dlog_fd) / max(1.0, np.linalg.norm(dlog_fd))
            assert err < 1e-4


def test_dlog_pure_translation_rows():
    t = Pose(np.eye(3), [0.3, -0.7, 1.1])
    dl = se3_dlog(t)
    # translation entries of vec occupy indices 9..11; for identity rotation
    # the v-rows of log respond to them with the identity
    assert np.allclose(dl[0:3, 9:12], np.eye(3), atol=1e-9)


def test_dlog_raises_near_pi():
    r = exp_se3([0, 0, 0, 0, 0, np.pi - 1e-5]).rotation
    with pytest.raises(AngleAtPi):
        se3_dlog(Pose(r, np.zeros(3)))
