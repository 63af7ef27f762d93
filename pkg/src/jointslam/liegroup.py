"""SE(3) rigid transforms and se(3) twist algebra.

Conventions used throughout the package:

* a twist is the 6-vector (v, omega): translational part first, units are
  meters/frame and radians/frame (the frame interval is fixed to 1);
* poses act on column vectors, ``X_a = R_ab @ X_b + t_ab``;
* the "vec" of a pose is the column-major stacking of the top 3x4 block of
  its homogeneous matrix (12 numbers); all pose derivatives below use it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AngleAtPi

# Below this rotation angle the closed-form Rodrigues coefficients are
# replaced by their Taylor expansions: the closed forms lose ~half their
# digits to cancellation well before the angle reaches machine epsilon.
SMALL_ANGLE = 1e-2

# log/dlog are refused within ~1e-3 rad of the angle-pi branch cut;
# trace(R) = 1 + 2*cos(theta), so this is a trace threshold.
_TRACE_AT_PI_TOL = 1e-6


@dataclass(frozen=True)
class Twist:
    """Rigid-body velocity: linear part ``v`` and angular part ``omega``."""

    v: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(x) -> "Twist":
        x = np.asarray(x, dtype=float).reshape(6)
        return Twist(x[:3], x[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.omega])


@dataclass(frozen=True)
class Pose:
    """SE(3) element: 3x3 rotation plus translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform a point (3,) or a stack of points (N, 3)."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def orthonormality_error(self) -> float:
        r = self.rotation
        return float(np.linalg.norm(r.T @ r - np.eye(3)))


def skew(a) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: skew(a) @ b == cross(a, b)."""
    a = np.asarray(a, dtype=float).reshape(3)
    return np.array([
        [0.0, -a[2], a[1]],
        [a[2], 0.0, -a[0]],
        [-a[1], a[0], 0.0],
    ])


def _vee(m) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _as_twist_vector(xi) -> np.ndarray:
    if isinstance(xi, Twist):
        return xi.vector
    return np.asarray(xi, dtype=float).reshape(6)


def twist_hat(xi) -> np.ndarray:
    """4x4 se(3) matrix of a twist: [[skew(omega), v], [0, 0]]."""
    x = _as_twist_vector(xi)
    m = np.zeros((4, 4))
    m[:3, :3] = skew(x[3:])
    m[:3, 3] = x[:3]
    return m


def so3_exp(omega) -> np.ndarray:
    """Rodrigues rotation from a rotation vector."""
    w = np.asarray(omega, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    k = skew(w)
    k2 = k @ k
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / t2
    return np.eye(3) + a * k + b * k2


def _so3_v_matrix(omega) -> np.ndarray:
    """Integral of the rotation series: maps v to the translation of exp."""
    w = np.asarray(omega, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    k = skew(w)
    k2 = k @ k
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = (1.0 - np.cos(theta)) / t2
        b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * k + b * k2


def _so3_v_inverse(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    k = skew(w)
    k2 = k @ k
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        c = (1.0 - (theta * np.sin(theta)) / (2.0 * (1.0 - np.cos(theta)))) / t2
    return np.eye(3) - 0.5 * k + c * k2


def exp_se3(xi) -> Pose:
    """Exponential map se(3) -> SE(3); accepts a Twist or a 6-vector."""
    x = _as_twist_vector(xi)
    v, w = x[:3], x[3:]
    return Pose(so3_exp(w), _so3_v_matrix(w) @ v)


def rotation_angle(rotation) -> float:
    """Principal rotation angle of a rotation matrix, in [0, pi].

    atan2 of the skew-part norm against the trace: well-conditioned at 0,
    where the arccos form amplifies matrix roundoff to ~1e-8 rad.
    """
    r = np.asarray(rotation, dtype=float)
    sine = 0.5 * np.linalg.norm(_vee(r - r.T))
    cosine = 0.5 * (np.trace(r) - 1.0)
    return float(np.arctan2(min(sine, 1.0), max(cosine, -1.0)))


def log_se3(pose: Pose) -> Twist:
    """Principal logarithm SE(3) -> se(3).

    Raises AngleAtPi when the rotation angle is within ~1e-3 rad of pi,
    where the principal branch is ill-conditioned.
    """
    r = pose.rotation
    tr = float(np.trace(r))
    if tr <= -1.0 + _TRACE_AT_PI_TOL:
        raise AngleAtPi(f"rotation trace {tr:.9f} too close to -1")
    theta = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        scale = 0.5 + t2 / 12.0 + 7.0 * t2 * t2 / 720.0
    else:
        scale = theta / (2.0 * np.sin(theta))
    w = scale * _vee(r - r.T)
    v = _so3_v_inverse(w) @ pose.translation
    return Twist(v, w)


def adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint map [[R, skew(t) R], [0, R]] re-expressing twists."""
    ad = np.zeros((6, 6))
    r = pose.rotation
    ad[:3, :3] = r
    ad[:3, 3:] = skew(pose.translation) @ r
    ad[3:, 3:] = r
    return ad


def compose(a: Pose, b: Pose) -> Pose:
    """Group product: (a * b).apply(x) == a.apply(b.apply(x))."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def relative(a: Pose, b: Pose) -> Pose:
    """inverse(a) * b."""
    return compose(inverse(a), b)


def pose_vec(pose: Pose) -> np.ndarray:
    """Column-major 12-vector of the top 3x4 block of the pose matrix."""
    return np.concatenate([pose.rotation[:, 0], pose.rotation[:, 1],
                           pose.rotation[:, 2], pose.translation])


_E = np.eye(3)


def dexp_block() -> np.ndarray:
    """Derivative of vec(exp(xi)) at xi = 0: the constant 12x6 block

        [[0, -skew(e1)], [0, -skew(e2)], [0, -skew(e3)], [I, 0]].
    """
    out = np.zeros((12, 6))
    for j in range(3):
        out[3 * j:3 * j + 3, 3:] = -skew(_E[j])
    out[9:12, :3] = np.eye(3)
    return out


def _so3_left_jacobian(omega) -> np.ndarray:
    # identical to the V matrix of the exponential
    return _so3_v_matrix(omega)


def _se3_q_matrix(v, w) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian (Barfoot's Q)."""
    theta = np.linalg.norm(w)
    vx = skew(v)
    wx = skew(w)
    wvx = wx @ vx
    vwx = vx @ wx
    wvwx = wx @ vx @ wx
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        c2 = -1.0 / 24.0 + t2 / 720.0 - t2 * t2 / 40320.0
        c3 = -1.0 / 120.0 + t2 / 5040.0 - t2 * t2 / 362880.0
    else:
        t4 = t2 * t2
        c1 = (theta - np.sin(theta)) / (t2 * theta)
        c2 = (1.0 - t2 / 2.0 - np.cos(theta)) / t4
        c3 = (theta - np.sin(theta) - theta * t2 / 6.0) / (t4 * theta)
    q = 0.5 * vx
    q += c1 * (wvx + vwx + wvwx)
    q -= c2 * (wx @ wvx + vwx @ wx - 3.0 * wvwx)
    q -= 0.5 * (c2 - 3.0 * c3) * (wvwx @ wx + wx @ wvwx)
    return q


def se3_left_jacobian(xi) -> np.ndarray:
    """6x6 left Jacobian: exp(xi + d) ~ exp(J_l(xi) d) * exp(xi)."""
    x = _as_twist_vector(xi)
    v, w = x[:3], x[3:]
    jl = _so3_left_jacobian(w)
    out = np.zeros((6, 6))
    out[:3, :3] = jl
    out[3:, 3:] = jl
    out[:3, 3:] = _se3_q_matrix(v, w)
    return out


def se3_right_jacobian(xi) -> np.ndarray:
    """6x6 right Jacobian: exp(xi + d) ~ exp(xi) * exp(J_r(xi) d)."""
    return se3_left_jacobian(-_as_twist_vector(xi))


def se3_dexp(xi) -> np.ndarray:
    """Exact 12x6 derivative of vec(exp(xi)) at an arbitrary twist.

    Composition of the right-increment vec derivative of the pose with the
    SE(3) right Jacobian; reduces to dexp_block() at xi = 0.
    """
    x = _as_twist_vector(xi)
    r = exp_se3(x).rotation
    inc = np.zeros((12, 6))
    for j in range(3):
        inc[3 * j:3 * j + 3, 3:] = -r @ skew(_E[j])
    inc[9:12, :3] = r
    return inc @ se3_right_jacobian(x)


def se3_dlog(pose: Pose) -> np.ndarray:
    """6x12 derivative of log w.r.t. vec(pose).

    Implemented as the pseudoinverse of se3_dexp at log(pose): exact for
    perturbations tangent to SE(3) (the only ones the contract covers).
    Raises AngleAtPi within ~1e-3 rad of the angle-pi branch cut.
    """
    xi = log_se3(pose)
    return np.linalg.pinv(se3_dexp(xi.vector))
