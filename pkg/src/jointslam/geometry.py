"""Pinhole stereo camera model and robust plane fitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, Degenerate, DisparityTooSmall, NoConsensus
from .liegroup import Pose

MIN_DEPTH = 1e-6
MIN_DISPARITY = 0.5


@dataclass(frozen=True)
class PinholeCamera:
    """Rectified stereo pinhole camera (left camera intrinsics + baseline)."""

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.baseline <= 0:
            raise ValueError("fx, fy and baseline must be positive")


@dataclass(frozen=True)
class PlaneModel:
    """Plane a x + b y + c z + d = 0 with the 4-vector normalized to 1."""

    pi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pi", np.asarray(self.pi, dtype=float).reshape(4))

    @staticmethod
    def from_coefficients(coeffs) -> "PlaneModel":
        """Normalize and sign-canonicalize (normal·z >= 0, see below)."""
        pi = np.asarray(coeffs, dtype=float).reshape(4)
        norm = np.linalg.norm(pi)
        if norm == 0.0:
            raise Degenerate("zero plane coefficients")
        pi = pi / norm
        # canonical sign: normal points toward +z; when the normal is
        # orthogonal to z, first nonzero of (a, b) is made positive
        if abs(pi[2]) > 1e-12:
            if pi[2] < 0:
                pi = -pi
        else:
            for k in (0, 1):
                if abs(pi[k]) > 1e-12:
                    if pi[k] < 0:
                        pi = -pi
                    break
        return PlaneModel(pi)

    @property
    def unit_normal(self) -> np.ndarray:
        n = self.pi[:3]
        return n / np.linalg.norm(n)

    def signed_distance(self, points) -> np.ndarray | float:
        """Metric signed distance of a point (3,) or points (N, 3)."""
        p = np.asarray(points, dtype=float)
        scale = np.linalg.norm(self.pi[:3])
        if p.ndim == 1:
            return float((self.pi[:3] @ p + self.pi[3]) / scale)
        return (p @ self.pi[:3] + self.pi[3]) / scale


@dataclass(frozen=True)
class StereoObservation:
    """A keypoint in the left image with its stereo disparity and the
    identities the association oracle provides."""

    u: float
    v: float
    disparity: float
    point_id: int
    cluster_id: int
    frame_index: int


def project(cam: PinholeCamera, pose_cw: Pose, point_w) -> np.ndarray:
    """Project a world point through a camera at pose T_cw."""
    x_c = pose_cw.apply(np.asarray(point_w, dtype=float))
    return project_camera_frame(cam, x_c)


def project_camera_frame(cam: PinholeCamera, point_c) -> np.ndarray:
    p = np.asarray(point_c, dtype=float)
    if p[2] <= MIN_DEPTH:
        raise BehindCamera(f"depth {p[2]:.3g} <= {MIN_DEPTH}")
    return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])


def projection_jacobian(cam: PinholeCamera, point_c) -> np.ndarray:
    """2x3 derivative of the pinhole projection w.r.t. the camera point."""
    x, y, z = np.asarray(point_c, dtype=float)
    if z <= MIN_DEPTH:
        raise BehindCamera(f"depth {z:.3g} <= {MIN_DEPTH}")
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def back_project(cam: PinholeCamera, uv, depth: float) -> np.ndarray:
    """Closed-form inverse of the projection at a known depth."""
    u, v = np.asarray(uv, dtype=float)
    return np.array([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth])


def triangulate_stereo(cam: PinholeCamera, obs: StereoObservation) -> np.ndarray:
    """Camera-frame point from a rectified stereo observation."""
    if obs.disparity < MIN_DISPARITY:
        raise DisparityTooSmall(f"disparity {obs.disparity:.3g} < {MIN_DISPARITY}")
    z = cam.fx * cam.baseline / obs.disparity
    return back_project(cam, (obs.u, obs.v), z)


def _check_not_collinear(points: np.ndarray):
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if len(s) < 2 or s[1] <= 1e-9 * max(1.0, s[0]):
        raise Degenerate("points are collinear")


def fit_plane_svd(points) -> PlaneModel:
    """Least-squares plane through points: smallest right singular vector
    of the homogeneous data matrix [X | 1]."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise Degenerate(f"need >= 3 points, got {pts.shape[0]}")
    _check_not_collinear(pts)
    homog = np.hstack([pts, np.ones((pts.shape[0], 1))])
    _, _, vt = np.linalg.svd(homog, full_matrices=True)
    return PlaneModel.from_coefficients(vt[-1])


def fit_plane_ransac(points, max_iters: int = 200, inlier_tol: float = 0.05,
                     seed: int = 0) -> tuple[PlaneModel, np.ndarray]:
    """RANSAC plane fit; returns the SVD refit on the best consensus set
    and the inlier mask against the refit plane. Deterministic per seed."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    if n < 3:
        raise NoConsensus(f"need >= 3 points, got {n}")
    rng = np.random.default_rng(seed)
    best_count = 0
    best_mask = None
    for _ in range(max_iters):
        idx = rng.choice(n, size=3, replace=False)
        a, b, c = pts[idx]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        dist = pts @ normal - normal @ a
        mask = np.abs(dist) <= inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < 3:
        raise NoConsensus("no 3-point hypothesis reached consensus")
    plane = fit_plane_svd(pts[best_mask])
    final_mask = np.abs(plane.signed_distance(pts)) <= inlier_tol
    return plane, final_mask
