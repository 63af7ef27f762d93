"""Trajectory metrics and trajectory file I/O.

ATE is the RMSE of translation differences after one closed-form rigid
alignment (no scale); RPE is the RMSE of per-interval relative-pose errors,
reported as meters/frame and degrees/frame for interval 1.

Trajectory files are plain text, one `timestamp tx ty tz qx qy qz qw` line
per pose (quaternion w-last, 9 significant digits); '#' lines are comments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoOverlap
from .liegroup import Pose, compose, inverse, rotation_angle

ASSOCIATION_TOL_FRAMES = 0.5


@dataclass
class Trajectory:
    entries: list  # ordered (timestamp, Pose) pairs, poses in the world frame

    def __post_init__(self):
        times = [t for t, _ in self.entries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.entries)

    def timestamps(self) -> np.ndarray:
        return np.array([t for t, _ in self.entries])

    def translations(self) -> np.ndarray:
        return np.array([p.translation for _, p in self.entries])

    def frame_period(self) -> float:
        times = self.timestamps()
        if len(times) < 2:
            return 1.0
        return float(np.median(np.diff(times)))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("# timestamp tx ty tz qx qy qz qw\n")
            for t, pose in self.entries:
                q = rotation_to_quaternion(pose.rotation)
                row = [t, *pose.translation, *q]
                fh.write(" ".join(format(x, ".9g") for x in row) + "\n")

    @staticmethod
    def load(path) -> "Trajectory":
        entries = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vals = [float(x) for x in line.split()]
                if len(vals) != 8:
                    raise ValueError(f"bad trajectory line: {line!r}")
                entries.append((vals[0], Pose(quaternion_to_rotation(vals[4:8]),
                                              vals[1:4])))
        return Trajectory(entries)


def rotation_to_quaternion(r) -> np.ndarray:
    """(x, y, z, w) quaternion from a rotation matrix (Shepperd's method)."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def associate(est: Trajectory, gt: Trajectory, tol: float | None = None):
    """Nearest-neighbor timestamp association within half a frame period."""
    if tol is None:
        tol = ASSOCIATION_TOL_FRAMES * gt.frame_period()
    gt_times = gt.timestamps()
    pairs = []
    for i, (t, _) in enumerate(est.entries):
        j = int(np.argmin(np.abs(gt_times - t)))
        if abs(gt_times[j] - t) <= tol:
            pairs.append((i, j))
    return pairs


def best_fit_alignment(source: np.ndarray, target: np.ndarray) -> Pose:
    """Closed-form rigid transform (no scale) minimizing
    sum |target - (R source + t)|^2 (orthogonal Procrustes)."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    cov = (target - mu_t).T @ (source - mu_s)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    return Pose(rot, mu_t - rot @ mu_s)


def ate(est: Trajectory, gt: Trajectory) -> float:
    """Absolute translation error: RMSE after one best-fit rigid alignment."""
    pairs = associate(est, gt)
    if len(pairs) < 2:
        raise NoOverlap(f"only {len(pairs)} associated timestamps")
    src = np.array([est.entries[i][1].translation for i, _ in pairs])
    dst = np.array([gt.entries[j][1].translation for _, j in pairs])
    align = best_fit_alignment(src, dst)
    diff = dst - (src @ align.rotation.T + align.translation)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1,
        per_meter: bool = False) -> tuple[float, float]:
    """Relative pose error over intervals of `delta` associated frames.

    Returns (translation RMSE, rotation RMSE in degrees), per frame by
    default; per_meter divides each interval error by the ground-truth
    distance traveled over it.
    """
    pairs = associate(est, gt)
    if len(pairs) < delta + 1:
        raise NoOverlap(f"need {delta + 1} associated poses, got {len(pairs)}")
    t_errs, r_errs = [], []
    for k in range(len(pairs) - delta):
        i0, j0 = pairs[k]
        i1, j1 = pairs[k + delta]
        rel_est = compose(inverse(est.entries[i0][1]), est.entries[i1][1])
        rel_gt = compose(inverse(gt.entries[j0][1]), gt.entries[j1][1])
        err = compose(inverse(rel_gt), rel_est)
        t_err = float(np.linalg.norm(err.translation))
        r_err = np.degrees(rotation_angle(err.rotation))
        if per_meter:
            dist = float(np.linalg.norm(rel_gt.translation))
            if dist < 1e-9:
                continue
            t_err /= dist
            r_err /= dist
        t_errs.append(t_err)
        r_errs.append(r_err)
    if not t_errs:
        raise NoOverlap("no usable intervals")
    return (float(np.sqrt(np.mean(np.square(t_errs)))),
            float(np.sqrt(np.mean(np.square(r_errs)))))


def out_of_plane_drift(traj: Trajectory, plane) -> float:
    """Largest deviation of the trajectory's signed plane distance from its
    initial value."""
    heights = [plane.signed_distance(pose.translation) for _, pose in traj.entries]
    h0 = heights[0]
    return float(max(abs(h - h0) for h in heights))
