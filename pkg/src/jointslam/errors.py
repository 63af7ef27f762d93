"""Exception types shared across the package."""


class JointSlamError(Exception):
    """Base class for all package errors."""


class AngleAtPi(JointSlamError):
    """Rotation angle too close to pi: the principal log is ill-conditioned."""


class RankDeficient(JointSlamError):
    """A basis matrix does not have full column rank."""


class DegeneratePlane(JointSlamError):
    """Plane normal is (numerically) zero."""


class Degenerate(JointSlamError):
    """Input geometry is degenerate (e.g. collinear points)."""


class NoConsensus(JointSlamError):
    """RANSAC failed to find a minimal consensus set."""


class BehindCamera(JointSlamError):
    """Point has non-positive depth in the camera frame."""


class DisparityTooSmall(JointSlamError):
    """Stereo disparity below the reliable-triangulation threshold."""


class InsufficientPoints(JointSlamError):
    """Too few observations to run an estimator."""


class Diverged(JointSlamError):
    """Optimizer failed to find any cost-decreasing step."""


class EmptyWindow(JointSlamError):
    """Bundle-adjustment window contains no keyframes."""


class SingularReducedSystem(JointSlamError):
    """Schur-reduced (or dense) normal equations are singular."""


class NoOverlap(JointSlamError):
    """Trajectories share too few associated timestamps."""


class ConfigInvalid(JointSlamError):
    """Scene or pipeline configuration violates its invariants."""
