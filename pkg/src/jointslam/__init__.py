"""Stereo dynamic SLAM with mechanical-joint twist constraints."""

from .liegroup import Pose, Twist, exp_se3, log_se3, adjoint, compose, inverse

__all__ = [
    "Pose",
    "Twist",
    "exp_se3",
    "log_se3",
    "adjoint",
    "compose",
    "inverse",
]

__version__ = "0.1.0"
