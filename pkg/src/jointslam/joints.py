"""Mechanical joints as twist-space constraints.

A joint restricts the twists of a moving body to a linear subspace of R^6
(its freedom space), spanned by a basis expressed in the joint coordinate
frame. The orthogonal projector onto that subspace, conjugated into the
world frame by the adjoint of the joint pose, is what the trackers and the
bundle adjustment apply to twists.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DegeneratePlane, RankDeficient
from .liegroup import Pose, adjoint, inverse


class JointType(Enum):
    FREE = "free"
    FIXED = "fixed"
    PLANAR = "planar"
    REVOLUTE = "revolute"
    PRISMATIC = "prismatic"


DOF = {
    JointType.FREE: 6,
    JointType.FIXED: 0,
    JointType.PLANAR: 3,
    JointType.REVOLUTE: 1,
    JointType.PRISMATIC: 1,
}


def freedom_basis(jtype: JointType) -> np.ndarray:
    """Canonical joint-frame basis of the freedom space, as a 6xd matrix.

    Axis conventions (joint frame): planar joints move in the xy-plane and
    rotate about z; revolute joints rotate about z; prismatic joints slide
    along z.
    """
    eye = np.eye(6)
    if jtype is JointType.FREE:
        return eye.copy()
    if jtype is JointType.FIXED:
        return np.zeros((6, 0))
    if jtype is JointType.PLANAR:
        return eye[:, [0, 1, 5]].copy()
    if jtype is JointType.REVOLUTE:
        return eye[:, [5]].copy()
    if jtype is JointType.PRISMATIC:
        return eye[:, [2]].copy()
    raise ValueError(f"unknown joint type {jtype}")


def projector(basis: np.ndarray) -> np.ndarray:
    """Orthogonal projector A (A^T A)^-1 A^T onto the span of the basis."""
    basis = np.asarray(basis, dtype=float)
    if basis.shape[1] == 0:
        return np.zeros((6, 6))
    gram = basis.T @ basis
    if np.linalg.det(gram) < 1e-12:
        raise RankDeficient("freedom basis is not full column rank")
    return basis @ np.linalg.inv(gram) @ basis.T


@dataclass(frozen=True)
class TwistProjector:
    """Joint-frame projector and its world-frame conjugation.

    pi_l is symmetric idempotent; p_world = Ad_wl pi_l Ad_lw is idempotent
    but in general not symmetric (the adjoint is not orthogonal).
    """

    pi_l: np.ndarray
    p_world: np.ndarray


@dataclass(frozen=True)
class JointSpec:
    """A mechanical joint: type, its coordinate frame in the world, the
    freedom basis, and the semantic classes of the bodies it links."""

    jtype: JointType
    frame: Pose
    basis: np.ndarray = field(default=None)  # type: ignore[assignment]
    parent_class: str = ""
    child_class: str = ""

    def __post_init__(self):
        if self.basis is None:
            object.__setattr__(self, "basis", freedom_basis(self.jtype))

    @property
    def dof(self) -> int:
        return self.basis.shape[1]

    @staticmethod
    def free() -> "JointSpec":
        return JointSpec(JointType.FREE, Pose.identity())


def conjugated_projector(joint: JointSpec) -> TwistProjector:
    """World-frame twist projector P = Ad_wl pi_l Ad_lw of a joint."""
    pi_l = projector(joint.basis)
    ad = adjoint(joint.frame)
    ad_inv = adjoint(inverse(joint.frame))
    return TwistProjector(pi_l=pi_l, p_world=ad @ pi_l @ ad_inv)


def world_freedom_basis(joint: JointSpec) -> np.ndarray:
    """World-frame basis of the joint's freedom space: Ad_wl A_l.

    Free joints return the identity so that constrained optimization in
    these coordinates coincides exactly with unconstrained optimization.
    """
    if joint.jtype is JointType.FREE:
        return np.eye(6)
    return adjoint(joint.frame) @ joint.basis


def joint_from_plane(plane, jtype: JointType, anchor,
                     parent_class: str = "", child_class: str = "") -> JointSpec:
    """Build a joint whose frame sits on a plane.

    The frame origin is the projection of the anchor onto the plane and its
    z-axis is the plane's unit normal; x completes the frame from the world
    x-axis by Gram-Schmidt (world y-axis if nearly parallel to the normal).
    """
    if jtype not in (JointType.PLANAR, JointType.REVOLUTE, JointType.PRISMATIC):
        raise ValueError(f"joint_from_plane supports planar/revolute/prismatic, got {jtype}")
    pi = np.asarray(getattr(plane, "pi", plane), dtype=float).reshape(4)
    normal = pi[:3]
    norm = np.linalg.norm(normal)
    if norm < 1e-9:
        raise DegeneratePlane("plane normal is zero")
    z = normal / norm
    anchor = np.asarray(anchor, dtype=float).reshape(3)
    # signed distance of the anchor, with the plane scaled so |normal| = 1
    dist = (pi @ np.append(anchor, 1.0)) / norm
    origin = anchor - dist * z
    seed = np.array([1.0, 0.0, 0.0])
    if abs(seed @ z) > 0.9:
        seed = np.array([0.0, 1.0, 0.0])
    x = seed - (seed @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rotation = np.column_stack([x, y, z])
    return JointSpec(jtype, Pose(rotation, origin), freedom_basis(jtype),
                     parent_class, child_class)


# Class-pair -> joint mapping. Keys are child class labels; values are
# (parent class, joint type). Classes not listed get a free joint.
DEFAULT_JOINT_TABLE: dict[str, tuple[str, JointType]] = {
    "car": ("road", JointType.PLANAR),
    "bus": ("road", JointType.PLANAR),
    "door": ("wall", JointType.REVOLUTE),
}


def parse_joint_table(raw: dict) -> dict[str, tuple[str, JointType]]:
    """Parse {"child": ["parent", "planar"], ...} into a joint table."""
    table = {}
    for child, entry in raw.items():
        parent, type_name = entry
        table[str(child)] = (str(parent), JointType(str(type_name).lower()))
    return table
