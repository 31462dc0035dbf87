"""Geometry primitives and forward kinematics for serial revolute arms.

Conventions
-----------
- Quaternions are ``(w, x, y, z)`` with the Hamilton product and right-handed
  frames. Stored orientations are canonicalized to ``w >= 0``.
- Each link rotates about its own axis (expressed in the parent frame) and
  then translates by its length along the local x axis, so a straight planar
  arm with z-axis joints lies along +x at zero angles.
- All batched helpers accept a leading batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_multiply(a, b):
    """Hamilton product ``a * b`` over the trailing axis."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    half = 0.5 * np.asarray(angle, dtype=float)
    s = np.sin(half)[..., None]
    return np.concatenate([np.cos(half)[..., None], s * axis], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_rotate(q, v):
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), v)


def canonical_quat(q):
    """Normalize and flip sign so that the scalar part is non-negative."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


@dataclass(frozen=True)
class Pose:
    """Position in meters plus a unit quaternion orientation."""

    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        q = np.array(self.orientation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ContractViolation("orientation quaternion must be finite and nonzero")
        q = canonical_quat(q)
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.orientation)
        T[:3, 3] = self.position
        return T


@dataclass(frozen=True)
class Link:
    length: float
    axis: tuple = (0.0, 0.0, 1.0)
    limits: tuple = (-np.pi, np.pi)
    max_speed: float = 1.0

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        norm = np.linalg.norm(axis)
        if not self.length > 0:
            raise ContractViolation(f"link length must be > 0, got {self.length}")
        if norm == 0 or not np.isfinite(norm):
            raise ContractViolation("link axis must be a nonzero finite vector")
        lo, hi = self.limits
        if not lo < hi:
            raise ContractViolation(f"joint limits must satisfy lo < hi, got {self.limits}")
        if not self.max_speed > 0:
            raise ContractViolation(f"max joint speed must be > 0, got {self.max_speed}")
        object.__setattr__(self, "axis", tuple(float(a) for a in axis / norm))
        object.__setattr__(self, "limits", (float(lo), float(hi)))


@dataclass(frozen=True)
class KinematicChain:
    links: tuple
    base: Pose = field(default_factory=lambda: Pose(np.zeros(3)))

    def __post_init__(self):
        links = tuple(self.links)
        if len(links) < 2:
            raise ContractViolation("a kinematic chain needs at least 2 links")
        object.__setattr__(self, "links", links)

    @property
    def dof(self) -> int:
        return len(self.links)

    @property
    def lengths(self):
        return np.array([l.length for l in self.links])

    @property
    def axes(self):
        return np.array([l.axis for l in self.links])

    @property
    def lower(self):
        return np.array([l.limits[0] for l in self.links])

    @property
    def upper(self):
        return np.array([l.limits[1] for l in self.links])

    @property
    def max_speed(self):
        return np.array([l.max_speed for l in self.links])

    @property
    def reach(self) -> float:
        """Radius of the ball around the base that contains the workspace."""
        return float(self.lengths.sum())

    def clamp(self, q):
        return np.clip(q, self.lower, self.upper)


def trig_encode(q):
    """Encode joint angles as interleaved ``(sin, cos)`` pairs.

    Works on a single joint vector or a batch; the trailing axis of length
    ``dof`` becomes ``2 * dof``.
    """
    q = np.asarray(q, dtype=float)
    return np.stack([np.sin(q), np.cos(q)], axis=-1).reshape(q.shape[:-1] + (2 * q.shape[-1],))


def fk_batch(chain: KinematicChain, q, lengths=None):
    """Vectorized forward kinematics.

    ``q`` has shape ``(N, dof)``; ``lengths`` optionally overrides the link
    lengths per sample (shape ``(N, dof)`` or ``(dof,)``). Returns end-effector
    positions ``(N, 3)`` and canonical quaternions ``(N, 4)``.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    n = q.shape[0]
    lengths = chain.lengths if lengths is None else np.asarray(lengths, dtype=float)
    lengths = np.broadcast_to(lengths, (n, chain.dof))
    pos = np.broadcast_to(chain.base.position, (n, 3)).copy()
    rot = np.broadcast_to(chain.base.orientation, (n, 4)).copy()
    for i, axis in enumerate(chain.axes):
        rot = quat_multiply(rot, quat_from_axis_angle(axis, q[:, i]))
        w, x, y, z = rot.T
        x_axis = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)], axis=-1)
        pos = pos + x_axis * lengths[:, i : i + 1]
    return pos, canonical_quat(rot)


def forward_kinematics(chain: KinematicChain, q: Sequence[float]) -> Pose:
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.dof,):
        raise ContractViolation(f"joint vector has shape {q.shape}, chain expects ({chain.dof},)")
    pos, quat = fk_batch(chain, q[None])
    return Pose(pos[0], quat[0])


def geodesic_angle(q1, q2, tol: float = 1e-6) -> float:
    """Rotation angle between two unit quaternions, in ``[0, pi]``."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    for name, q in (("q1", q1), ("q2", q2)):
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > tol:
            raise ContractViolation(f"{name} must be a unit quaternion within {tol}")
    return float(geodesic_angle_batch(q1, q2))


def geodesic_angle_batch(q1, q2):
    """Unchecked, broadcasting variant of :func:`geodesic_angle`."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    # half-angle form; arccos(|<q1,q2>|) loses ~8 digits near zero
    s = np.where(np.sum(q1 * q2, axis=-1) < 0.0, -1.0, 1.0)[..., None]
    return 4.0 * np.arctan2(np.linalg.norm(q1 - s * q2, axis=-1), np.linalg.norm(q1 + s * q2, axis=-1))
