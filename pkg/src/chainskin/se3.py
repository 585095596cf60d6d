"""Rigid-body math: SO(3) rotations and SE(3) transforms.

Rotations are stored as 3x3 matrices; axis-angle is an I/O and
optimization parametrization only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9


def _readonly(a, shape, name):
    out = np.array(a, dtype=float)
    if out.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Rotation:
    """Element of SO(3), validated on construction."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _readonly(self.matrix, (3, 3), "rotation matrix")
        object.__setattr__(self, "matrix", m)
        if np.linalg.norm(m.T @ m - np.eye(3)) > _ORTHO_TOL:
            raise ValueError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation matrix must have determinant +1")

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    def apply(self, x) -> np.ndarray:
        return self.matrix @ np.asarray(x, dtype=float)


@dataclass(frozen=True)
class RigidTransform:
    """Element of SE(3): rotation followed by translation."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(
            self, "translation", _readonly(self.translation, (3,), "translation")
        )

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_translation(t) -> "RigidTransform":
        return RigidTransform(Rotation.identity(), np.asarray(t, dtype=float))

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m


def apply_point(t: RigidTransform, x) -> np.ndarray:
    """R @ x + translation."""
    return t.rotation.matrix @ np.asarray(x, dtype=float) + t.translation


def apply_points(t: RigidTransform, xs) -> np.ndarray:
    """Vectorized apply_point over an (n, 3) array."""
    xs = np.asarray(xs, dtype=float)
    return xs @ t.rotation.matrix.T + t.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equal to applying b first, then a."""
    r = a.rotation.matrix @ b.rotation.matrix
    t = a.rotation.matrix @ b.translation + a.translation
    return RigidTransform(Rotation(r), t)


def invert(t: RigidTransform) -> RigidTransform:
    """(R^T, -R^T t); exact inverse up to rounding."""
    rt = t.rotation.matrix.T
    return RigidTransform(Rotation(rt), -(rt @ t.translation))


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ x == cross(v, x)."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_rotation(axis, angle: float) -> Rotation:
    """Rodrigues rotation about unit(axis) by angle (radians)."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        if angle == 0.0:
            return Rotation.identity()
        raise ValueError("rotation axis must be nonzero")
    k = skew(axis / n)
    m = np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
    return Rotation(m)


def rotation_from_rotvec(w) -> Rotation:
    """Rotation from an axis-angle 3-vector (axis * angle)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta == 0.0:
        return Rotation.identity()
    return axis_angle_rotation(w / theta, theta)


def so3_right_jacobian(w) -> np.ndarray:
    """Right Jacobian J_r of SO(3) at rotation vector w.

    Satisfies exp((w + d)^) = exp(w^) @ exp((J_r(w) d)^) to first order
    in d, which converts local right-perturbation gradients into
    gradients with respect to the rotation-vector parameters.
    """
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < 1e-5:
        # Taylor expansion, accurate to ~theta^4
        c1 = 0.5 - theta**2 / 24.0
        c2 = 1.0 / 6.0 - theta**2 / 120.0
    else:
        c1 = (1.0 - np.cos(theta)) / theta**2
        c2 = (theta - np.sin(theta)) / theta**3
    return np.eye(3) - c1 * k + c2 * (k @ k)


def rotation_between(u, v) -> Rotation:
    """Minimal-angle rotation taking direction u to direction v.

    Anti-parallel inputs rotate by pi about a deterministic axis
    perpendicular to u (the coordinate axis least aligned with u,
    orthogonalized against it).
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("rotation_between requires nonzero vectors")
    a = u / nu
    b = v / nv
    c = np.cross(a, b)
    s = np.linalg.norm(c)
    if s < 1e-8:
        if np.dot(a, b) > 0.0:
            return Rotation.identity()
        e = np.zeros(3)
        e[int(np.argmin(np.abs(a)))] = 1.0
        axis = e - np.dot(e, a) * a
        axis /= np.linalg.norm(axis)
        return axis_angle_rotation(axis, np.pi)
    return axis_angle_rotation(c / s, float(np.arctan2(s, np.dot(a, b))))
