"""Deformation anchors: link associations, skinning weights, and
forward/backward blend skinning.

Anchors are canonical-space control points. Each anchor is tied to its
closest chain link by three constant association parameters (arc length
alpha along the link, offset norm beta, and an offset-aligning rotation),
so posing the chain repositions every anchor deterministically. Surface
points are deformed by a softmax-weighted blend of per-anchor rigid
transforms, with the root pose applied outermost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chain import KinematicChain, Pose, forward_kinematics, links
from .se3 import (
    RigidTransform,
    Rotation,
    apply_points,
    axis_angle_rotation,
    rotation_between,
)


@dataclass(frozen=True)
class AnchorSet:
    """Canonical anchor positions plus the softmax temperature."""

    positions: np.ndarray
    temperature: float

    def __post_init__(self):
        p = np.array(self.positions, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 1:
            raise ValueError("anchor positions must be a nonempty (n, 3) array")
        p.setflags(write=False)
        object.__setattr__(self, "positions", p)
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")

    @property
    def count(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class Association:
    """Constant parameters tying one anchor to one chain link."""

    anchor_id: int
    link: tuple
    alpha: float
    beta: float
    g: Rotation


@dataclass(frozen=True)
class SkinningWeights:
    """Nonnegative blend coefficients over anchors, summing to one."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if np.any(w < 0.0):
            raise ValueError("skinning weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("skinning weights must sum to one")


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh: (n, 3) vertices and (m, 3) vertex-index faces."""

    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=int))

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.faces, dtype=int).reshape(-1, 3)
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face indices out of range")


def build_associations(chain: KinematicChain, anchors: AnchorSet) -> list:
    """Associate each anchor with its closest link.

    The intersection point is the closest point on the closed segment
    (clamped at the endpoints). Ties go to the smallest (parent, child)
    pair. The aligning rotation maps the link direction onto the
    anchor-offset direction and is the identity for on-link anchors.
    """
    by_id = {j.id: j for j in chain.joints}
    segs = sorted(links(chain))
    out = []
    for anchor_id, a in enumerate(anchors.positions):
        best = None
        for j, k in segs:
            pj = by_id[j].position
            seg = by_id[k].position - pj
            s = float(np.clip(np.dot(a - pj, seg) / np.dot(seg, seg), 0.0, 1.0))
            m = pj + s * seg
            dist = float(np.linalg.norm(a - m))
            if best is None or dist < best[0]:
                best = (dist, (j, k), m, seg)
        beta, link, m, seg = best
        alpha = float(np.linalg.norm(m - by_id[link[0]].position))
        if beta < 1e-12:
            g = Rotation.identity()
        else:
            g = rotation_between(seg, a - m)
        out.append(Association(anchor_id, link, alpha, beta, g))
    return out


def anchor_positions(
    chain: KinematicChain,
    associations: list,
    deformed_joints: np.ndarray,
    twists: dict | None = None,
) -> np.ndarray:
    """Anchor positions implied by deformed joints and fixed associations.

    For anchor i on link (j, k):
        a~_i = p~_j + alpha * d + beta * R_twist(theta, d) @ G @ d
    with d the deformed link vector divided by the *canonical* link
    length of ``chain``. With length-preserving joints d is a unit
    vector, the beta leg keeps its norm, and the canonical configuration
    reproduces the stored anchors. Twists (keyed by child joint id)
    rotate the offset about the deformed link direction.
    """
    deformed_joints = np.asarray(deformed_joints, dtype=float)
    if deformed_joints.shape != (chain.n_joints, 3):
        raise ValueError("one deformed position per chain joint required")
    twists = twists or {}
    by_id = {j.id: j for j in chain.joints}
    idx = {j.id: i for i, j in enumerate(chain.joints)}

    out = np.empty((len(associations), 3))
    for assoc in associations:
        j, k = assoc.link
        if j not in idx or k not in idx:
            raise ValueError(f"association references unknown link ({j}, {k})")
        length = np.linalg.norm(by_id[k].position - by_id[j].position)
        d = (deformed_joints[idx[k]] - deformed_joints[idx[j]]) / length
        offset = assoc.beta * (assoc.g.matrix @ d)
        theta = float(twists.get(k, 0.0))
        if theta != 0.0:
            offset = axis_angle_rotation(d, theta).matrix @ offset
        out[assoc.anchor_id] = deformed_joints[idx[j]] + assoc.alpha * d + offset
    return out


def revised_anchor_transforms(
    canonical_anchors: np.ndarray, deformed_anchors: np.ndarray
) -> list:
    """Translation-only transforms [I | a~ - a], one per anchor."""
    canonical_anchors = np.asarray(canonical_anchors, dtype=float)
    deformed_anchors = np.asarray(deformed_anchors, dtype=float)
    if canonical_anchors.shape != deformed_anchors.shape:
        raise ValueError("canonical and deformed anchor counts differ")
    return [
        RigidTransform.from_translation(d - c)
        for c, d in zip(canonical_anchors, deformed_anchors)
    ]


def weight_matrix(points, anchor_positions_, temperature: float) -> np.ndarray:
    """(n_points, n_anchors) softmax of -squared distance / temperature."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    anchor_positions_ = np.asarray(anchor_positions_, dtype=float)
    d2 = np.sum(
        (points[:, None, :] - anchor_positions_[None, :, :]) ** 2, axis=2
    )
    logits = -d2 / temperature
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w


def forward_skin_weights(x, anchors: AnchorSet) -> SkinningWeights:
    """Skinning weights of a canonical point: softmax(-|x - a_i|^2 / tau)."""
    return SkinningWeights(
        weight_matrix(x, anchors.positions, anchors.temperature)[0]
    )


def _stack(transforms) -> tuple:
    rot = np.array([t.rotation.matrix for t in transforms])
    trans = np.array([t.translation for t in transforms])
    return rot, trans


def blend_points(points, weights, rotations, translations) -> np.ndarray:
    """Apply the weighted blend of rigid transforms to each point.

    ``weights`` is (n_points, n_anchors); ``rotations``/(n_a, 3, 3) and
    ``translations``/(n_a, 3) are stacked per-anchor transforms.
    """
    points = np.asarray(points, dtype=float)
    moved = np.einsum("aij,vj->vai", rotations, points) + translations[None, :, :]
    return np.einsum("va,vai->vi", weights, moved)


def deform_point(
    x, weights: SkinningWeights, transforms: list, root: RigidTransform
) -> np.ndarray:
    """Forward blend skinning of one canonical point, root pose outermost."""
    if len(transforms) != weights.weights.shape[0]:
        raise ValueError("weight and transform counts differ")
    rot, trans = _stack(transforms)
    blended = blend_points(
        np.asarray(x, dtype=float)[None, :], weights.weights[None, :], rot, trans
    )[0]
    return root.rotation.matrix @ blended + root.translation


def backward_deform_point(
    x_t,
    deformed_anchors: np.ndarray,
    transforms: list,
    root: RigidTransform,
    temperature: float,
) -> np.ndarray:
    """Map a deformed-space point back to canonical space.

    Weights are the softmax of negative squared distances to the
    *deformed* anchors; the inverse transforms are blended and applied
    after undoing the root pose.
    """
    deformed_anchors = np.asarray(deformed_anchors, dtype=float)
    if len(transforms) != deformed_anchors.shape[0]:
        raise ValueError("anchor and transform counts differ")
    x_t = np.asarray(x_t, dtype=float)
    w = weight_matrix(x_t, deformed_anchors, temperature)[0]
    z = root.rotation.matrix.T @ (x_t - root.translation)
    rot, trans = _stack(transforms)
    inv_applied = np.einsum("aji,j->ai", rot, z) - np.einsum(
        "aji,aj->ai", rot, trans
    )
    return w @ inv_applied


def deform_mesh(
    mesh: Mesh, anchors: AnchorSet, transforms: list, root: RigidTransform
) -> Mesh:
    """Forward blend skinning of every vertex; faces are unchanged."""
    if len(transforms) != anchors.count:
        raise ValueError("anchor and transform counts differ")
    w = weight_matrix(mesh.vertices, anchors.positions, anchors.temperature)
    rot, trans = _stack(transforms)
    blended = blend_points(mesh.vertices, w, rot, trans)
    deformed = blended @ root.rotation.matrix.T + root.translation
    return Mesh(deformed, mesh.faces)


@dataclass(frozen=True)
class ReposeResult:
    """Deformed mesh plus the posed joints and anchors (root included)."""

    mesh: Mesh
    joints: np.ndarray
    anchors: np.ndarray


def repose(
    mesh: Mesh,
    chain: KinematicChain,
    anchors: AnchorSet,
    associations: list,
    pose: Pose,
) -> ReposeResult:
    """Re-pose a mesh by posing the chain and blending anchor transforms.

    Anchor repositioning runs in the pre-root frame (associations commute
    with the chain pose, not with a global rotation); the root pose is
    applied outermost, so a pure root pose moves everything rigidly.
    """
    local_pose = Pose(
        joint_rotations=pose.joint_rotations, twists=pose.twists
    )
    _, local_joints = forward_kinematics(chain, local_pose)
    local_anchors = anchor_positions(chain, associations, local_joints, pose.twists)
    transforms = revised_anchor_transforms(anchors.positions, local_anchors)
    deformed = deform_mesh(mesh, anchors, transforms, pose.root)
    return ReposeResult(
        mesh=deformed,
        joints=apply_points(pose.root, local_joints),
        anchors=apply_points(pose.root, local_anchors),
    )
