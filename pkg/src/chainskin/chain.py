"""Kinematic chains: tree structure, forward kinematics, chain recovery,
and residual-based link-length updates.

Array-valued operations align with the order of ``KinematicChain.joints``.
Links are identified by their child joint and enumerated in hierarchical
order (see :func:`links`); per-link quantities (residuals, twists) follow
that order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ChainError, ConfigError
from .se3 import RigidTransform, apply_point, compose, rotation_from_rotvec


@dataclass(frozen=True)
class Joint:
    """A joint with an optional parent; the parentless joint is the root."""

    id: int
    parent: Optional[int]
    position: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, dtype=float)
        if p.shape != (3,):
            raise ValueError(f"joint {self.id}: position must be a 3-vector")
        p.setflags(write=False)
        object.__setattr__(self, "position", p)


@dataclass(frozen=True)
class KinematicChain:
    """Tree of joints with fixed-length links between parent/child pairs."""

    joints: tuple

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))

    def index_of(self, joint_id: int) -> int:
        for i, j in enumerate(self.joints):
            if j.id == joint_id:
                return i
        raise KeyError(f"unknown joint id {joint_id}")

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def positions(self) -> np.ndarray:
        """(n_joints, 3) canonical positions in joints order."""
        return np.array([j.position for j in self.joints])

    def root_id(self) -> int:
        roots = [j.id for j in self.joints if j.parent is None]
        if len(roots) != 1:
            raise ChainError(f"chain must have exactly one root, found {len(roots)}")
        return roots[0]

    def children_of(self, joint_id: int) -> list:
        return sorted(j.id for j in self.joints if j.parent == joint_id)

    def with_positions(self, positions: np.ndarray) -> "KinematicChain":
        """Same topology with replaced joint positions (joints order)."""
        positions = np.asarray(positions, dtype=float)
        if positions.shape != (self.n_joints, 3):
            raise ValueError("one position per joint required")
        return KinematicChain(
            tuple(
                Joint(j.id, j.parent, positions[i])
                for i, j in enumerate(self.joints)
            )
        )


@dataclass(frozen=True)
class Pose:
    """Root pose plus per-joint link rotations and per-link twists.

    The root pose is kept in its axis-angle + translation parametrization
    so pose files round-trip bit-exactly; :attr:`root` exposes it as a
    RigidTransform. ``joint_rotations`` maps a non-root joint id to an
    axis-angle 3-vector; the rotation pivots about the joint's parent,
    moving the joint's incoming link and everything below it. ``twists``
    maps a link's child joint id to an axial rotation angle of that link;
    twists move anchors, never joints. Missing entries mean identity /
    zero.
    """

    root_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    joint_rotations: dict = field(default_factory=dict)
    twists: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("root_rotation", "root_translation"):
            v = np.array(getattr(self, name), dtype=float)
            if v.shape != (3,):
                raise ValueError(f"{name} must be a 3-vector")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def root(self) -> RigidTransform:
        return RigidTransform(
            rotation_from_rotvec(self.root_rotation), self.root_translation
        )

    @staticmethod
    def identity() -> "Pose":
        return Pose()


@dataclass(frozen=True)
class LinkResiduals:
    """Per-link length corrections, clipped as gamma * tanh(raw).

    Entries follow the link order of :func:`links`.
    """

    raw: np.ndarray
    gamma: float

    def __post_init__(self):
        r = np.array(self.raw, dtype=float).reshape(-1)
        r.setflags(write=False)
        object.__setattr__(self, "raw", r)
        if self.gamma <= 0.0:
            raise ConfigError("residual clip bound gamma must be positive")

    def clipped(self) -> np.ndarray:
        """Clipped corrections, each in (-gamma, gamma)."""
        return self.gamma * np.tanh(self.raw)


def validate_chain(chain: KinematicChain) -> list:
    """Return a list of human-readable diagnostics; empty iff the chain
    is a proper tree with positive-length links."""
    diags = []
    ids = [j.id for j in chain.joints]
    seen = set()
    for i in ids:
        if i in seen:
            diags.append(f"duplicate joint id {i}")
        seen.add(i)
    if diags:
        return diags

    roots = [j.id for j in chain.joints if j.parent is None]
    if not roots:
        diags.append("no root: every joint has a parent")
    elif len(roots) > 1:
        diags.append(f"multiple roots: joints {sorted(roots)} have no parent")

    by_id = {j.id: j for j in chain.joints}
    for j in chain.joints:
        if j.parent is not None and j.parent not in by_id:
            diags.append(f"joint {j.id} references unknown parent {j.parent}")

    # Walk parent pointers; revisiting a joint on the same walk is a cycle.
    cyclic = set()
    for j in chain.joints:
        path = set()
        cur = j
        while cur is not None and cur.parent is not None:
            if cur.id in path:
                cyclic.add(cur.id)
                break
            path.add(cur.id)
            cur = by_id.get(cur.parent)
    if cyclic:
        diags.append(f"cycle involving joints {sorted(cyclic)}")

    if not diags:
        for j in chain.joints:
            if j.parent is None:
                continue
            length = np.linalg.norm(j.position - by_id[j.parent].position)
            if length < 1e-12:
                diags.append(f"zero-length link ({j.parent}, {j.id})")
    return diags


def _check_tree(chain: KinematicChain) -> None:
    diags = [d for d in validate_chain(chain) if not d.startswith("zero-length")]
    if diags:
        raise ChainError("; ".join(diags))


def hierarchical_order(chain: KinematicChain) -> list:
    """Joint ids, root first, every joint after its parent.

    Deterministic: breadth-first with children visited in id order.
    """
    _check_tree(chain)
    order = [chain.root_id()]
    queue = list(order)
    while queue:
        current = queue.pop(0)
        for child in chain.children_of(current):
            order.append(child)
            queue.append(child)
    if len(order) != chain.n_joints:
        raise ChainError("chain contains joints unreachable from the root")
    return order


def links(chain: KinematicChain) -> list:
    """(parent_id, child_id) pairs in hierarchical order of the child."""
    root = chain.root_id()
    by_id = {j.id: j for j in chain.joints}
    return [
        (by_id[k].parent, k) for k in hierarchical_order(chain) if k != root
    ]


def link_lengths(chain: KinematicChain) -> np.ndarray:
    """Canonical link lengths in :func:`links` order."""
    by_id = {j.id: j for j in chain.joints}
    return np.array(
        [
            np.linalg.norm(by_id[k].position - by_id[j].position)
            for j, k in links(chain)
        ]
    )


def forward_kinematics(chain: KinematicChain, pose: Pose):
    """Per-joint canonical-to-deformed rigid maps and deformed positions.

    Returns ``(transforms, positions)``: a list of RigidTransform and an
    (n_joints, 3) array, both in joints order. Each non-root joint's
    rotation pivots about its parent's deformed position; the root
    transform is applied outermost. Link lengths are invariant.
    """
    order = hierarchical_order(chain)
    by_id = {j.id: j for j in chain.joints}
    root = order[0]

    valid_rotation_ids = set(order) - {root}
    for joint_id in pose.joint_rotations:
        if joint_id not in valid_rotation_ids:
            raise ValueError(f"pose rotation for unknown or root joint {joint_id}")
    for joint_id in pose.twists:
        if joint_id not in valid_rotation_ids:
            raise ValueError(f"pose twist for unknown or root joint {joint_id}")

    local = {root: RigidTransform.identity()}
    for k in order[1:]:
        j = by_id[k].parent
        rotvec = np.asarray(pose.joint_rotations.get(k, np.zeros(3)), dtype=float)
        if rotvec.shape != (3,):
            raise ValueError(f"pose rotation for joint {k} must be a 3-vector")
        rot = rotation_from_rotvec(rotvec)
        pivot = by_id[j].position
        about_pivot = RigidTransform(rot, pivot - rot.matrix @ pivot)
        local[k] = compose(local[j], about_pivot)

    transforms = [compose(pose.root, local[j.id]) for j in chain.joints]
    positions = np.array(
        [apply_point(t, j.position) for t, j in zip(transforms, chain.joints)]
    )
    return transforms, positions


def recover_chain(chain: KinematicChain, unconstrained: np.ndarray) -> np.ndarray:
    """Revise unconstrained joint positions so every link regains its
    canonical length while keeping the unconstrained link directions.

    Processes links in hierarchical order; repositioning a child carries
    its whole subtree along, so each link direction is measured between
    the original unconstrained endpoints. The root keeps its
    unconstrained position. Returns an (n_joints, 3) array.
    """
    unconstrained = np.asarray(unconstrained, dtype=float)
    if unconstrained.shape != (chain.n_joints, 3):
        raise ValueError("one unconstrained position per joint required")
    order = hierarchical_order(chain)
    by_id = {j.id: j for j in chain.joints}
    idx = {j.id: i for i, j in enumerate(chain.joints)}

    revised = np.empty_like(unconstrained)
    revised[idx[order[0]]] = unconstrained[idx[order[0]]]
    for k in order[1:]:
        j = by_id[k].parent
        length = np.linalg.norm(by_id[k].position - by_id[j].position)
        direction = unconstrained[idx[k]] - unconstrained[idx[j]]
        span = np.linalg.norm(direction)
        if span < 1e-12 * length:
            warnings.warn(
                f"degenerate unconstrained direction for link ({j}, {k}); "
                "reusing the canonical offset"
            )
            revised[idx[k]] = revised[idx[j]] + (by_id[k].position - by_id[j].position)
        else:
            revised[idx[k]] = revised[idx[j]] + (length / span) * direction
    return revised


def apply_residuals(
    chain: KinematicChain, residuals: LinkResiduals
) -> KinematicChain:
    """New chain with each link length changed by gamma * tanh(raw).

    Link directions and the connection order are unchanged; every
    descendant shifts along with its subtree root. Requires gamma
    strictly below the smallest canonical link length so updated lengths
    stay positive.
    """
    chain_links = links(chain)
    if residuals.raw.shape != (len(chain_links),):
        raise ValueError(
            f"expected {len(chain_links)} residuals, got {residuals.raw.shape[0]}"
        )
    lengths = link_lengths(chain)
    if residuals.gamma >= lengths.min():
        raise ConfigError(
            "gamma must be smaller than the minimum canonical link length"
        )
    clipped = residuals.clipped()
    if np.all(clipped == 0.0):
        return chain

    by_id = {j.id: j for j in chain.joints}
    idx = {j.id: i for i, j in enumerate(chain.joints)}
    updated = chain.positions().copy()
    for (j, k), length, corr in zip(chain_links, lengths, clipped):
        direction = (by_id[k].position - by_id[j].position) / length
        updated[idx[k]] = updated[idx[j]] + (length + corr) * direction
    return chain.with_positions(updated)
