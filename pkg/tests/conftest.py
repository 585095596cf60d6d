"""Shared synthetic fixtures: meshes, chains, and randomized trees."""

import numpy as np
import pytest

from chainskin.chain import Joint, KinematicChain, Pose
from chainskin.se3 import RigidTransform
from chainskin.skinning import AnchorSet, Mesh, build_associations, repose


def make_cylinder_mesh(n_rings=30, n_segments=20, radius=0.15, length=2.0):
    """Cylinder along +z from 0 to length; n_rings * n_segments vertices."""
    zs = np.linspace(0.0, length, n_rings)
    angles = np.linspace(0.0, 2.0 * np.pi, n_segments, endpoint=False)
    vertices = np.array(
        [
            [radius * np.cos(a), radius * np.sin(a), z]
            for z in zs
            for a in angles
        ]
    )
    faces = []
    for r in range(n_rings - 1):
        for s in range(n_segments):
            a = r * n_segments + s
            b = r * n_segments + (s + 1) % n_segments
            c = a + n_segments
            d = b + n_segments
            faces.append([a, b, d])
            faces.append([a, d, c])
    return Mesh(vertices, np.array(faces, dtype=int))


def make_serial_chain(positions):
    """Serial chain with joint ids 0..n-1 down the list."""
    joints = [Joint(0, None, positions[0])]
    joints += [Joint(i, i - 1, p) for i, p in enumerate(positions[1:], start=1)]
    return KinematicChain(tuple(joints))


def make_random_tree_chain(rng, n_joints, scale=1.0):
    """Random tree with shuffled ids and non-degenerate link lengths."""
    ids = rng.permutation(n_joints).tolist()
    positions = {ids[0]: rng.normal(size=3) * scale}
    joints = [None] * n_joints
    joints[0] = Joint(ids[0], None, positions[ids[0]])
    for i in range(1, n_joints):
        parent = ids[int(rng.integers(0, i))]
        offset = rng.normal(size=3)
        offset *= (0.3 + rng.random()) * scale / np.linalg.norm(offset)
        positions[ids[i]] = positions[parent] + offset
        joints[i] = Joint(ids[i], parent, positions[ids[i]])
    return KinematicChain(tuple(joints))


def make_two_link_arm(n_rings=30, n_segments=20, radius=0.15):
    """Cylinder with a 3-joint chain along its axis and 6 nearby anchors.

    Anchors sit at the root, mid-links, elbow (a pair), and tip, offset
    along x (the fixture's bend axis), so joint transport through the
    anchor blend closely tracks true elbow bends."""
    mesh = make_cylinder_mesh(n_rings, n_segments, radius, 2.0)
    chain = make_serial_chain(
        [np.zeros(3), np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 2.0])]
    )
    offsets = np.array(
        [
            [0.05, 0.0, 0.0],
            [-0.05, 0.0, 0.5],
            [0.05, 0.0, 1.0],
            [-0.05, 0.0, 1.0],
            [0.05, 0.0, 1.5],
            [-0.05, 0.0, 2.0],
        ]
    )
    diag = np.linalg.norm(
        mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
    )
    anchors = AnchorSet(offsets, (0.18 * diag) ** 2)
    return mesh, chain, anchors


def elbow_pose(angle, axis=(1.0, 0.0, 0.0), twist=0.0, root=None):
    """Bend the two-link arm at the middle joint by `angle` about `axis`."""
    rotation = np.asarray(axis, dtype=float) * angle
    kwargs = {}
    if root is not None:
        kwargs = {"root_rotation": root[0], "root_translation": root[1]}
    return Pose(joint_rotations={2: rotation}, twists={2: twist} if twist else {},
                **kwargs)


def elbow_targets(mesh, chain, anchors, angles):
    """Deformed copies of the arm at the given elbow angles."""
    associations = build_associations(chain, anchors)
    out = []
    for angle in angles:
        result = repose(mesh, chain, anchors, associations, elbow_pose(angle))
        out.append(result.mesh.vertices)
    return out


@pytest.fixture
def two_link_arm():
    return make_two_link_arm()


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
