import numpy as np
import pytest

from chainskin.chain import Pose, forward_kinematics
from chainskin.se3 import (
    RigidTransform,
    apply_points,
    axis_angle_rotation,
    rotation_from_rotvec,
)
from chainskin.skinning import (
    AnchorSet,
    Mesh,
    SkinningWeights,
    anchor_positions,
    backward_deform_point,
    build_associations,
    deform_mesh,
    deform_point,
    forward_skin_weights,
    repose,
    revised_anchor_transforms,
)

from conftest import make_random_tree_chain, make_serial_chain, make_two_link_arm


def random_pose(chain, rng):
    return Pose(
        joint_rotations={
            j.id: rng.normal(size=3) * 0.7
            for j in chain.joints
            if j.parent is not None
        }
    )


class TestBuildAssociations:
    def test_anchor_on_link_interior(self):
        chain = make_serial_chain([np.zeros(3), np.array([0.0, 0.0, 2.0])])
        anchors = AnchorSet(np.array([[0.0, 0.0, 0.75]]), 1.0)
        (assoc,) = build_associations(chain, anchors)
        assert assoc.link == (0, 1)
        assert assoc.beta <= 1e-12
        assert np.array_equal(assoc.g.matrix, np.eye(3))
        assert abs(assoc.alpha - 0.75) < 1e-12

    def test_vertical_link_closed_form(self):
        # closest point on the segment is the perpendicular foot
        chain = make_serial_chain([np.zeros(3), np.array([0.0, 0.0, 2.0])])
        anchors = AnchorSet(np.array([[1.0, 0.0, 0.5]]), 1.0)
        (assoc,) = build_associations(chain, anchors)
        assert abs(assoc.alpha - 0.5) < 1e-12
        assert abs(assoc.beta - 1.0) < 1e-12
        assert np.allclose(assoc.g.matrix @ [0.0, 0, 1.0], [1.0, 0, 0], atol=1e-12)

    def test_clamps_beyond_endpoints(self):
        chain = make_serial_chain([np.zeros(3), np.array([0.0, 0.0, 2.0])])
        anchors = AnchorSet(np.array([[0.0, 0.4, 2.5]]), 1.0)
        (assoc,) = build_associations(chain, anchors)
        assert abs(assoc.alpha - 2.0) < 1e-12
        assert abs(assoc.beta - np.linalg.norm([0.0, 0.4, 0.5])) < 1e-12

    def test_equidistant_tie_breaks_to_lower_link(self):
        # y-shaped chain, anchor on the symmetry plane
        chain = make_serial_chain([np.zeros(3), np.array([1.0, 0, 0])])
        from chainskin.chain import Joint, KinematicChain

        chain = KinematicChain(
            (
                Joint(0, None, np.zeros(3)),
                Joint(1, 0, np.array([1.0, 1.0, 0.0])),
                Joint(2, 0, np.array([1.0, -1.0, 0.0])),
            )
        )
        anchors = AnchorSet(np.array([[1.0, 0.0, 0.0]]), 1.0)
        (assoc,) = build_associations(chain, anchors)
        assert assoc.link == (0, 1)

    def test_alignment_property(self, rng):
        for _ in range(30):
            chain = make_random_tree_chain(rng, 6)
            anchors = AnchorSet(rng.normal(size=(5, 3)), 1.0)
            idx = {j.id: i for i, j in enumerate(chain.joints)}
            positions = chain.positions()
            for assoc in build_associations(chain, anchors):
                if assoc.beta <= 1e-9:
                    continue
                j, k = assoc.link
                u = positions[idx[k]] - positions[idx[j]]
                u /= np.linalg.norm(u)
                m = positions[idx[j]] + assoc.alpha * u
                a = anchors.positions[assoc.anchor_id]
                target = (a - m) / np.linalg.norm(a - m)
                assert np.linalg.norm(assoc.g.matrix @ u - target) < 1e-9


class TestAnchorPositions:
    def test_canonical_fixed_point(self, rng):
        for _ in range(20):
            chain = make_random_tree_chain(rng, 6)
            anchors = AnchorSet(rng.normal(size=(7, 3)), 1.0)
            associations = build_associations(chain, anchors)
            got = anchor_positions(chain, associations, chain.positions(), None)
            assert np.abs(got - anchors.positions).max() < 1e-12

    def test_rotated_link_hand_case(self):
        # one link along +x with a perpendicular anchor; rotating the link
        # 90 degrees about z carries the offset through G
        chain = make_serial_chain([np.zeros(3), np.array([1.0, 0, 0])])
        anchors = AnchorSet(np.array([[0.5, 1.0, 0.0]]), 1.0)
        associations = build_associations(chain, anchors)
        deformed = np.array([[0.0, 0, 0], [0.0, 1.0, 0]])
        (got,) = anchor_positions(chain, associations, deformed, None)
        assert np.allclose(got, [-1.0, 0.5, 0.0], atol=1e-12)

    def test_twist_pi_reflects_anchor(self):
        chain = make_serial_chain([np.zeros(3), np.array([1.0, 0, 0])])
        anchors = AnchorSet(np.array([[0.5, 1.0, 0.0]]), 1.0)
        associations = build_associations(chain, anchors)
        (got,) = anchor_positions(
            chain, associations, chain.positions(), {1: np.pi}
        )
        assert np.allclose(got, [0.5, -1.0, 0.0], atol=1e-12)

    def test_offset_norm_conserved_under_poses(self, rng):
        for _ in range(20):
            chain = make_random_tree_chain(rng, 6)
            anchors = AnchorSet(rng.normal(size=(5, 3)), 1.0)
            associations = build_associations(chain, anchors)
            _, deformed = forward_kinematics(chain, random_pose(chain, rng))
            got = anchor_positions(chain, associations, deformed, None)
            idx = {j.id: i for i, j in enumerate(chain.joints)}
            positions = chain.positions()
            for assoc in associations:
                j, k = assoc.link
                length = np.linalg.norm(positions[idx[k]] - positions[idx[j]])
                d = (deformed[idx[k]] - deformed[idx[j]]) / length
                foot = deformed[idx[j]] + assoc.alpha * d
                offset = np.linalg.norm(got[assoc.anchor_id] - foot)
                assert abs(offset - assoc.beta) < 1e-9

    def test_wrong_joint_count_rejected(self, rng):
        chain = make_random_tree_chain(rng, 5)
        anchors = AnchorSet(rng.normal(size=(3, 3)), 1.0)
        associations = build_associations(chain, anchors)
        with pytest.raises(ValueError):
            anchor_positions(chain, associations, np.zeros((4, 3)), None)


class TestRevisedAnchorTransforms:
    def test_identity_when_unmoved(self, rng):
        a = rng.normal(size=(4, 3))
        for t in revised_anchor_transforms(a, a.copy()):
            assert np.array_equal(t.rotation.matrix, np.eye(3))
            assert np.array_equal(t.translation, np.zeros(3))

    def test_pure_translation(self):
        a = np.zeros((2, 3))
        moved = a + np.array([1.0, 2.0, 3.0])
        for t in revised_anchor_transforms(a, moved):
            assert np.array_equal(t.translation, [1.0, 2.0, 3.0])

    def test_reproduces_deformed_anchor(self, rng):
        a = rng.normal(size=(6, 3))
        moved = rng.normal(size=(6, 3))
        for anchor, target, t in zip(a, moved, revised_anchor_transforms(a, moved)):
            assert np.abs((anchor + t.translation) - target).max() < 1e-12

    def test_count_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            revised_anchor_transforms(rng.normal(size=(3, 3)), rng.normal(size=(4, 3)))


class TestForwardSkinWeights:
    def test_single_anchor(self):
        anchors = AnchorSet(np.array([[1.0, 2.0, 3.0]]), 0.5)
        w = forward_skin_weights([0.0, 0, 0], anchors)
        assert np.array_equal(w.weights, [1.0])

    def test_equidistant_pair_is_half_half(self):
        anchors = AnchorSet(np.array([[1.0, 0, 0], [-1.0, 0, 0]]), 0.7)
        w = forward_skin_weights([0.0, 0.3, 0], anchors)
        assert np.allclose(w.weights, [0.5, 0.5], atol=1e-15)

    def test_matches_scalar_softmax_oracle(self):
        anchors = AnchorSet(np.array([[1.0, 0, 0], [2.0, 0, 0]]), 1.0)
        w = forward_skin_weights([0.0, 0, 0], anchors)
        logits = np.array([-1.0, -4.0])
        expected = np.exp(logits) / np.exp(logits).sum()
        assert np.allclose(w.weights, expected, atol=1e-12)

    def test_normalization_and_positivity(self, rng):
        anchors = AnchorSet(rng.normal(size=(8, 3)), 0.3)
        for _ in range(100):
            w = forward_skin_weights(rng.normal(size=3) * 3, anchors).weights
            assert abs(w.sum() - 1.0) <= 1e-12
            assert np.all(w >= 0.0)

    def test_temperature_collapse_to_nearest(self):
        anchors = AnchorSet(
            np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.5, 0]]), 1e-6
        )
        w = forward_skin_weights([0.1, 0.0, 0.0], anchors).weights
        assert w[0] > 1.0 - 1e-6

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            SkinningWeights(np.array([0.5, 0.4]))
        with pytest.raises(ValueError):
            SkinningWeights(np.array([1.5, -0.5]))


class TestDeformPoint:
    def test_identity_blend(self, rng):
        transforms = [RigidTransform.identity() for _ in range(3)]
        w = SkinningWeights(np.array([0.2, 0.3, 0.5]))
        x = rng.normal(size=3)
        got = deform_point(x, w, transforms, RigidTransform.identity())
        assert np.abs(got - x).max() < 1e-15

    def test_opposite_translations_cancel(self):
        d = np.array([0.4, -0.2, 0.9])
        transforms = [
            RigidTransform.from_translation(d),
            RigidTransform.from_translation(-d),
        ]
        w = SkinningWeights(np.array([0.5, 0.5]))
        x = np.array([1.0, 2.0, 3.0])
        got = deform_point(x, w, transforms, RigidTransform.identity())
        assert np.abs(got - x).max() < 1e-15

    def test_matches_weighted_sum_oracle(self, rng):
        n = 5
        weights = rng.random(n)
        weights /= weights.sum()
        translations = rng.normal(size=(n, 3))
        transforms = [RigidTransform.from_translation(t) for t in translations]
        root = RigidTransform(
            axis_angle_rotation(rng.normal(size=3), 0.9), rng.normal(size=3)
        )
        x = rng.normal(size=3)
        got = deform_point(x, SkinningWeights(weights), transforms, root)
        expected = root.rotation.matrix @ (x + weights @ translations) + root.translation
        assert np.abs(got - expected).max() < 1e-12

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            deform_point(
                np.zeros(3),
                SkinningWeights(np.array([1.0])),
                [RigidTransform.identity(), RigidTransform.identity()],
                RigidTransform.identity(),
            )


class TestBackwardDeformPoint:
    def test_identity_everywhere(self, rng):
        anchors = rng.normal(size=(4, 3))
        transforms = [RigidTransform.identity() for _ in range(4)]
        x = rng.normal(size=3)
        got = backward_deform_point(x, anchors, transforms, RigidTransform.identity(), 0.5)
        assert np.abs(got - x).max() < 1e-12

    def test_single_anchor_exact_inverse(self, rng):
        t = RigidTransform(
            axis_angle_rotation(rng.normal(size=3), 1.1), rng.normal(size=3)
        )
        root = RigidTransform(
            axis_angle_rotation(rng.normal(size=3), -0.4), rng.normal(size=3)
        )
        a = rng.normal(size=(1, 3))
        x = rng.normal(size=3)
        w = SkinningWeights(np.array([1.0]))
        forward = deform_point(x, w, [t], root)
        deformed_anchor = apply_points(root, (t.rotation.matrix @ a.T).T + t.translation)
        back = backward_deform_point(forward, deformed_anchor, [t], root, 0.5)
        assert np.abs(back - x).max() < 1e-12

    def test_shared_transform_round_trip(self, rng):
        t = RigidTransform(
            axis_angle_rotation(rng.normal(size=3), 0.8), rng.normal(size=3)
        )
        root = RigidTransform(
            axis_angle_rotation(rng.normal(size=3), 0.3), rng.normal(size=3)
        )
        anchors = AnchorSet(rng.normal(size=(5, 3)), 0.6)
        transforms = [t] * 5
        deformed_anchors = apply_points(
            root, (anchors.positions @ t.rotation.matrix.T) + t.translation
        )
        for _ in range(20):
            x = rng.normal(size=3)
            weights = forward_skin_weights(x, anchors)
            forward = deform_point(x, weights, transforms, root)
            back = backward_deform_point(
                forward, deformed_anchors, transforms, root, anchors.temperature
            )
            assert np.abs(back - x).max() < 1e-9

    def test_count_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            backward_deform_point(
                np.zeros(3), rng.normal(size=(2, 3)),
                [RigidTransform.identity()], RigidTransform.identity(), 1.0,
            )


class TestDeformMesh:
    def test_identity_transforms_leave_mesh(self, rng):
        mesh = Mesh(rng.normal(size=(20, 3)))
        anchors = AnchorSet(rng.normal(size=(4, 3)), 1.0)
        transforms = [RigidTransform.identity()] * 4
        out = deform_mesh(mesh, anchors, transforms, RigidTransform.identity())
        assert np.abs(out.vertices - mesh.vertices).max() < 1e-15
        assert np.array_equal(out.faces, mesh.faces)

    def test_rigid_root_motion(self, rng):
        mesh = Mesh(rng.normal(size=(30, 3)))
        anchors = AnchorSet(rng.normal(size=(4, 3)), 1.0)
        transforms = [RigidTransform.identity()] * 4
        root = RigidTransform(
            axis_angle_rotation(rng.normal(size=3), 0.7), rng.normal(size=3)
        )
        out = deform_mesh(mesh, anchors, transforms, root)
        assert np.abs(out.vertices - apply_points(root, mesh.vertices)).max() < 1e-9
        d_before = np.linalg.norm(mesh.vertices[0] - mesh.vertices[1])
        d_after = np.linalg.norm(out.vertices[0] - out.vertices[1])
        assert abs(d_before - d_after) < 1e-9

    def test_matches_per_vertex_oracle(self, rng):
        mesh = Mesh(rng.normal(size=(15, 3)))
        anchors = AnchorSet(rng.normal(size=(5, 3)), 0.8)
        transforms = [
            RigidTransform(
                axis_angle_rotation(rng.normal(size=3), rng.uniform(-1, 1)),
                rng.normal(size=3),
            )
            for _ in range(5)
        ]
        root = RigidTransform(
            axis_angle_rotation(rng.normal(size=3), 0.5), rng.normal(size=3)
        )
        out = deform_mesh(mesh, anchors, transforms, root)
        for v, got in zip(mesh.vertices, out.vertices):
            w = forward_skin_weights(v, anchors)
            expected = deform_point(v, w, transforms, root)
            assert np.abs(got - expected).max() < 1e-12

    def test_bent_arm_vertices_follow_their_links(self):
        mesh, chain, anchors = make_two_link_arm(n_rings=10, n_segments=8)
        associations = build_associations(chain, anchors)
        pose = Pose(joint_rotations={2: np.array([np.pi / 4, 0.0, 0.0])})
        result = repose(mesh, chain, anchors, associations, pose)
        # proximal vertices barely move, distal vertices move substantially
        proximal = mesh.vertices[:, 2] < 0.4
        distal = mesh.vertices[:, 2] > 1.6
        motion = np.linalg.norm(result.mesh.vertices - mesh.vertices, axis=1)
        assert motion[proximal].max() < 0.1
        assert motion[distal].min() > 0.4


class TestRepose:
    def test_root_pose_equivariance(self, rng):
        mesh, chain, anchors = make_two_link_arm(n_rings=6, n_segments=6)
        associations = build_associations(chain, anchors)
        root_rotation = rng.normal(size=3)
        root_translation = rng.normal(size=3)
        pose = Pose(root_rotation=root_rotation, root_translation=root_translation)
        result = repose(mesh, chain, anchors, associations, pose)
        root = RigidTransform(rotation_from_rotvec(root_rotation), root_translation)
        assert np.abs(result.anchors - apply_points(root, anchors.positions)).max() < 1e-9
        assert np.abs(result.joints - apply_points(root, chain.positions())).max() < 1e-9
        assert np.abs(
            result.mesh.vertices - apply_points(root, mesh.vertices)
        ).max() < 1e-9

    def test_identity_pose_echoes_model(self):
        mesh, chain, anchors = make_two_link_arm(n_rings=6, n_segments=6)
        associations = build_associations(chain, anchors)
        result = repose(mesh, chain, anchors, associations, Pose.identity())
        assert np.abs(result.mesh.vertices - mesh.vertices).max() < 1e-12
        assert np.abs(result.anchors - anchors.positions).max() < 1e-12
        assert np.array_equal(result.joints, chain.positions())


class TestMeshValidation:
    def test_face_indices_out_of_range(self):
        with pytest.raises(ValueError):
            Mesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
        with pytest.raises(ValueError):
            Mesh(np.zeros((3, 3)), np.array([[-1, 1, 2]]))

    def test_anchorset_validation(self):
        with pytest.raises(ValueError):
            AnchorSet(np.zeros((0, 3)), 1.0)
        with pytest.raises(ValueError):
            AnchorSet(np.zeros((2, 3)), 0.0)
