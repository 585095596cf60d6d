"""File formats: OBJ meshes and point clouds, JSON chains, poses, anchors,
configs, frames, and fitted transforms.

All float serialization goes through ``repr`` so every written number
parses back to the identical double; JSON documents are emitted with a
fixed key order, making save -> load -> save byte-stable.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .chain import KinematicChain, Joint, Pose, validate_chain
from .errors import ChainError, ConfigError, ParseError
from .fitting import FitConfig, FrameObservation, UnconstrainedFrameTransforms
from .metrics import bounding_box_diagonal
from .se3 import RigidTransform, rotation_from_rotvec
from .skinning import AnchorSet, Association, Mesh, build_associations

log = logging.getLogger("chainskin")


def _floats(values) -> list:
    return [float(v) for v in np.asarray(values, dtype=float).ravel()]


def _fmt(x: float) -> str:
    return repr(float(x))


def dump_json(doc) -> str:
    return json.dumps(doc, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Wavefront OBJ subset
# ---------------------------------------------------------------------------

_OBJ_SKIP = {"vn", "vt", "vp", "s", "o", "g", "mtllib", "usemtl", "l"}


def parse_obj(text: str) -> Mesh:
    """Parse the `v x y z` / `f i j k` OBJ subset.

    Comments, normals, texture coordinates, and grouping lines are
    skipped; polygonal faces are fan-triangulated with a warning."""
    vertices = []
    faces = []
    face_lines = []
    fanned = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        keyword = tokens[0]
        if keyword == "v":
            if len(tokens) != 4:
                raise ParseError("vertex line must have exactly 3 coordinates", lineno)
            try:
                vertices.append([float(t) for t in tokens[1:]])
            except ValueError:
                raise ParseError(f"bad vertex coordinate in {line!r}", lineno) from None
        elif keyword == "f":
            if len(tokens) < 4:
                raise ParseError("face line needs at least 3 vertex indices", lineno)
            try:
                idx = [int(t.split("/")[0]) for t in tokens[1:]]
            except ValueError:
                raise ParseError(f"bad face index in {line!r}", lineno) from None
            if any(i < 1 for i in idx):
                raise ParseError("face indices must be positive (1-based)", lineno)
            if len(idx) > 3:
                fanned += 1
            for a, b in zip(idx[1:-1], idx[2:]):
                faces.append([idx[0] - 1, a - 1, b - 1])
                face_lines.append(lineno)
        elif keyword in _OBJ_SKIP:
            continue
        else:
            raise ParseError(f"unsupported OBJ keyword {keyword!r}", lineno)
    if fanned:
        warnings.warn(f"fan-triangulated {fanned} polygonal face(s)")
    for face, lineno in zip(faces, face_lines):
        if max(face) >= len(vertices):
            raise ParseError("face index out of range", lineno)
    return Mesh(np.array(vertices, dtype=float).reshape(-1, 3),
                np.array(faces, dtype=int).reshape(-1, 3))


def mesh_to_obj(mesh: Mesh) -> str:
    lines = [
        f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices
    ]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def load_mesh(path) -> Mesh:
    return parse_obj(Path(path).read_text())


def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(mesh_to_obj(mesh))


# ---------------------------------------------------------------------------
# Kinematic chain JSON
# ---------------------------------------------------------------------------


def chain_to_document(chain: KinematicChain) -> dict:
    return {
        "joints": [
            {
                "id": int(j.id),
                "parent": None if j.parent is None else int(j.parent),
                "position": _floats(j.position),
            }
            for j in chain.joints
        ]
    }


def chain_from_document(doc) -> KinematicChain:
    try:
        entries = doc["joints"]
    except (TypeError, KeyError):
        raise ParseError("chain document must contain a 'joints' list") from None
    joints = []
    for entry in entries:
        try:
            joints.append(
                Joint(
                    int(entry["id"]),
                    None if entry["parent"] is None else int(entry["parent"]),
                    [float(v) for v in entry["position"]],
                )
            )
        except (TypeError, KeyError, ValueError) as exc:
            raise ParseError(f"bad joint entry {entry!r}: {exc}") from None
    chain = KinematicChain(tuple(joints))
    diags = validate_chain(chain)
    if diags:
        raise ChainError("; ".join(diags))
    return chain


def load_chain(path) -> KinematicChain:
    return chain_from_document(_read_json(path))


def save_chain(chain: KinematicChain, path) -> None:
    Path(path).write_text(dump_json(chain_to_document(chain)))


# ---------------------------------------------------------------------------
# Pose JSON
# ---------------------------------------------------------------------------


def pose_to_document(pose: Pose, chain: KinematicChain) -> dict:
    from .chain import hierarchical_order

    root = chain.root_id()
    entries = []
    for jid in hierarchical_order(chain):
        if jid == root:
            continue
        rotation = pose.joint_rotations.get(jid, np.zeros(3))
        entries.append(
            {
                "id": int(jid),
                "rotation_axis_angle": _floats(rotation),
                "twist": float(pose.twists.get(jid, 0.0)),
            }
        )
    return {
        "root": {
            "rotation_axis_angle": _floats(pose.root_rotation),
            "translation": _floats(pose.root_translation),
        },
        "joints": entries,
    }


def pose_from_document(doc, chain: KinematicChain) -> Pose:
    if not isinstance(doc, dict):
        raise ParseError("pose document must be a JSON object")
    root_doc = doc.get("root", {})
    try:
        root_rotation = [float(v) for v in root_doc.get("rotation_axis_angle", (0, 0, 0))]
        root_translation = [float(v) for v in root_doc.get("translation", (0, 0, 0))]
        if len(root_rotation) != 3 or len(root_translation) != 3:
            raise ValueError("root entries must be 3-vectors")
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad pose root: {exc}") from None

    root_id = chain.root_id()
    known = {j.id for j in chain.joints}
    rotations = {}
    twists = {}
    for entry in doc.get("joints", []):
        try:
            jid = int(entry["id"])
        except (TypeError, KeyError, ValueError):
            raise ParseError(f"bad pose joint entry {entry!r}") from None
        if jid not in known:
            raise ParseError(f"pose references unknown joint id {jid}")
        if jid == root_id:
            raise ParseError(
                f"pose entry for root joint {jid}; use the root transform instead"
            )
        try:
            rotation = [float(v) for v in entry.get("rotation_axis_angle", (0, 0, 0))]
            if len(rotation) != 3:
                raise ValueError("rotation_axis_angle must be a 3-vector")
            twist = float(entry.get("twist", 0.0))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"bad pose joint entry for id {jid}: {exc}") from None
        rotations[jid] = np.array(rotation)
        twists[jid] = twist
    return Pose(np.array(root_rotation), np.array(root_translation), rotations, twists)


def load_pose(path, chain: KinematicChain) -> Pose:
    return pose_from_document(_read_json(path), chain)


def save_pose(pose: Pose, chain: KinematicChain, path) -> None:
    Path(path).write_text(dump_json(pose_to_document(pose, chain)))


# ---------------------------------------------------------------------------
# Anchors JSON
# ---------------------------------------------------------------------------


def anchors_to_document(anchors: AnchorSet) -> dict:
    return {
        "anchors": [_floats(p) for p in anchors.positions],
        "temperature": float(anchors.temperature),
    }


def anchors_from_document(doc) -> AnchorSet:
    try:
        raw = doc["anchors"]
    except (TypeError, KeyError):
        raise ParseError("anchors document must contain an 'anchors' list") from None
    if len(raw) == 0:
        raise ParseError("anchor set must contain at least one anchor")
    try:
        positions = np.array([[float(v) for v in p] for p in raw])
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad anchor position: {exc}") from None
    if positions.shape[1:] != (3,):
        raise ParseError("anchor positions must be 3-vectors")
    if "temperature" in doc:
        temperature = float(doc["temperature"])
        if temperature <= 0.0:
            raise ParseError("temperature must be positive")
    else:
        diagonal = bounding_box_diagonal(positions) if len(positions) > 1 else 0.0
        temperature = (0.2 * diagonal) ** 2 if diagonal > 0.0 else 1.0
        log.info(
            "anchors file has no temperature; defaulting to %r "
            "(0.2 x anchor bounding-box diagonal, squared)",
            temperature,
        )
    return AnchorSet(positions, temperature)


def load_anchors(path) -> AnchorSet:
    return anchors_from_document(_read_json(path))


def save_anchors(anchors: AnchorSet, path) -> None:
    Path(path).write_text(dump_json(anchors_to_document(anchors)))


# ---------------------------------------------------------------------------
# Rigid transforms, frames, configs
# ---------------------------------------------------------------------------


def rigid_transform_from_document(doc) -> RigidTransform:
    try:
        rotation = [float(v) for v in doc.get("rotation_axis_angle", (0, 0, 0))]
        translation = [float(v) for v in doc.get("translation", (0, 0, 0))]
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad rigid transform: {exc}") from None
    return RigidTransform(rotation_from_rotvec(rotation), np.array(translation))


def load_frames(directory) -> list:
    """Per-frame OBJ point clouds in filename order, plus an optional
    root_poses.json listing one root pose per frame."""
    directory = Path(directory)
    paths = sorted(directory.glob("*.obj"))
    if not paths:
        raise ParseError(f"no .obj frames found in {directory}")
    root_poses = [RigidTransform.identity()] * len(paths)
    poses_path = directory / "root_poses.json"
    if poses_path.exists():
        doc = _read_json(poses_path)
        entries = doc.get("root_poses")
        if not isinstance(entries, list) or len(entries) != len(paths):
            raise ParseError(
                "root_poses.json must list exactly one pose per frame file"
            )
        root_poses = [rigid_transform_from_document(e) for e in entries]
    return [
        FrameObservation(i, load_mesh(p).vertices, pose)
        for i, (p, pose) in enumerate(zip(paths, root_poses))
    ]


def config_from_document(doc) -> FitConfig:
    if not isinstance(doc, dict):
        raise ParseError("config document must be a JSON object")
    known = {f.name for f in fields(FitConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ParseError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(doc)
    if "loss_weights" in kwargs:
        kwargs["loss_weights"] = tuple(float(v) for v in kwargs["loss_weights"])
    try:
        return FitConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad config value: {exc}") from None


def load_config(path) -> FitConfig:
    return config_from_document(_read_json(path))


def transforms_to_document(per_frame) -> dict:
    return {
        "frames": [
            {
                "time_index": int(ftr.time_index),
                "anchors": [
                    {
                        "rotation_axis_angle": _floats(w),
                        "translation": _floats(t),
                    }
                    for w, t in zip(ftr.rotations, ftr.translations)
                ],
            }
            for ftr in per_frame
        ]
    }


def transforms_from_document(doc) -> list:
    try:
        frames = doc["frames"]
    except (TypeError, KeyError):
        raise ParseError("transforms document must contain a 'frames' list") from None
    out = []
    for entry in frames:
        anchors = entry["anchors"]
        out.append(
            UnconstrainedFrameTransforms(
                int(entry["time_index"]),
                np.array([a["rotation_axis_angle"] for a in anchors], dtype=float),
                np.array([a["translation"] for a in anchors], dtype=float),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelBundle:
    """Mesh + chain + anchors with the derived associations cached."""

    mesh: Mesh
    chain: KinematicChain
    anchors: AnchorSet
    associations: list

    @staticmethod
    def build(mesh, chain, anchors) -> "ModelBundle":
        return ModelBundle(mesh, chain, anchors, build_associations(chain, anchors))


def load_model_bundle(directory) -> ModelBundle:
    directory = Path(directory)
    return ModelBundle.build(
        load_mesh(directory / "mesh.obj"),
        load_chain(directory / "chain.json"),
        load_anchors(directory / "anchors.json"),
    )


def save_model_bundle(bundle: ModelBundle, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_mesh(bundle.mesh, directory / "mesh.obj")
    save_chain(bundle.chain, directory / "chain.json")
    save_anchors(bundle.anchors, directory / "anchors.json")


def association_to_document(assoc: Association) -> dict:
    return {
        "anchor": int(assoc.anchor_id),
        "link": [int(assoc.link[0]), int(assoc.link[1])],
        "alpha": float(assoc.alpha),
        "beta": float(assoc.beta),
        "rotation": [_floats(row) for row in assoc.g.matrix],
    }


def model_document(bundle: ModelBundle) -> dict:
    return {
        "chain": chain_to_document(bundle.chain),
        "anchors": anchors_to_document(bundle.anchors),
        "associations": [association_to_document(a) for a in bundle.associations],
        "mesh": {
            "vertices": [_floats(v) for v in bundle.mesh.vertices],
            "faces": [[int(i) for i in f] for f in bundle.mesh.faces],
        },
    }


def _read_json(path):
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
