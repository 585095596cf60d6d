"""Two-stage fitting of per-frame anchor transforms to observed point clouds.

Stage 1 fits unconstrained per-anchor rigid transforms per frame by
minimizing a Chamfer reconstruction loss plus a forward/backward cycle
consistency loss. Stage 2 makes the result chain-aware: each iteration
transports the chain joints through the current anchor blend, repairs the
chain, rebuilds the implied anchor positions, and takes one line-searched
gradient step on the combined loss over all frame transforms and the
per-link length residuals.

Gradients are analytic throughout: translations and residuals directly,
rotations through right-multiplied perturbations mapped back to the
axis-angle parameters by the SO(3) right Jacobian. They are validated by
central finite differences (:func:`numeric_gradient_check`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .chain import (
    KinematicChain,
    LinkResiduals,
    apply_residuals,
    hierarchical_order,
    link_lengths,
    links,
    recover_chain,
)
from .errors import ConfigError, FitDivergedError
from .metrics import chamfer_distance
from .se3 import RigidTransform, rotation_from_rotvec, so3_right_jacobian
from .skinning import (
    AnchorSet,
    Mesh,
    anchor_positions,
    build_associations,
    deform_mesh,
    weight_matrix,
)


@dataclass(frozen=True)
class FrameObservation:
    """One observed frame: target points in deformed space plus the
    (given) root pose. Emits a diagnostic when the targets are too
    degenerate for a well-posed fit."""

    time_index: int
    target_points: np.ndarray
    root_pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        pts = np.array(self.target_points, dtype=float).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise ValueError(
                f"frame {self.time_index} needs at least one target point"
            )
        pts.setflags(write=False)
        object.__setattr__(self, "target_points", pts)
        centered = pts - pts.mean(axis=0)
        if len(pts) < 4 or np.linalg.matrix_rank(centered) < 3:
            warnings.warn(
                f"frame {self.time_index}: fewer than 4 non-coplanar target "
                "points; the fit may be ill-posed"
            )


@dataclass(frozen=True)
class UnconstrainedFrameTransforms:
    """Per-anchor rigid transforms for one frame, parametrized as
    axis-angle rotation vectors plus translations."""

    time_index: int
    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotations, dtype=float).reshape(-1, 3)
        tra = np.array(self.translations, dtype=float).reshape(-1, 3)
        if rot.shape != tra.shape:
            raise ValueError("rotation and translation counts differ")
        rot.setflags(write=False)
        tra.setflags(write=False)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "translations", tra)

    @staticmethod
    def identity(time_index: int, n_anchors: int) -> "UnconstrainedFrameTransforms":
        return UnconstrainedFrameTransforms(
            time_index, np.zeros((n_anchors, 3)), np.zeros((n_anchors, 3))
        )

    @property
    def count(self) -> int:
        return self.rotations.shape[0]

    def transforms(self) -> list:
        return [
            RigidTransform(rotation_from_rotvec(w), t)
            for w, t in zip(self.rotations, self.translations)
        ]

    def rotation_matrices(self) -> np.ndarray:
        return np.array([rotation_from_rotvec(w).matrix for w in self.rotations])


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameters for both fitting stages.

    ``tau`` and ``gamma`` may be left unset: the anchor set's own
    temperature is used, and gamma defaults to 0.1 times the smallest
    canonical link length. ``update_link_lengths`` disables the residual
    optimization (rigid-chain protocol)."""

    stage1_iterations: int = 300
    stage2_iterations: int = 200
    step_size: float = 1e-2
    tau: float | None = None
    gamma: float | None = None
    loss_weights: tuple = (1.0, 0.1, 0.1)
    seed: int = 0
    convergence_tol: float = 1e-8
    cycle_samples: int = 128
    update_link_lengths: bool = True

    def __post_init__(self):
        if self.stage1_iterations < 0 or self.stage2_iterations < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if self.step_size <= 0.0:
            raise ConfigError("step_size must be positive")
        if self.tau is not None and self.tau <= 0.0:
            raise ConfigError("tau must be positive")
        if self.gamma is not None and self.gamma <= 0.0:
            raise ConfigError("gamma must be positive")
        w = tuple(float(v) for v in self.loss_weights)
        if len(w) != 3 or any(v < 0.0 for v in w) or sum(w) == 0.0:
            raise ConfigError("loss_weights must be 3 nonnegative reals, not all zero")
        object.__setattr__(self, "loss_weights", w)
        if self.convergence_tol <= 0.0:
            raise ConfigError("convergence_tol must be positive")
        if self.cycle_samples < 1:
            raise ConfigError("cycle_samples must be at least 1")


@dataclass(frozen=True)
class TraceRow:
    """Losses at the start of one iteration plus the accepted step's total."""

    stage: str
    frame: int
    iteration: int
    recon: float
    cycle: float
    anchors: float
    total: float
    total_after_step: float


def trace_to_table(rows) -> str:
    """Tab-separated loss trace for plotting."""
    header = "stage\tframe\titeration\trecon\tcycle\tanchors\ttotal\ttotal_after_step"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r.stage}\t{r.frame}\t{r.iteration}\t{r.recon!r}\t{r.cycle!r}"
            f"\t{r.anchors!r}\t{r.total!r}\t{r.total_after_step!r}"
        )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Stage1Result:
    transforms: list
    trace: list
    tau: float


@dataclass(frozen=True)
class Stage2Result:
    chain: KinematicChain
    transforms: list
    associations: list
    residuals: LinkResiduals
    trace: list
    tau: float


# ---------------------------------------------------------------------------
# Loss terms (values and analytic gradients w.r.t. transform parameters)
# ---------------------------------------------------------------------------


def _param_jacobians(ftr: UnconstrainedFrameTransforms) -> np.ndarray:
    return np.array([so3_right_jacobian(w) for w in ftr.rotations])


def _recon_core(template, anchors, ftr, frame, want_grad):
    rot = ftr.rotation_matrices()
    trans = ftr.translations
    c_rot = frame.root_pose.rotation.matrix
    c_t = frame.root_pose.translation
    verts = template.vertices
    w = weight_matrix(verts, anchors.positions, anchors.temperature)

    moved = np.einsum("aij,vj->vai", rot, verts) + trans[None, :, :]
    blended = np.einsum("va,vai->vi", w, moved)
    deformed = blended @ c_rot.T + c_t

    targets = frame.target_points
    if targets.shape[0] == 0:
        raise ValueError("frame has no target points")
    d_vt, idx_vt = cKDTree(targets).query(deformed, k=1)
    d_tv, idx_tv = cKDTree(deformed).query(targets, k=1)
    value = 0.5 * (float(np.mean(d_vt)) + float(np.mean(d_tv)))
    if not want_grad:
        return value, None, None

    g = np.zeros_like(deformed)
    nz = d_vt > 0
    g[nz] += (0.5 / len(deformed)) * (deformed[nz] - targets[idx_vt[nz]]) / d_vt[
        nz, None
    ]
    nz = d_tv > 0
    scatter = np.zeros((len(targets), 3))
    scatter[nz] = (0.5 / len(targets)) * (deformed[idx_tv[nz]] - targets[nz]) / d_tv[
        nz, None
    ]
    np.add.at(g, idx_tv, scatter)

    h = g @ c_rot
    grad_trans = w.T @ h
    grad_delta = np.empty_like(grad_trans)
    for i in range(ftr.count):
        grad_delta[i] = w[:, i] @ np.cross(verts, h @ rot[i])
    jr = _param_jacobians(ftr)
    grad_rot = np.einsum("aji,aj->ai", jr, grad_delta)
    return value, grad_rot, grad_trans


def reconstruction_loss(
    template: Mesh, anchors: AnchorSet, frame_transforms, frame: FrameObservation
) -> float:
    """Symmetric Chamfer distance between the deformed template vertices
    and the frame's target points."""
    deformed = deform_mesh(
        template, anchors, frame_transforms.transforms(), frame.root_pose
    )
    return chamfer_distance(deformed.vertices, frame.target_points)


def reconstruction_loss_gradient(template, anchors, frame_transforms, frame):
    """(value, d/d rotations, d/d translations); nearest-neighbor
    correspondences are treated as locally constant."""
    return _recon_core(template, anchors, frame_transforms, frame, True)


def _cycle_core(sample_points, anchors, ftr, root, want_grad):
    pts = np.asarray(sample_points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("cycle consistency needs at least one sample point")
    tau = anchors.temperature
    a0 = anchors.positions
    rot = ftr.rotation_matrices()
    trans = ftr.translations
    c_rot = root.rotation.matrix
    c_t = root.translation
    m = len(pts)

    ra = np.einsum("aij,aj->ai", rot, a0)
    a_def = (ra + trans) @ c_rot.T + c_t
    back_w = weight_matrix(pts, a_def, tau)
    z = (pts - c_t) @ c_rot
    inv_trans = np.einsum("aji,aj->ai", rot, trans)
    d = np.einsum("aji,mj->mai", rot, z) - inv_trans[None, :, :]
    y = np.einsum("ma,mai->mi", back_w, d)

    fwd_w = weight_matrix(y, a0, tau)
    fwd_moved = np.einsum("aij,mj->mai", rot, y) + trans[None, :, :]
    u = np.einsum("ma,mai->mi", fwd_w, fwd_moved)
    round_trip = u @ c_rot.T + c_t

    residual = round_trip - pts
    value = float(np.sum(residual**2) / m)
    if not want_grad:
        return value, None, None

    gx = (2.0 / m) * residual
    h = gx @ c_rot

    grad_trans = fwd_w.T @ h
    grad_delta = np.empty_like(grad_trans)
    for j in range(ftr.count):
        grad_delta[j] = fwd_w[:, j] @ np.cross(y, h @ rot[j])

    # back-propagate through the forward blend's dependence on y
    q = np.einsum("ma,aji,mj->mi", fwd_w, rot, h)
    proj = np.einsum("mai,mi->ma", fwd_moved - u[:, None, :], h)
    e_fwd = fwd_w * proj
    q += np.einsum("ma,mai->mi", e_fwd, (-2.0 / tau) * (y[:, None, :] - a0[None]))

    # backward blend: direct dependence on each inverse transform
    for i in range(ftr.count):
        grad_trans[i] -= back_w[:, i] @ (q @ rot[i].T)
        grad_delta[i] -= back_w[:, i] @ np.cross(d[:, i, :], q)

    # backward weights depend on the deformed anchors
    proj_b = np.einsum("mai,mi->ma", d - y[:, None, :], q)
    e_back = back_w * proj_b
    g_anchor = np.einsum(
        "ma,mai->ai", e_back, (2.0 / tau) * (pts[:, None, :] - a_def[None])
    )
    grad_trans += g_anchor @ c_rot
    for i in range(ftr.count):
        grad_delta[i] += np.cross(a0[i], rot[i].T @ (c_rot.T @ g_anchor[i]))

    jr = _param_jacobians(ftr)
    grad_rot = np.einsum("aji,aj->ai", jr, grad_delta)
    return value, grad_rot, grad_trans


def cycle_consistency_loss(
    sample_points, anchors: AnchorSet, frame_transforms, root: RigidTransform
) -> float:
    """Mean squared gap after mapping deformed-space samples backward to
    canonical space and forward again (uniform sample weights)."""
    return _cycle_core(sample_points, anchors, frame_transforms, root, False)[0]


def cycle_consistency_loss_gradient(sample_points, anchors, frame_transforms, root):
    """(value, d/d rotations, d/d translations) of the cycle loss."""
    return _cycle_core(sample_points, anchors, frame_transforms, root, True)


def _anchor_core(canonical_anchors, revised, ftr, want_grad):
    a0 = np.asarray(canonical_anchors, dtype=float)
    rot = ftr.rotation_matrices()
    pred = np.einsum("aij,aj->ai", rot, a0) + ftr.translations
    diff = pred - revised
    value = float(np.sum(diff**2))
    if not want_grad:
        return value, None, None
    grad_trans = 2.0 * diff
    grad_delta = 2.0 * np.cross(a0, np.einsum("aji,aj->ai", rot, diff))
    jr = _param_jacobians(ftr)
    grad_rot = np.einsum("aji,aj->ai", jr, grad_delta)
    return value, grad_rot, grad_trans


def anchor_consistency_loss(
    chain: KinematicChain,
    anchors: AnchorSet,
    associations: list,
    revised_joints: np.ndarray,
    twists: dict | None,
    frame_transforms,
) -> float:
    """Sum of squared gaps between association-implied anchor positions
    (from the revised joints) and the transformed canonical anchors."""
    revised = anchor_positions(chain, associations, revised_joints, twists)
    return _anchor_core(anchors.positions, revised, frame_transforms, False)[0]


def anchor_consistency_loss_gradient(
    chain, anchors, associations, revised_joints, twists, frame_transforms
):
    """(value, d/d rotations, d/d translations); the revised joints are
    treated as fixed targets."""
    revised = anchor_positions(chain, associations, revised_joints, twists)
    return _anchor_core(anchors.positions, revised, frame_transforms, True)


def transport_joints(
    chain: KinematicChain,
    anchors: AnchorSet,
    frame_transforms,
    root: RigidTransform,
) -> np.ndarray:
    """Push canonical joints through the anchor blend into deformed space.

    These unconstrained joints generally violate link lengths; follow
    with :func:`chainskin.chain.recover_chain`."""
    joints = chain.positions()
    w = weight_matrix(joints, anchors.positions, anchors.temperature)
    rot = frame_transforms.rotation_matrices()
    moved = np.einsum("aij,vj->vai", rot, joints) + frame_transforms.translations[None]
    blended = np.einsum("va,vai->vi", w, moved)
    return blended @ root.rotation.matrix.T + root.translation


def numeric_gradient_check(loss_fn, grad_fn, params, epsilon: float = 1e-5) -> float:
    """Max per-parameter relative error between grad_fn and central
    finite differences of loss_fn."""
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(params, dtype=float).copy()
    analytic = np.asarray(grad_fn(x), dtype=float)
    numeric = np.empty_like(analytic)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = epsilon
        numeric[i] = (loss_fn(x + step) - loss_fn(x - step)) / (2.0 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# Gradient descent with backtracking line search
# ---------------------------------------------------------------------------

_ARMIJO = 1e-4
_MAX_HALVINGS = 60


class _BlockState:
    """Line-search memory for one parameter block."""

    def __init__(self, mask, step_size):
        self.mask = mask
        self.step = step_size
        self.prev_x = None
        self.prev_grad = None

    def initial_step(self, step_size, x, grad):
        """Barzilai-Borwein estimate, falling back to twice the last
        accepted step."""
        cap = 1e6 * step_size
        alpha = min(2.0 * self.step, cap)
        if self.prev_x is not None:
            s = (x - self.prev_x)[self.mask]
            y = (grad - self.prev_grad)[self.mask]
            sy = float(s @ y)
            yy = float(y @ y)
            if sy > 0.0 and yy > 0.0:
                alpha = min(max(sy / yy, 1e-12), cap)
        return alpha


def _minimize(evaluate, x0, iterations, step_size, tol, record,
              before_iteration=None, blocks=None):
    """Gradient descent with an Armijo backtracking line search.

    When ``blocks`` (a list of boolean masks) is given, each iteration
    takes one line-searched step per block in turn, so parameter groups
    with very different gradient scales all make progress. Every
    accepted step satisfies the Armijo condition, so per-step totals
    never increase. ``record(iteration, parts, total, after)`` runs once
    per iteration; ``before_iteration(x)`` runs first and may refresh
    state the objective holds fixed during the iteration.
    """
    x = np.asarray(x0, dtype=float).copy()
    if blocks is None:
        blocks = [np.ones(x.size, dtype=bool)]
    states = [_BlockState(mask, step_size) for mask in blocks]
    for iteration in range(iterations):
        if before_iteration is not None:
            before_iteration(x)
            # the refreshed objective invalidates curvature memory
            for state in states:
                state.prev_x = None
                state.prev_grad = None
        entry_total = None
        entry_parts = None
        current_total = None
        for state in states:
            total, parts, grad = evaluate(x, want_grad=True)
            if not np.isfinite(total) or not np.all(np.isfinite(grad)):
                raise FitDivergedError("non-finite loss or gradient", iteration)
            if entry_total is None:
                entry_total, entry_parts = total, parts
            current_total = total
            masked = np.where(state.mask, grad, 0.0)
            gnorm2 = float(masked @ masked)
            if gnorm2 == 0.0:
                continue
            alpha = state.initial_step(step_size, x, grad)
            accepted = None
            for _ in range(_MAX_HALVINGS):
                candidate = x - alpha * masked
                trial_total, _, _ = evaluate(candidate, want_grad=False)
                if np.isfinite(trial_total) and (
                    trial_total <= total - _ARMIJO * alpha * gnorm2
                ):
                    accepted = (candidate, trial_total)
                    break
                alpha *= 0.5
            if accepted is None:
                continue
            state.prev_x = x
            state.prev_grad = grad
            x, current_total = accepted
            state.step = alpha
        record(iteration, entry_parts, entry_total, current_total)
        if entry_total - current_total <= tol * max(abs(entry_total), 1e-30):
            break
    return x


def _pack(ftr: UnconstrainedFrameTransforms) -> np.ndarray:
    return np.concatenate([ftr.rotations.ravel(), ftr.translations.ravel()])


def _unpack(x, time_index, n_anchors) -> UnconstrainedFrameTransforms:
    half = 3 * n_anchors
    return UnconstrainedFrameTransforms(
        time_index, x[:half].reshape(-1, 3), x[half : 2 * half].reshape(-1, 3)
    )


def _effective_anchors(anchors: AnchorSet, config: FitConfig) -> AnchorSet:
    if config.tau is None:
        return anchors
    return AnchorSet(anchors.positions, config.tau)


def _cycle_subsample(frame: FrameObservation, config: FitConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, frame.time_index])
    n = frame.target_points.shape[0]
    m = min(config.cycle_samples, n)
    idx = np.sort(rng.choice(n, size=m, replace=False))
    return frame.target_points[idx]


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


def fit_stage1(
    template: Mesh, anchors: AnchorSet, frames: list, config: FitConfig
) -> Stage1Result:
    """Fit unconstrained per-anchor transforms independently per frame.

    Initialization is the identity; the per-frame loss is
    w_recon * reconstruction + w_cycle * cycle consistency.
    """
    if len(frames) == 0:
        raise ValueError("fit_stage1 requires at least one frame")
    eff = _effective_anchors(anchors, config)
    w_recon, w_cycle, _ = config.loss_weights
    results = []
    trace = []
    for frame in frames:
        samples = _cycle_subsample(frame, config)

        def evaluate(x, want_grad, _frame=frame, _samples=samples):
            ftr = _unpack(x, _frame.time_index, eff.count)
            if want_grad:
                rv, r_rot, r_tr = reconstruction_loss_gradient(
                    template, eff, ftr, _frame
                )
                cv, c_rot, c_tr = cycle_consistency_loss_gradient(
                    _samples, eff, ftr, _frame.root_pose
                )
                grad = w_recon * np.concatenate([r_rot.ravel(), r_tr.ravel()])
                grad += w_cycle * np.concatenate([c_rot.ravel(), c_tr.ravel()])
            else:
                rv = reconstruction_loss(template, eff, ftr, _frame)
                cv = cycle_consistency_loss(_samples, eff, ftr, _frame.root_pose)
                grad = None
            total = w_recon * rv + w_cycle * cv
            return total, {"recon": rv, "cycle": cv, "anchors": 0.0}, grad

        def record(iteration, parts, total, after, _t=frame.time_index):
            trace.append(
                TraceRow(
                    "stage1", _t, iteration, parts["recon"], parts["cycle"],
                    parts["anchors"], total, after,
                )
            )

        x0 = _pack(UnconstrainedFrameTransforms.identity(frame.time_index, eff.count))
        x = _minimize(
            evaluate, x0, config.stage1_iterations, config.step_size,
            config.convergence_tol, record,
        )
        results.append(_unpack(x, frame.time_index, eff.count))
    return Stage1Result(results, trace, eff.temperature)


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------


def _link_paths(chain: KinematicChain) -> dict:
    """joint id -> indices (in links order) of the links back to the root."""
    chain_links = links(chain)
    index_of_link = {link: i for i, link in enumerate(chain_links)}
    parent_of = {j.id: j.parent for j in chain.joints}
    paths = {}
    for jid in hierarchical_order(chain):
        if parent_of[jid] is None:
            paths[jid] = []
        else:
            paths[jid] = paths[parent_of[jid]] + [index_of_link[(parent_of[jid], jid)]]
    return paths


class _Stage2Objective:
    """Per-iteration stage-2 loss over all frame transforms plus residuals.

    Joint transport always uses the stage-1 transforms (the measurements
    from the initial fit), so the anchor targets cannot chase the
    transforms being optimized. Each iteration refreshes the
    residual-updated chain, its associations, and the transported joints;
    the association-implied anchors stay an analytic function of the
    residuals through the updated link lengths.
    """

    def __init__(self, chain0, anchors, associations, template, frames,
                 samples, config, gamma, stage1_transforms,
                 live_refreeze=True):
        self.chain0 = chain0
        self.anchors = anchors
        self.associations = associations
        self.template = template
        self.frames = frames
        self.samples = samples
        self.config = config
        self.gamma = gamma
        self.stage1_transforms = list(stage1_transforms)
        self.stage1_anchor_preds = [
            np.einsum("aij,aj->ai", ftr.rotation_matrices(), anchors.positions)
            + ftr.translations
            for ftr in self.stage1_transforms
        ]
        self.n_links = len(links(chain0))
        self.n_anchors = anchors.count
        self.block = 6 * self.n_anchors
        self.use_residuals = config.update_link_lengths

        self.paths = _link_paths(chain0)
        self.joint_index = {j.id: i for i, j in enumerate(chain0.joints)}
        self.chain_links = links(chain0)
        self.canonical_lengths = link_lengths(chain0)
        canonical_pos = chain0.positions()
        self.canonical_units = np.array([
            (canonical_pos[self.joint_index[k]] - canonical_pos[self.joint_index[j]])
            / length
            for (j, k), length in zip(self.chain_links, self.canonical_lengths)
        ])
        self.live_refreeze = live_refreeze
        self.frozen_chain = chain0
        self.frozen_associations = associations
        self.membership = self._membership(associations)
        self.frozen_residuals = None
        self.frozen_unconstrained = None
        self.frozen_units = None
        self.frozen_revised = None

    def _membership(self, associations) -> np.ndarray:
        """membership[l, i]: link l lies on the root path of anchor i's
        parent joint."""
        m = np.zeros((self.n_links, self.n_anchors))
        for assoc in associations:
            for l in self.paths[assoc.link[0]]:
                m[l, assoc.anchor_id] = 1.0
        return m

    def split(self, x):
        per_frame = [
            _unpack(
                x[f * self.block : (f + 1) * self.block],
                frame.time_index,
                self.n_anchors,
            )
            for f, frame in enumerate(self.frames)
        ]
        if self.use_residuals:
            residuals = np.asarray(x[len(self.frames) * self.block :], dtype=float)
        else:
            residuals = np.zeros(self.n_links)
        return per_frame, residuals

    def chain_for(self, residuals) -> KinematicChain:
        if not self.use_residuals:
            return self.chain0
        return apply_residuals(self.chain0, LinkResiduals(residuals, self.gamma))

    def freeze(self, x):
        """Refresh per-iteration state from the entry residuals: the
        associations rebuilt on the residual-updated chain and its joints
        transported through the stage-1 transforms."""
        _, residuals = self.split(x)
        chain_cur = self.chain_for(residuals)
        self.frozen_chain = chain_cur
        self.frozen_residuals = residuals.copy()
        if self.use_residuals:
            self.frozen_associations = build_associations(chain_cur, self.anchors)
            self.membership = self._membership(self.frozen_associations)
        self.frozen_unconstrained = []
        self.frozen_units = []
        self.frozen_revised = []
        identity = RigidTransform.identity()
        for ftr in self.stage1_transforms:
            unconstrained = transport_joints(chain_cur, self.anchors, ftr, identity)
            units = np.empty((self.n_links, 3))
            for l, (j, k) in enumerate(self.chain_links):
                d = (
                    unconstrained[self.joint_index[k]]
                    - unconstrained[self.joint_index[j]]
                )
                span = np.linalg.norm(d)
                if span < 1e-12 * self.canonical_lengths[l]:
                    units[l] = self.canonical_units[l]
                else:
                    units[l] = d / span
            self.frozen_unconstrained.append(unconstrained)
            self.frozen_units.append(units)
            self.frozen_revised.append(recover_chain(chain_cur, unconstrained))

    def __call__(self, x, want_grad):
        per_frame, residuals = self.split(x)
        if self.live_refreeze and (
            self.frozen_residuals is None
            or not np.array_equal(residuals, self.frozen_residuals)
        ):
            # evaluate residual trials on the fully rebuilt pipeline
            self.freeze(x)
        chain_r = self.chain_for(residuals)
        w_recon, w_cycle, w_anchors = self.config.loss_weights
        n_frames = len(self.frames)

        totals = {"recon": 0.0, "cycle": 0.0, "anchors": 0.0, "anchors_meas": 0.0}
        grad = np.zeros_like(np.asarray(x, dtype=float)) if want_grad else None
        for f, (frame, ftr) in enumerate(zip(self.frames, per_frame)):
            revised = recover_chain(chain_r, self.frozen_unconstrained[f])
            tilde = anchor_positions(
                chain_r, self.frozen_associations, revised, None
            )
            # Anchor consistency of both the current transforms (makes
            # them chain-aware) and the stage-1 measurements (adapts the
            # chain to the learned anchors; constant w.r.t. transforms).
            diff_meas = self.stage1_anchor_preds[f] - tilde
            av_meas = float(np.sum(diff_meas**2))
            if want_grad:
                rv, r_rot, r_tr = reconstruction_loss_gradient(
                    self.template, self.anchors, ftr, frame
                )
                cv, c_rot, c_tr = cycle_consistency_loss_gradient(
                    self.samples[f], self.anchors, ftr, frame.root_pose
                )
                av_cur, a_rot, a_tr = _anchor_core(
                    self.anchors.positions, tilde, ftr, True
                )
                gblock = grad[f * self.block : (f + 1) * self.block]
                gblock += (w_recon / n_frames) * np.concatenate(
                    [r_rot.ravel(), r_tr.ravel()]
                )
                gblock += (w_cycle / n_frames) * np.concatenate(
                    [c_rot.ravel(), c_tr.ravel()]
                )
                gblock += (w_anchors / n_frames) * np.concatenate(
                    [a_rot.ravel(), a_tr.ravel()]
                )
                if self.use_residuals:
                    diff_cur = (
                        np.einsum(
                            "aij,aj->ai",
                            ftr.rotation_matrices(),
                            self.anchors.positions,
                        )
                        + ftr.translations
                        - tilde
                    )
                    agg = self.membership @ (
                        w_anchors * diff_cur + w_recon * diff_meas
                    )
                    per_link = -2.0 * np.sum(agg * self.frozen_units[f], axis=1)
                    sech2 = 1.0 - np.tanh(residuals) ** 2
                    grad[n_frames * self.block :] += (
                        self.gamma / n_frames
                    ) * sech2 * per_link
            else:
                rv = reconstruction_loss(self.template, self.anchors, ftr, frame)
                cv = cycle_consistency_loss(
                    self.samples[f], self.anchors, ftr, frame.root_pose
                )
                av_cur = _anchor_core(self.anchors.positions, tilde, ftr, False)[0]
            totals["recon"] += rv / n_frames
            totals["cycle"] += cv / n_frames
            totals["anchors"] += av_cur / n_frames
            totals["anchors_meas"] += av_meas / n_frames
        total = (
            w_recon * (totals["recon"] + totals["anchors_meas"])
            + w_cycle * totals["cycle"]
            + w_anchors * totals["anchors"]
        )
        return total, totals, grad


def fit_stage2(
    template: Mesh,
    chain: KinematicChain,
    anchors: AnchorSet,
    stage1_result,
    frames: list,
    config: FitConfig,
    iteration_callback=None,
) -> Stage2Result:
    """Chain-aware refinement of stage-1 transforms plus link residuals.

    Each iteration transports the joints through the current blend,
    recovers a length-preserving chain, rebuilds the implied anchors, and
    takes one line-searched gradient step on
    w_recon * L_recon + w_cycle * L_cycle + w_anchors * L_anchors over
    all frame-transform parameters and (unless disabled) the link
    residuals. The anchor pipeline runs in the pre-root frame so the
    comparison against the transformed canonical anchors is like-for-like.
    Associations are rebuilt on the updated chain at the end.
    """
    if len(frames) == 0:
        raise ValueError("fit_stage2 requires at least one frame")
    stage1_transforms = (
        stage1_result.transforms
        if isinstance(stage1_result, Stage1Result)
        else list(stage1_result)
    )
    if len(stage1_transforms) != len(frames):
        raise ValueError("one stage-1 transform set per frame required")

    eff = _effective_anchors(anchors, config)
    lengths = link_lengths(chain)
    gamma = config.gamma if config.gamma is not None else 0.1 * float(lengths.min())
    if gamma >= lengths.min():
        raise ConfigError("gamma must be smaller than the minimum link length")

    associations = build_associations(chain, eff)
    samples = [_cycle_subsample(frame, config) for frame in frames]
    objective = _Stage2Objective(
        chain, eff, associations, template, frames, samples, config, gamma,
        stage1_transforms,
    )

    segments = [_pack(t) for t in stage1_transforms]
    if config.update_link_lengths:
        segments.append(np.zeros(objective.n_links))
    x0 = np.concatenate(segments)
    if config.update_link_lengths:
        # transforms and residuals live on different scales; give each
        # group its own line-searched step, and step the residuals first
        # so they see the gap before the transforms close it
        transform_mask = np.zeros(x0.size, dtype=bool)
        transform_mask[: len(frames) * objective.block] = True
        blocks = [~transform_mask, transform_mask]
    else:
        blocks = None

    trace = []

    def record(iteration, parts, total, after):
        trace.append(
            TraceRow(
                "stage2", -1, iteration, parts["recon"], parts["cycle"],
                parts["anchors"], total, after,
            )
        )
        if iteration_callback is not None:
            iteration_callback(
                iteration,
                {
                    "chain": objective.frozen_chain,
                    "unconstrained": objective.frozen_unconstrained,
                    "revised": objective.frozen_revised,
                    "total": total,
                    "total_after_step": after,
                },
            )

    x = _minimize(
        objective, x0, config.stage2_iterations, config.step_size,
        config.convergence_tol, record, before_iteration=objective.freeze,
        blocks=blocks,
    )
    per_frame, residuals = objective.split(x)
    final_residuals = LinkResiduals(residuals, gamma)
    if config.update_link_lengths:
        final_chain = apply_residuals(chain, final_residuals)
    else:
        final_chain = chain
    final_associations = build_associations(final_chain, eff)
    return Stage2Result(
        final_chain, per_frame, final_associations, final_residuals, trace,
        eff.temperature,
    )
