"""Gaussian primitive populations, shared motion bases and temporal gating.

Populations are stored struct-of-arrays (one ndarray per field, rows are
Gaussians). Three kinds exist:

* static     — time-invariant background.
* rigid      — driven by a weighted blend of shared per-frame SE(3) bases,
               visible inside a soft temporal window (duration/center).
* transient  — linear constant-velocity trajectory, same temporal window.

All pose/opacity evaluation is pure; ``transition_rigid_to_transient``
builds a new set and must not run concurrently with renders.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import BadMagic, ShapeMismatch
from .geometry import matrix_to_quat, matrix_to_rot6d, quat_to_matrix, quat_vjp, rot6d_to_matrix, rot6d_vjp
from .validation import as_array, require

CHECKPOINT_MAGIC = b"RIGS0001"


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# populations


@dataclass
class GaussianGroup:
    """Fields shared by every population; shapes are (N, ...)."""

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        n = self.means.shape[0] if np.ndim(self.means) else 0
        self.means = as_array(self.means, (n, 3), "means")
        self.log_scales = as_array(self.log_scales, (n, 3), "log_scales")
        self.quats = as_array(self.quats, (n, 4), "quats")
        self.opacity_logits = as_array(self.opacity_logits, (n,), "opacity_logits")
        self.colors = as_array(self.colors, (n, 3), "colors")

    def __len__(self):
        return self.means.shape[0]

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def copy(self):
        return replace(self, **{f.name: getattr(self, f.name).copy() for f in fields(self)})


@dataclass
class StaticGaussians(GaussianGroup):
    @staticmethod
    def empty():
        return StaticGaussians(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                               np.zeros(0), np.zeros((0, 3)))


@dataclass
class RigidGaussians(GaussianGroup):
    weights: np.ndarray = None    # (N, K), ||w||_2 = 1 per row
    durations: np.ndarray = None  # (N,) frames, > 0
    centers: np.ndarray = None    # (N,) frames

    def __post_init__(self):
        super().__post_init__()
        n = len(self)
        self.weights = as_array(self.weights, (n, None), "weights")
        self.durations = as_array(self.durations, (n,), "durations")
        self.centers = as_array(self.centers, (n,), "centers")

    @staticmethod
    def empty(n_bases):
        return RigidGaussians(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                              np.zeros(0), np.zeros((0, 3)),
                              weights=np.zeros((0, n_bases)), durations=np.zeros(0),
                              centers=np.zeros(0))


@dataclass
class TransientGaussians(GaussianGroup):
    velocities: np.ndarray = None  # (N, 3) scene units / frame
    durations: np.ndarray = None
    centers: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        n = len(self)
        self.velocities = as_array(self.velocities, (n, 3), "velocities")
        self.durations = as_array(self.durations, (n,), "durations")
        self.centers = as_array(self.centers, (n,), "centers")

    @staticmethod
    def empty():
        return TransientGaussians(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                                  np.zeros(0), np.zeros((0, 3)),
                                  velocities=np.zeros((0, 3)), durations=np.zeros(0),
                                  centers=np.zeros(0))

    def extend(self, other: "TransientGaussians"):
        kw = {}
        for f in fields(self):
            kw[f.name] = np.concatenate([getattr(self, f.name), getattr(other, f.name)], axis=0)
        return TransientGaussians(**kw)


@dataclass
class MotionBases:
    """K shared SE(3) trajectories over T frames.

    Rotations are stored as optimizable 6D vectors; ``matrices`` applies the
    Gram-Schmidt map so every derived rotation is exactly orthonormal.
    """

    rot6d: np.ndarray  # (K, T, 6)
    trans: np.ndarray  # (K, T, 3)

    def __post_init__(self):
        self.rot6d = as_array(self.rot6d, (None, None, 6), "rot6d")
        self.trans = as_array(self.trans, (self.rot6d.shape[0], self.rot6d.shape[1], 3), "trans")

    @property
    def n_bases(self):
        return self.rot6d.shape[0]

    @property
    def n_frames(self):
        return self.rot6d.shape[1]

    @staticmethod
    def identity(n_bases, n_frames):
        r = np.tile(np.array([1.0, 0, 0, 0, 1.0, 0]), (n_bases, n_frames, 1))
        return MotionBases(r, np.zeros((n_bases, n_frames, 3)))

    def matrices(self, t=None):
        if t is None:
            return rot6d_to_matrix(self.rot6d.reshape(-1, 6)).reshape(self.n_bases, self.n_frames, 3, 3)
        return rot6d_to_matrix(self.rot6d[:, t])

    def transform(self, j, t):
        from .geometry import SE3Transform

        return SE3Transform(rot6d_to_matrix(self.rot6d[j, t]), self.trans[j, t].copy())

    def copy(self):
        return MotionBases(self.rot6d.copy(), self.trans.copy())


@dataclass
class GaussianSet:
    statics: StaticGaussians
    rigids: RigidGaussians
    transients: TransientGaussians
    bases: MotionBases
    gate_sharpness: float = 3.0

    def __post_init__(self):
        require(self.gate_sharpness > 0, "gate_sharpness must be positive")
        if len(self.rigids) and self.rigids.weights.shape[1] != self.bases.n_bases:
            raise ShapeMismatch("rigid weight width does not match basis count")

    @property
    def n_frames(self):
        return self.bases.n_frames

    def total(self):
        return len(self.statics) + len(self.rigids) + len(self.transients)

    def copy(self):
        return GaussianSet(self.statics.copy(), self.rigids.copy(), self.transients.copy(),
                           self.bases.copy(), self.gate_sharpness)

    @staticmethod
    def empty(n_bases=10, n_frames=1, gate_sharpness=3.0):
        return GaussianSet(StaticGaussians.empty(), RigidGaussians.empty(n_bases),
                           TransientGaussians.empty(), MotionBases.identity(n_bases, n_frames),
                           gate_sharpness)


# ---------------------------------------------------------------------------
# covariance and gating


def covariance_from(log_scale, quat):
    """3x3 covariance R diag(exp(2 log_scale)) R^T for one Gaussian."""
    return covariance_batch(np.asarray(log_scale)[None], np.asarray(quat)[None])[0]


def covariance_batch(log_scales, quats):
    R = quat_to_matrix(quats)
    s2 = np.exp(2.0 * log_scales)
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


def covariance_backward(grad_cov, log_scales, quats):
    """Adjoint of covariance_batch -> (grad_log_scales, grad_quats, grad_R_extra_hook).

    grad_cov may be asymmetric; symmetrization happens through the M M^T
    structure. Returns gradients plus the rotation matrices for reuse.
    """
    R = quat_to_matrix(quats)
    s = np.exp(log_scales)
    M = R * s[:, None, :]
    gM = np.einsum("nij,njk->nik", grad_cov + np.swapaxes(grad_cov, -1, -2), M)
    gR = gM * s[:, None, :]
    g_log_s = np.einsum("nik,nik->nk", gM, R) * s
    g_quat = quat_vjp(quats, gR)
    return g_log_s, g_quat, R


def gated_opacity(opacity, sharpness, duration, center, t):
    """Soft temporal window: opacity * sigmoid(sharpness * (duration - |t - center|))."""
    return np.asarray(opacity) * gate_value(sharpness, duration, center, t)


def gate_value(sharpness, duration, center, t):
    return sigmoid(sharpness * (np.asarray(duration) - np.abs(t - np.asarray(center))))


def gate_backward(grad_gate, sharpness, duration, center, t):
    """Adjoint of gate_value -> (grad_duration, grad_center)."""
    g = gate_value(sharpness, duration, center, t)
    dpre = grad_gate * g * (1.0 - g) * sharpness
    return dpre, dpre * np.sign(t - np.asarray(center))


# ---------------------------------------------------------------------------
# pose evaluation


@dataclass
class BlendContext:
    """Saved intermediates of one basis blend, keyed by frame index."""

    t: int
    basis_R: np.ndarray   # (K, 3, 3) orthonormalized basis rotations
    cols6: np.ndarray     # (K, 6) their first two columns
    blend6: np.ndarray    # (N, 6) weighted 6D blend
    A_rot: np.ndarray     # (N, 3, 3)
    A_tr: np.ndarray      # (N, 3)


def blend_bases(weights, bases: MotionBases, t) -> BlendContext:
    """Blend the shared bases at frame t for every rigid Gaussian."""
    basis_R = rot6d_to_matrix(bases.rot6d[:, t])
    cols6 = matrix_to_rot6d(basis_R)
    blend6 = weights @ cols6
    A_rot = rot6d_to_matrix(blend6)
    A_tr = weights @ bases.trans[:, t]
    return BlendContext(t=t, basis_R=basis_R, cols6=cols6, blend6=blend6, A_rot=A_rot, A_tr=A_tr)


def blend_backward(ctx: BlendContext, weights, bases: MotionBases,
                   grad_A_rot, grad_A_tr, out_weights, out_rot6d, out_trans):
    """Accumulate blend adjoints into weight and basis gradient buffers."""
    if grad_A_rot is not None:
        d_blend6 = rot6d_vjp(ctx.blend6, grad_A_rot)
        out_weights += d_blend6 @ ctx.cols6.T
        d_cols6 = weights.T @ d_blend6
        d_basis_R = np.zeros_like(ctx.basis_R)
        d_basis_R[:, :, 0] = d_cols6[:, :3]
        d_basis_R[:, :, 1] = d_cols6[:, 3:]
        out_rot6d[:, ctx.t] += rot6d_vjp(bases.rot6d[:, ctx.t], d_basis_R)
    if grad_A_tr is not None:
        out_weights += grad_A_tr @ bases.trans[:, ctx.t].T
        out_trans[:, ctx.t] += weights.T @ grad_A_tr
    return out_weights


def rigid_pose_at(rigids: RigidGaussians, bases: MotionBases, t):
    """World (means (N,3), rotations (N,3,3)) of all rigid Gaussians at frame t."""
    ctx = blend_bases(rigids.weights, bases, t)
    means = np.einsum("nij,nj->ni", ctx.A_rot, rigids.means) + ctx.A_tr
    rotations = np.einsum("nij,njk->nik", ctx.A_rot, quat_to_matrix(rigids.quats))
    return means, rotations


def rigid_means_at(rigids: RigidGaussians, ctx: BlendContext):
    return np.einsum("nij,nj->ni", ctx.A_rot, rigids.means) + ctx.A_tr


def transient_position_at(transients: TransientGaussians, t):
    """Linear trajectories mu + v (t - center); rotation stays canonical."""
    return transients.means + transients.velocities * (t - transients.centers)[:, None]


def _velocity_frame_pairs(t, n_frames):
    if n_frames < 2:
        return None, None
    fwd = (t + 1, t) if t + 1 <= n_frames - 1 else (t, t - 1)
    bwd = (t, t - 1) if t - 1 >= 0 else (t + 1, t)
    return fwd, bwd


def rigid_velocities_at(rigids: RigidGaussians, bases: MotionBases, t):
    """Forward/backward finite-difference velocities of rigid means at frame t."""
    fwd, bwd = _velocity_frame_pairs(t, bases.n_frames)
    if fwd is None:
        z = np.zeros_like(rigids.means)
        return z, z.copy()
    mean_at = {}
    for f in set(fwd) | set(bwd):
        mean_at[f] = rigid_means_at(rigids, blend_bases(rigids.weights, bases, f))
    v_fwd = mean_at[fwd[0]] - mean_at[fwd[1]]
    v_bwd = mean_at[bwd[0]] - mean_at[bwd[1]]
    return v_fwd, v_bwd


def transient_velocities_at(transients: TransientGaussians, t):
    return transients.velocities.copy(), transients.velocities.copy()


# ---------------------------------------------------------------------------
# rigid -> transient transition


def transition_rigid_to_transient(gset: GaussianSet, threshold):
    """Convert every rigid Gaussian with duration < threshold into a transient.

    Returns (new_set, count). The converted Gaussian keeps its appearance and
    temporal window; its position/rotation are frozen at round(center) and its
    velocity comes from a central difference of the rigid trajectory there.
    """
    require(threshold > 0, "transition threshold must be positive")
    rigids = gset.rigids
    move = rigids.durations < threshold
    count = int(np.count_nonzero(move))
    if count == 0:
        return gset, 0

    T = gset.n_frames
    idx = np.nonzero(move)[0]
    sub = RigidGaussians(
        rigids.means[idx], rigids.log_scales[idx], rigids.quats[idx],
        rigids.opacity_logits[idx], rigids.colors[idx],
        weights=rigids.weights[idx], durations=rigids.durations[idx], centers=rigids.centers[idx],
    )
    t_anchor = np.clip(np.round(sub.centers).astype(int), 0, T - 1)

    new_means = np.zeros((count, 3))
    new_quats = np.zeros((count, 4))
    new_vel = np.zeros((count, 3))
    for k in range(count):
        row = RigidGaussians(
            sub.means[k:k + 1], sub.log_scales[k:k + 1], sub.quats[k:k + 1],
            sub.opacity_logits[k:k + 1], sub.colors[k:k + 1],
            weights=sub.weights[k:k + 1], durations=sub.durations[k:k + 1],
            centers=sub.centers[k:k + 1],
        )
        ta = int(t_anchor[k])
        ctx = blend_bases(row.weights, gset.bases, ta)
        new_means[k] = rigid_means_at(row, ctx)[0]
        new_quats[k] = matrix_to_quat(ctx.A_rot[0] @ quat_to_matrix(row.quats)[0])
        lo, hi = max(ta - 1, 0), min(ta + 1, T - 1)
        if hi > lo:
            m_hi = rigid_means_at(row, blend_bases(row.weights, gset.bases, hi))[0]
            m_lo = rigid_means_at(row, blend_bases(row.weights, gset.bases, lo))[0]
            new_vel[k] = (m_hi - m_lo) / (hi - lo)

    converted = TransientGaussians(
        new_means, sub.log_scales.copy(), new_quats,
        sub.opacity_logits.copy(), sub.colors.copy(),
        velocities=new_vel, durations=sub.durations.copy(), centers=sub.centers.copy(),
    )
    keep = ~move
    remaining = RigidGaussians(
        rigids.means[keep], rigids.log_scales[keep], rigids.quats[keep],
        rigids.opacity_logits[keep], rigids.colors[keep],
        weights=rigids.weights[keep], durations=rigids.durations[keep],
        centers=rigids.centers[keep],
    )
    new_set = GaussianSet(gset.statics, remaining, gset.transients.extend(converted),
                          gset.bases, gset.gate_sharpness)
    return new_set, count


# ---------------------------------------------------------------------------
# parameter trees (used by the optimizer and the gradient buffers)

GROUP_FIELDS = {
    "static": ("means", "log_scales", "quats", "opacity_logits", "colors"),
    "rigid": ("means", "log_scales", "quats", "opacity_logits", "colors",
              "weights", "durations", "centers"),
    "transient": ("means", "log_scales", "quats", "opacity_logits", "colors",
                  "velocities", "durations", "centers"),
    "bases": ("rot6d", "trans"),
}


def population(gset: GaussianSet, kind):
    return {"static": gset.statics, "rigid": gset.rigids,
            "transient": gset.transients, "bases": gset.bases}[kind]


def parameter_tree(gset: GaussianSet):
    """Live views of every optimizable array, as {group: {field: ndarray}}."""
    return {kind: {f: getattr(population(gset, kind), f) for f in names}
            for kind, names in GROUP_FIELDS.items()}


def zeros_like_tree(gset: GaussianSet):
    return {kind: {f: np.zeros_like(arr) for f, arr in grp.items()}
            for kind, grp in parameter_tree(gset).items()}


# ---------------------------------------------------------------------------
# checkpoint format: magic, u64 header length, JSON header, float32 payload


def save_checkpoint(gset: GaussianSet, path):
    tree = parameter_tree(gset)
    field_specs = []
    blobs = []
    offset = 0
    for kind, names in GROUP_FIELDS.items():
        for name in names:
            arr = tree[kind][name].astype("<f4")
            field_specs.append({
                "population": kind, "name": name,
                "shape": list(arr.shape), "offset": offset,
            })
            blobs.append(arr.tobytes())
            offset += len(blobs[-1])
    header = {
        "counts": {"static": len(gset.statics), "rigid": len(gset.rigids),
                   "transient": len(gset.transients)},
        "K": gset.bases.n_bases,
        "T": gset.bases.n_frames,
        "alpha_gate": gset.gate_sharpness,
        "fields": field_specs,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"{path}: expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()

    arrays = {}
    for spec_entry in header["fields"]:
        shape = tuple(spec_entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = spec_entry["offset"]
        raw = payload[start:start + 4 * n]
        if len(raw) != 4 * n:
            raise ShapeMismatch(f"{path}: truncated field {spec_entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        arrays[(spec_entry["population"], spec_entry["name"])] = arr

    def grab(kind, name):
        try:
            return arrays[(kind, name)]
        except KeyError:
            raise ShapeMismatch(f"{path}: missing field {kind}.{name}")

    statics = StaticGaussians(*[grab("static", f) for f in GROUP_FIELDS["static"]])
    rigids = RigidGaussians(*[grab("rigid", f) for f in GROUP_FIELDS["rigid"][:5]],
                            weights=grab("rigid", "weights"),
                            durations=grab("rigid", "durations"),
                            centers=grab("rigid", "centers"))
    transients = TransientGaussians(*[grab("transient", f) for f in GROUP_FIELDS["transient"][:5]],
                                    velocities=grab("transient", "velocities"),
                                    durations=grab("transient", "durations"),
                                    centers=grab("transient", "centers"))
    bases = MotionBases(grab("bases", "rot6d"), grab("bases", "trans"))
    if bases.n_bases != header["K"] or bases.n_frames != header["T"]:
        raise ShapeMismatch(f"{path}: basis shape disagrees with header")
    return GaussianSet(statics, rigids, transients, bases, float(header["alpha_gate"]))
