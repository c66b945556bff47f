"""Initialization, Adam optimization, staged training and transitions.

Training runs in three stages: a static warm-up (background only, photometric
plus geometric losses outside the dynamic mask), a rigid warm-up (rigid
Gaussians and shared bases join, full loss suite), and joint optimization.
Rigid Gaussians whose temporal duration collapses below the threshold are
converted to transients at the end of the rigid warm-up and periodically
afterwards, with their optimizer moments reset.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import SceneDataset
from .dynmask import compose_dynamic_masks, compute_motion_scores, occlusion_mask
from .errors import (
    DegenerateRotation6D,
    EmptyStaticRegion,
    InsufficientTracks,
    TrainingAborted,
)
from .geometry import unproject_grid
from .losses import (
    LossReport,
    LossWeights,
    depth_loss,
    flow_loss,
    normal_loss,
    photometric_loss,
    reg_loss,
    track_loss,
)
from .primitives import (
    GaussianSet,
    MotionBases,
    RigidGaussians,
    StaticGaussians,
    TransientGaussians,
    logit,
    parameter_tree,
    save_checkpoint,
    transition_rigid_to_transient,
    zeros_like_tree,
)
from .rasterizer import prepare_splats, rasterize_backward, rasterize_forward
from .sceneflow import (
    depth_validity,
    backward_scene_flow,
    forward_scene_flow,
    scene_flow_mask,
    warped_depth_consistency,
)
from .validation import require

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15
DURATION_FLOOR = 0.01

DEFAULT_LEARNING_RATES = {
    "means": 0.00016,
    "log_scales": 0.005,
    "quats": 0.001,
    "opacity_logits": 0.05,
    "colors": 0.01,
    "durations": 0.001,
    "centers": 0.001,
    "weights": 0.01,
    "bases": 0.0001,
    "velocities": 0.00016,
}


@dataclass
class TrainConfig:
    iters_total: int = 30000
    iters_static_warmup: int = 3000
    iters_rigid_warmup: int = 12000
    transition_threshold: float = 2.0
    transition_check_every: int = 500
    n_bases: int = 10
    gate_sharpness: float = 3.0
    seed: int = 0
    threads: int = 1
    holdout_every: int = 0          # every k-th frame held out of training; 0 = none
    checkpoint_every: int = 1000
    track_window: int = 8           # correspondence frames drawn from t +- window
    track_samples: int = 64         # track points supervised per iteration
    n_static_init: int = 4000
    init_frames: int = 4
    learning_rates: dict = field(default_factory=dict)
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        require(self.iters_static_warmup + self.iters_rigid_warmup <= self.iters_total,
                "warm-up stages exceed the iteration budget")
        rates = dict(DEFAULT_LEARNING_RATES)
        rates.update(self.learning_rates)
        unknown = set(rates) - set(DEFAULT_LEARNING_RATES)
        require(not unknown, f"unknown learning-rate keys: {sorted(unknown)}")
        require(all(v > 0 for v in rates.values()), "learning rates must be positive")
        self.learning_rates = rates

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return TrainConfig(**d)

    def to_dict(self):
        out = asdict(self)
        return out


# ---------------------------------------------------------------------------
# Adam with constraint projection


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    skipped: dict = field(default_factory=dict)

    @staticmethod
    def for_set(gset: GaussianSet):
        return OptimState(m=zeros_like_tree(gset), v=zeros_like_tree(gset))


def _learning_rate(lr_table, kind, name):
    if kind == "bases":
        return lr_table["bases"]
    return lr_table[name]


def adam_step(gset: GaussianSet, grads, state: OptimState, lr_table,
              active=("static", "rigid", "transient", "bases")):
    """One bias-corrected Adam update followed by constraint projection.

    Parameter groups whose gradients are non-finite are skipped (and counted)
    rather than poisoning the parameters.
    """
    params = parameter_tree(gset)
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for kind, grp in params.items():
        if kind not in active:
            continue
        for name, p in grp.items():
            g = grads[kind][name]
            if p.size == 0:
                continue
            if not np.all(np.isfinite(g)):
                key = f"{kind}.{name}"
                state.skipped[key] = state.skipped.get(key, 0) + 1
                continue
            m = state.m[kind][name]
            v = state.v[kind][name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            lr = _learning_rate(lr_table, kind, name)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    project_constraints(gset)
    return state


def project_constraints(gset: GaussianSet):
    """Renormalize quaternions and rigid weights, clamp durations."""
    for pop in (gset.statics, gset.rigids, gset.transients):
        if len(pop):
            pop.quats /= np.maximum(np.linalg.norm(pop.quats, axis=1, keepdims=True), 1e-12)
    if len(gset.rigids):
        gset.rigids.weights /= np.maximum(
            np.linalg.norm(gset.rigids.weights, axis=1, keepdims=True), 1e-12)
        np.maximum(gset.rigids.durations, DURATION_FLOOR, out=gset.rigids.durations)
    if len(gset.transients):
        np.maximum(gset.transients.durations, DURATION_FLOOR, out=gset.transients.durations)


# ---------------------------------------------------------------------------
# initialization


def _dilate(mask, radius=1):
    out = mask.copy()
    for _ in range(radius):
        m = out.copy()
        m[1:] |= out[:-1]
        m[:-1] |= out[1:]
        m[:, 1:] |= out[:, :-1]
        m[:, :-1] |= out[:, 1:]
        out = m
    return out


def init_static(dataset: SceneDataset, dyn_masks, n_samples, n_frames_sampled, seed):
    """Unproject a stratified subsample of static pixels into Gaussians."""
    rng = np.random.default_rng(seed)
    T = dataset.n_frames
    H, W = dataset.image_size
    frame_ids = np.unique(np.linspace(0, T - 1, max(n_frames_sampled, 1)).astype(int))
    per_frame = max(n_samples // frame_ids.size, 1)

    means, colors, scales = [], [], []
    cell = max(min(H, W) // 8, 1)
    for t in frame_ids:
        cam = dataset.cameras[t]
        static = ~np.asarray(dyn_masks[t], dtype=bool) & depth_validity(dataset.depths[t])
        ys, xs = np.nonzero(static)
        if ys.size == 0:
            continue
        # stratify: group by coarse grid cell, deal samples round-robin
        cells = (ys // cell) * ((W + cell - 1) // cell) + (xs // cell)
        order = np.lexsort((rng.permutation(ys.size), cells))
        by_cell = {}
        for idx in order:
            by_cell.setdefault(cells[idx], []).append(idx)
        picked = []
        queues = [list(v) for _, v in sorted(by_cell.items())]
        while len(picked) < min(per_frame, ys.size) and queues:
            queues = [q for q in queues if q]
            for q in queues:
                if len(picked) >= per_frame:
                    break
                picked.append(q.pop(0))
        sel_y = ys[picked]
        sel_x = xs[picked]
        depth = dataset.depths[t][sel_y, sel_x]
        pix = np.stack([sel_x, sel_y], axis=-1).astype(np.float64)
        pts = unproject_grid(dataset.depths[t], cam)[sel_y, sel_x]
        means.append(pts)
        colors.append(dataset.images[t][sel_y, sel_x])
        scales.append(np.log(depth / cam.intrinsics.fx))
        del pix
    if not means:
        raise EmptyStaticRegion("no static pixels available for initialization")
    means = np.concatenate(means)
    colors = np.concatenate(colors)
    scales = np.repeat(np.concatenate(scales)[:, None], 3, axis=1)
    n = means.shape[0]
    return StaticGaussians(means, scales, np.tile([1.0, 0, 0, 0], (n, 1)),
                           np.full(n, logit(0.5)), colors)


def _kmeans(points, k, seed, iters=50):
    """Plain seeded Lloyd iterations; empty clusters keep their centroid."""
    rng = np.random.default_rng(seed)
    n = points.shape[0]
    centers = points[rng.choice(n, size=k, replace=False)].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
        for j in range(k):
            sel = assign == j
            if np.any(sel):
                centers[j] = np.mean(points[sel], axis=0)
    return assign


def _procrustes(src, dst):
    """Least-squares rotation+translation mapping src points onto dst."""
    c_src = np.mean(src, axis=0)
    c_dst = np.mean(dst, axis=0)
    A = (src - c_src).T @ (dst - c_dst)
    U, _, Vt = np.linalg.svd(A)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    return R, c_dst - R @ c_src


def _bilinear_depth(depth, x, y):
    """Bilinear depth sample at a continuous pixel; 0 outside the image."""
    H, W = depth.shape
    if not (0.0 <= x <= W - 1.0 and 0.0 <= y <= H - 1.0):
        return 0.0
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    wx, wy = x - x0, y - y0
    return float((1 - wx) * (1 - wy) * depth[y0, x0] + wx * (1 - wy) * depth[y0, x1]
                 + (1 - wx) * wy * depth[y1, x0] + wx * wy * depth[y1, x1])


def init_rigid_from_tracks(tracks, depths, cameras, dyn_masks, n_bases, seed,
                           images=None):
    """Lift 2D tracks to 3D trajectories, cluster them into shared SE(3)
    bases (per-frame Procrustes fits against frame 0), and spawn one rigid
    Gaussian per track anchored at its first visible frame."""
    from .geometry import unproject

    T = len(cameras)
    H, W = depths[0].shape
    usable = []
    lifted = []
    for j in range(tracks.shape[0]):
        vis_frames = np.nonzero(tracks[j, :, 2] > 0.5)[0]
        if vis_frames.size < 2:
            continue
        t0 = int(vis_frames[0])
        u, v = tracks[j, t0, 0], tracks[j, t0, 1]
        xi, yi = int(round(u)), int(round(v))
        if not (0 <= xi < W and 0 <= yi < H) or not dyn_masks[t0][yi, xi]:
            continue
        traj = np.zeros((T, 3))
        seen = np.zeros(T, dtype=bool)
        for t in vis_frames:
            u_t, v_t = tracks[j, t, 0], tracks[j, t, 1]
            d = _bilinear_depth(depths[t], u_t, v_t)
            if d <= 0:
                continue
            traj[t] = unproject([u_t, v_t], d, cameras[t])
            seen[t] = True
        if np.count_nonzero(seen) < 2:
            continue
        # hold the nearest lifted position across invisible frames
        seen_idx = np.nonzero(seen)[0]
        for t in range(T):
            if not seen[t]:
                traj[t] = traj[seen_idx[np.argmin(np.abs(seen_idx - t))]]
        usable.append(j)
        lifted.append((traj, seen_idx))
    if len(usable) < n_bases:
        raise InsufficientTracks(
            f"{len(usable)} usable tracks inside dynamic masks, need >= {n_bases}")

    trajs = np.stack([tr for tr, _ in lifted])           # (N, T, 3)
    assign = _kmeans(trajs.reshape(len(usable), -1), n_bases, seed)

    bases = MotionBases.identity(n_bases, T)
    from .geometry import matrix_to_rot6d

    for jb in range(n_bases):
        members = trajs[assign == jb]
        if members.shape[0] == 0:
            continue
        ref = members[:, 0, :]
        for t in range(1, T):
            cur = members[:, t, :]
            if members.shape[0] >= 3:
                R, tr = _procrustes(ref, cur)
            else:
                R = np.eye(3)
                tr = np.mean(cur - ref, axis=0)
            bases.rot6d[jb, t] = matrix_to_rot6d(R)
            bases.trans[jb, t] = tr

    n = len(usable)
    means = np.zeros((n, 3))
    colors = np.full((n, 3), 0.5)
    log_scales = np.zeros((n, 3))
    weights = np.zeros((n, n_bases))
    durations = np.zeros(n)
    centers = np.zeros(n)
    basis_R = bases.matrices()
    for i, (j, (traj, seen_idx)) in enumerate(zip(usable, lifted)):
        t_fv = int(seen_idx[0])
        jb = assign[i]
        # pull the first visible lift back to the canonical (frame 0) frame
        R = basis_R[jb, t_fv]
        tr = bases.trans[jb, t_fv]
        means[i] = R.T @ (traj[t_fv] - tr)
        weights[i, jb] = 1.0
        durations[i] = max((seen_idx[-1] - seen_idx[0]) / 2.0, 0.5)
        centers[i] = (seen_idx[-1] + seen_idx[0]) / 2.0
        cam = cameras[t_fv]
        xi = int(round(tracks[j, t_fv, 0]))
        yi = int(round(tracks[j, t_fv, 1]))
        d = depths[t_fv][yi, xi]
        log_scales[i] = np.log(max(d, 1e-3) / cam.intrinsics.fx)
        if images is not None:
            colors[i] = images[t_fv][yi, xi]
    rig = RigidGaussians(means, log_scales, np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.full(n, logit(0.5)), colors,
                         weights=weights, durations=durations, centers=centers)
    return rig, bases


# ---------------------------------------------------------------------------
# supervision stack derived from the dataset


@dataclass
class Supervision:
    dyn_masks: np.ndarray      # (T, H, W) bool
    normals: np.ndarray        # (T, H, W, 3)
    normals_valid: np.ndarray  # (T, H, W) bool
    sf_fwd: np.ndarray         # (T, H, W, 3)
    sf_bwd: np.ndarray
    sf_mask: np.ndarray        # (T, H, W) bool
    static_valid: np.ndarray   # (T, H, W) bool, dynamic region + 1px excluded


def normals_from_depth(depth, cam):
    """Unit normals from central differences of the unprojected point map,
    oriented toward the camera; discontinuities are flagged invalid."""
    H, W = depth.shape
    pts = unproject_grid(depth, cam)
    dx = np.zeros_like(pts)
    dy = np.zeros_like(pts)
    dx[:, 1:-1] = (pts[:, 2:] - pts[:, :-2]) / 2.0
    dy[1:-1, :] = (pts[2:, :] - pts[:-2, :]) / 2.0
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    ok = norm[..., 0] > 1e-12
    n = np.where(ok[..., None], n / np.maximum(norm, 1e-12), 0.0)
    view = cam.position()[None, None, :] - pts
    flip = np.sum(n * view, axis=-1) < 0
    n[flip] *= -1.0
    valid = ok & depth_validity(depth)
    valid[0, :] = valid[-1, :] = False
    valid[:, 0] = valid[:, -1] = False
    # exclude depth discontinuities
    rel = np.zeros((H, W))
    rel[:, 1:-1] = np.abs(depth[:, 2:] - depth[:, :-2])
    rel2 = np.zeros((H, W))
    rel2[1:-1, :] = np.abs(depth[2:, :] - depth[:-2, :])
    valid &= (rel + rel2) < 0.05 * np.maximum(depth, 1e-6)
    return n, valid


def build_supervision(ds: SceneDataset, config: TrainConfig) -> Supervision:
    T = ds.n_frames
    H, W = ds.image_size
    if ds.dyn_masks is not None:
        dyn = np.asarray(ds.dyn_masks, dtype=bool)
    else:
        table = compute_motion_scores(
            flows_fwd=list(ds.flows_fwd), flows_bwd=list(ds.flows_bwd),
            uncertainties=None if ds.uncertainties is None else list(ds.uncertainties),
            id_maps=list(ds.object_ids), seed=config.seed)
        dyn = np.stack(compose_dynamic_masks(table, list(ds.object_ids)))

    normals = np.zeros((T, H, W, 3))
    normals_valid = np.zeros((T, H, W), dtype=bool)
    static_valid = np.zeros((T, H, W), dtype=bool)
    for t in range(T):
        normals[t], normals_valid[t] = normals_from_depth(ds.depths[t], ds.cameras[t])
        static_valid[t] = ~_dilate(dyn[t], 1)

    sf_fwd = np.zeros((T, H, W, 3))
    sf_bwd = np.zeros((T, H, W, 3))
    sf_mask = np.zeros((T, H, W), dtype=bool)
    for t in range(T):
        masks = []
        if t + 1 < T:
            v, ok = forward_scene_flow(ds.depths[t], ds.depths[t + 1], ds.flows_fwd[t],
                                       ds.cameras[t], ds.cameras[t + 1])
            wd = warped_depth_consistency(ds.depths[t], ds.depths[t + 1], ds.flows_fwd[t],
                                          ds.cameras[t], ds.cameras[t + 1],
                                          atol=1e-4, rtol=1e-3)
            occ = occlusion_mask(ds.flows_fwd[t], ds.flows_bwd[t + 1])
            sf_fwd[t] = v
            masks.append(scene_flow_mask(dyn[t], ok, wd, ~occ))
        if t - 1 >= 0:
            v, ok = backward_scene_flow(ds.depths[t], ds.depths[t - 1], ds.flows_bwd[t],
                                        ds.cameras[t], ds.cameras[t - 1])
            wd = warped_depth_consistency(ds.depths[t], ds.depths[t - 1], ds.flows_bwd[t],
                                          ds.cameras[t], ds.cameras[t - 1],
                                          atol=1e-4, rtol=1e-3)
            occ_b = occlusion_mask(ds.flows_bwd[t], ds.flows_fwd[t - 1])
            sf_bwd[t] = v
            masks.append(scene_flow_mask(dyn[t], ok, wd, ~occ_b))
        if masks:
            sf_mask[t] = masks[0]
            for m in masks[1:]:
                sf_mask[t] &= m
    return Supervision(dyn_masks=dyn, normals=normals, normals_valid=normals_valid,
                       sf_fwd=sf_fwd, sf_bwd=sf_bwd, sf_mask=sf_mask,
                       static_valid=static_valid)


# ---------------------------------------------------------------------------
# training loop


def _tree_select(state_tree, kind, keep=None, extend=0):
    grp = state_tree[kind]
    for name, arr in grp.items():
        if keep is not None:
            arr = arr[keep]
        if extend:
            pad = np.zeros((extend,) + arr.shape[1:])
            arr = np.concatenate([arr, pad], axis=0)
        grp[name] = arr
    return grp


def _migrate_state_after_transition(state: OptimState, keep_mask, n_new, gset):
    """Drop rigid rows that moved and append zero moments for new transients."""
    for tree in (state.m, state.v):
        _tree_select(tree, "rigid", keep=keep_mask)
        _tree_select(tree, "transient", extend=n_new)
    fresh = zeros_like_tree(gset)
    for tree in (state.m, state.v):
        for kind in tree:
            for name in tree[kind]:
                if tree[kind][name].shape != fresh[kind][name].shape:
                    raise AssertionError("optimizer state out of sync after transition")


def _sample_t_corr(rng, t, T, window):
    lo = max(0, t - window)
    hi = min(T - 1, t + window)
    candidates = [f for f in range(lo, hi + 1) if f != t]
    if not candidates:
        return t
    return int(candidates[rng.integers(0, len(candidates))])


def _track_samples(ds: SceneDataset, rng, t, t_corr, limit):
    """Pairs (pixel at t, lifted 3D target at t_corr) for visible tracks."""
    vis = (ds.tracks[:, t, 2] > 0.5) & (ds.tracks[:, t_corr, 2] > 0.5)
    rows = np.nonzero(vis)[0]
    if rows.size == 0:
        return []
    if rows.size > limit:
        rows = rows[rng.permutation(rows.size)[:limit]]
    H, W = ds.image_size
    cam = ds.cameras[t_corr]
    pts_corr = unproject_grid(ds.depths[t_corr], cam)
    samples = []
    for j in rows:
        u_c, v_c = ds.tracks[j, t_corr, 0], ds.tracks[j, t_corr, 1]
        xi, yi = int(round(u_c)), int(round(v_c))
        if not (0 <= xi < W and 0 <= yi < H):
            continue
        if ds.depths[t_corr][yi, xi] <= 0:
            continue
        samples.append((ds.tracks[j, t, :2], pts_corr[yi, xi]))
    return samples


def train_iteration(gset: GaussianSet, ds: SceneDataset, sup: Supervision,
                    config: TrainConfig, rng, t, t_corr, stage):
    """Render one frame, evaluate the stage's losses, backprop, return
    (grads, LossReport)."""
    w = config.loss_weights
    cam = ds.cameras[t]
    batch = prepare_splats(gset, cam, t, t_corr)
    out = rasterize_forward(batch, cam, threads=config.threads)

    terms = {}
    grad_outputs = {}
    if stage == 1:
        valid = sup.static_valid[t]
        photo_terms, g_img, _ = photometric_loss(out.color, ds.images[t], None, None,
                                                 w, valid=valid)
        terms.update(photo_terms)
        grad_outputs["color"] = g_img
        geom_valid = valid & (out.alpha > 0.5)
    else:
        photo_terms, g_img, g_mask = photometric_loss(
            out.color, ds.images[t], out.dyn_mask,
            sup.dyn_masks[t].astype(np.float64), w)
        terms.update(photo_terms)
        grad_outputs["color"] = g_img
        if g_mask is not None:
            grad_outputs["dyn_mask"] = g_mask
        geom_valid = out.alpha > 0.5

    d_val, g_depth = depth_loss(out.depth, ds.depths[t],
                                geom_valid & depth_validity(ds.depths[t]))
    terms["depth"] = d_val
    grad_outputs["depth"] = w.lambda_depth * g_depth

    n_val, g_norm = normal_loss(out.normal, sup.normals[t],
                                geom_valid & sup.normals_valid[t])
    terms["normal"] = n_val
    grad_outputs["normal"] = w.lambda_normal * g_norm

    if stage >= 2:
        samples = _track_samples(ds, rng, t, t_corr, config.track_samples)
        tr_val, g_corr = track_loss(out.corr, samples, out.alpha)
        terms["track"] = tr_val
        grad_outputs["corr"] = w.lambda_track * g_corr

        f_val, g_vf, g_vb = flow_loss(out.v_fwd, out.v_bwd, sup.sf_fwd[t],
                                      sup.sf_bwd[t], sup.sf_mask[t])
        terms["flow"] = f_val
        grad_outputs["v_fwd"] = w.lambda_flow * g_vf
        grad_outputs["v_bwd"] = w.lambda_flow * g_vb

        r_val, r_grads = reg_loss(gset, w)
        terms["reg"] = r_val

    grads = rasterize_backward(batch, cam, out, grad_outputs, gset, t, t_corr,
                               threads=config.threads)
    if stage >= 2:
        for (kind, name), g in r_grads.items():
            grads[kind][name] += g
    return grads, LossReport.from_terms(terms, w)


def train(ds: SceneDataset, config: TrainConfig, out_dir=None, init_set=None):
    """Run the staged optimization; returns (GaussianSet, log records)."""
    rng = np.random.default_rng(config.seed)
    T = ds.n_frames
    sup = build_supervision(ds, config)

    train_frames = [t for t in range(T)
                    if config.holdout_every <= 0 or t % config.holdout_every != 0]
    if not train_frames:
        train_frames = list(range(T))

    if init_set is not None:
        gset = init_set.copy()
        gset.gate_sharpness = config.gate_sharpness
    else:
        statics = init_static(ds, sup.dyn_masks, config.n_static_init,
                              config.init_frames, config.seed)
        gset = GaussianSet(statics, RigidGaussians.empty(config.n_bases),
                           TransientGaussians.empty(),
                           MotionBases.identity(config.n_bases, T),
                           config.gate_sharpness)

    state = OptimState.for_set(gset)
    log = []
    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "log.jsonl"), "w")

    def emit(record):
        log.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")

    def checkpoint(name):
        if out_dir is None:
            return
        path = os.path.join(out_dir, name)
        tmp = path + ".tmp"
        save_checkpoint(gset, tmp)
        os.replace(tmp, path)

    def do_transition(it):
        nonlocal gset
        keep = gset.rigids.durations >= config.transition_threshold
        total_before = len(gset.rigids) + len(gset.transients)
        gset, count = transition_rigid_to_transient(gset, config.transition_threshold)
        if count:
            _migrate_state_after_transition(state, keep, count, gset)
        assert len(gset.rigids) + len(gset.transients) == total_before
        emit({"event": "transition", "iter": it, "converted": count,
              "rigids": len(gset.rigids), "transients": len(gset.transients)})
        return count

    s1 = config.iters_static_warmup
    s2 = config.iters_rigid_warmup
    nonfinite_run = 0
    rigid_init_failed = None

    for it in range(config.iters_total):
        if it == s1 and init_set is None:
            # rigid warm-up begins: spawn rigid Gaussians and bases from tracks
            try:
                rig, bases = init_rigid_from_tracks(
                    ds.tracks, ds.depths, ds.cameras, sup.dyn_masks,
                    config.n_bases, config.seed, images=ds.images)
                gset = GaussianSet(gset.statics, rig, gset.transients, bases,
                                   gset.gate_sharpness)
                state.m["rigid"] = zeros_like_tree(gset)["rigid"]
                state.v["rigid"] = zeros_like_tree(gset)["rigid"]
                state.m["bases"] = zeros_like_tree(gset)["bases"]
                state.v["bases"] = zeros_like_tree(gset)["bases"]
                emit({"event": "rigid_init", "iter": it, "rigids": len(rig)})
            except InsufficientTracks as exc:
                rigid_init_failed = str(exc)
                emit({"event": "rigid_init_skipped", "iter": it, "reason": str(exc)})
        if it == s1 + s2:
            do_transition(it)

        stage = 1 if it < s1 else (2 if it < s1 + s2 else 3)
        if stage == 3 and config.transition_check_every > 0 \
                and it > s1 + s2 and (it - s1 - s2) % config.transition_check_every == 0:
            do_transition(it)

        t = int(train_frames[rng.integers(0, len(train_frames))])
        t_corr = _sample_t_corr(rng, t, T, config.track_window) if stage >= 2 else t

        try:
            grads, report = train_iteration(gset, ds, sup, config, rng, t, t_corr, stage)
        except DegenerateRotation6D:
            emit({"event": "degenerate_blend", "iter": it, "frame": t})
            continue

        if not np.isfinite(report.total):
            nonfinite_run += 1
            if nonfinite_run >= 100:
                if log_file is not None:
                    log_file.close()
                raise TrainingAborted("loss non-finite for 100 consecutive iterations")
        else:
            nonfinite_run = 0

        active = {1: ("static",), 2: ("static", "rigid", "bases"),
                  3: ("static", "rigid", "transient", "bases")}[stage]
        adam_step(gset, grads, state, config.learning_rates, active=active)

        record = {"iter": it, "stage": stage, "frame": t,
                  "total": report.total,
                  "counts": [len(gset.statics), len(gset.rigids), len(gset.transients)]}
        record.update({k: float(v) for k, v in report.terms.items()})
        emit(record)

        if config.checkpoint_every > 0 and (it + 1) % config.checkpoint_every == 0:
            checkpoint(f"ckpt_{it + 1:06d}.rigs")

    checkpoint("final.rigs")
    if log_file is not None:
        log_file.close()
    return gset, log


# ---------------------------------------------------------------------------
# duration histogram


def duration_histogram(gset: GaussianSet, bins):
    """Histogram of temporal durations over rigid + transient Gaussians."""
    require(bins >= 2, "need at least 2 bins")
    values = np.concatenate([gset.rigids.durations, gset.transients.durations])
    T = float(gset.n_frames)
    counts, edges = np.histogram(values, bins=bins, range=(0.0, T))
    return counts, edges


def histogram_image(counts, width=256, height=160):
    """Tiny bar-chart PPM payload (H, W, 3 floats) for the histogram."""
    img = np.ones((height, width, 3))
    n = len(counts)
    peak = max(int(np.max(counts)), 1)
    bar_w = max(width // max(n, 1), 1)
    for i, c in enumerate(counts):
        h = int(round((height - 10) * (c / peak)))
        x0 = i * bar_w
        x1 = min(x0 + max(bar_w - 1, 1), width)
        if h > 0:
            img[height - h:, x0:x1] = [0.15, 0.25, 0.6]
    img[-1, :] = 0.0
    return img
