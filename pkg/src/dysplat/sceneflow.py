"""Lifting optical flow plus depth to 3D scene flow, and its validity mask.

Scene flow is expressed in world coordinates: unproject both depth maps to
world-point maps, warp the neighbor frame's map by the optical flow, and
subtract. A rigidly static world therefore yields zero flow under any camera
motion (up to interpolation error, which the validity mask excludes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraFrame, unproject_grid, warp
from .validation import check_same_hw

DEPTH_MIN = 1e-4
DEPTH_MAX = 1e4


@dataclass
class SceneFlowFrame:
    v_fwd: np.ndarray   # (H, W, 3) world displacement to t+1
    v_bwd: np.ndarray   # (H, W, 3) world displacement from t-1
    valid: np.ndarray   # (H, W) bool


def depth_validity(depth):
    d = np.asarray(depth, dtype=np.float64)
    return np.isfinite(d) & (d > DEPTH_MIN) & (d < DEPTH_MAX)


def _lifted_flow(depth_a, depth_b, flow, cam_a: CameraFrame, cam_b: CameraFrame):
    """warp(unproject(depth_b), flow) - unproject(depth_a), with validity."""
    depth_a = np.asarray(depth_a, dtype=np.float64)
    depth_b = np.asarray(depth_b, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    check_same_hw(depth_a, depth_b, flow, names=["depth_a", "depth_b", "flow"])

    pts_a = unproject_grid(depth_a, cam_a)
    pts_b = unproject_grid(depth_b, cam_b)
    warped, warp_ok = warp(pts_b, flow)
    # a warped sample is trustworthy only if its whole bilinear support is valid
    support_ok, _ = warp(depth_validity(depth_b).astype(np.float64), flow)
    valid = warp_ok & (support_ok >= 1.0 - 1e-9) & depth_validity(depth_a)
    v = warped - pts_a
    return np.where(valid[..., None], v, 0.0), valid


def forward_scene_flow(depth_t, depth_next, flow_fwd, cam_t, cam_next):
    """World displacement of each pixel's surface point toward frame t+1."""
    return _lifted_flow(depth_t, depth_next, flow_fwd, cam_t, cam_next)


def backward_scene_flow(depth_t, depth_prev, flow_bwd, cam_t, cam_prev):
    """World displacement from frame t-1 into each pixel's surface point.

    Mirrors the forward case: unproject(depth_t) - warp(unproject(depth_prev)).
    """
    v, valid = _lifted_flow(depth_t, depth_prev, flow_bwd, cam_t, cam_prev)
    return -v, valid


def warped_depth_consistency(depth_a, depth_b, flow, cam_a: CameraFrame,
                             cam_b: CameraFrame, atol=1e-3, rtol=0.0):
    """Check that depth sampled at the flow target matches the depth the
    source pixel's (unmoved) surface point would have in the target camera.

    Pixels whose warp support straddles a depth discontinuity fail this test;
    so do surfaces that move along the optical axis, which is the standard
    price of the check. Tolerances are absolute plus relative in depth.
    """
    depth_a = np.asarray(depth_a, dtype=np.float64)
    depth_b = np.asarray(depth_b, dtype=np.float64)
    H, W = depth_a.shape
    pts_a = unproject_grid(depth_a, cam_a)
    z_expected = cam_b.world_to_camera(pts_a.reshape(-1, 3))[:, 2].reshape(H, W)
    sampled, warp_ok = warp(depth_b, flow)
    support_ok, _ = warp(depth_validity(depth_b).astype(np.float64), flow)
    close = np.abs(sampled - z_expected) <= atol + rtol * np.abs(z_expected)
    return warp_ok & (support_ok >= 1.0 - 1e-9) & close & depth_validity(depth_a)


def scene_flow_mask(dyn_mask, depth_valid, warped_depth_valid, flow_nonoccluded):
    """Pixelwise AND of the four supervision masks."""
    masks = [np.asarray(m, dtype=bool) for m in
             (dyn_mask, depth_valid, warped_depth_valid, flow_nonoccluded)]
    check_same_hw(*masks, names=["dyn_mask", "depth_valid", "warped_depth_valid",
                                 "flow_nonoccluded"])
    return masks[0] & masks[1] & masks[2] & masks[3]
