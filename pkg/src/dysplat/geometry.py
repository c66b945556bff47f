"""Camera models, rotation representations and projective geometry.

Everything here is a pure function over immutable numpy arrays (float64).
Functions that sit on the differentiable rendering path come with a matching
``*_vjp`` / ``*_backward`` companion computing exact vector-Jacobian products;
those are exercised against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRotation6D, NonPositiveDepth, ValidationError
from .validation import as_array, require

MIN_DEPTH = 1e-8
COV2D_DILATION = 0.3  # px^2 low-pass added to projected covariances


# ---------------------------------------------------------------------------
# camera types


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        require(self.fx > 0 and self.fy > 0, "focal lengths must be positive")
        require(0 <= self.cx < self.width, "cx outside image")
        require(0 <= self.cy < self.height, "cy outside image")


@dataclass(frozen=True)
class CameraExtrinsics:
    """World-to-camera rigid transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = as_array(self.rotation, (3, 3), "rotation")
        t = as_array(self.translation, (3,), "translation")
        _check_rotation(R, tol=1e-9)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class CameraFrame:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics

    @property
    def width(self):
        return self.intrinsics.width

    @property
    def height(self):
        return self.intrinsics.height

    def world_to_camera(self, points):
        """Map (..., 3) world points into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.extrinsics.rotation.T + self.extrinsics.translation

    def camera_to_world(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.extrinsics.translation) @ self.extrinsics.rotation

    def position(self):
        """Camera center in world coordinates."""
        E = self.extrinsics
        return -E.rotation.T @ E.translation

    def w2c_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.extrinsics.rotation
        M[:3, 3] = self.extrinsics.translation
        return M

    @staticmethod
    def from_dict(d):
        intr = CameraIntrinsics(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
        )
        w2c = as_array(d["w2c"], (16,), "w2c").reshape(4, 4)
        if not np.allclose(w2c[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValidationError("w2c last row must be 0 0 0 1")
        extr = CameraExtrinsics(rotation=w2c[:3, :3], translation=w2c[:3, 3])
        return CameraFrame(intr, extr)

    def to_dict(self):
        i = self.intrinsics
        return {
            "fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy,
            "width": i.width, "height": i.height,
            "w2c": [float(v) for v in self.w2c_matrix().reshape(-1)],
        }


def _check_rotation(R, tol):
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise ValidationError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise ValidationError("rotation determinant is not +1")


@dataclass(frozen=True)
class SE3Transform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = as_array(self.rotation, (3, 3), "rotation")
        t = as_array(self.translation, (3,), "translation")
        _check_rotation(R, tol=1e-9)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity():
        return SE3Transform(np.eye(3), np.zeros(3))

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other):
        """self ∘ other: apply ``other`` first."""
        return SE3Transform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        return SE3Transform(self.rotation.T, -self.rotation.T @ self.translation)


# ---------------------------------------------------------------------------
# pinhole projection


def project(point, cam: CameraFrame):
    """Project one world point; returns (pixel (2,), depth)."""
    p_cam = cam.world_to_camera(np.asarray(point, dtype=np.float64))
    z = float(p_cam[2])
    if z <= MIN_DEPTH:
        raise NonPositiveDepth(f"camera-frame depth {z} <= {MIN_DEPTH}")
    i = cam.intrinsics
    pixel = np.array([i.fx * p_cam[0] / z + i.cx, i.fy * p_cam[1] / z + i.cy])
    return pixel, z


def unproject(pixel, depth, cam: CameraFrame):
    """Lift one pixel at ``depth`` back to a world point."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth {depth} <= 0")
    i = cam.intrinsics
    x = (pixel[0] - i.cx) * depth / i.fx
    y = (pixel[1] - i.cy) * depth / i.fy
    return cam.camera_to_world(np.array([x, y, depth], dtype=np.float64))


def project_points(points_world, cam: CameraFrame):
    """Batched projection without raising: returns (pixels (N,2), z (N,), valid)."""
    p_cam = cam.world_to_camera(points_world)
    z = p_cam[:, 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    i = cam.intrinsics
    pix = np.stack([i.fx * p_cam[:, 0] / zs + i.cx, i.fy * p_cam[:, 1] / zs + i.cy], axis=-1)
    return pix, z, valid


def unproject_grid(depth, cam: CameraFrame):
    """Unproject a full depth map to an (H, W, 3) world-point map."""
    H, W = depth.shape
    i = cam.intrinsics
    xs = np.arange(W, dtype=np.float64)
    ys = np.arange(H, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    x = (gx - i.cx) * depth / i.fx
    y = (gy - i.cy) * depth / i.fy
    pts_cam = np.stack([x, y, depth], axis=-1)
    return cam.camera_to_world(pts_cam.reshape(-1, 3)).reshape(H, W, 3)


# ---------------------------------------------------------------------------
# bilinear warping


def warp(field, flow):
    """Sample ``field`` at p + flow(p) with bilinear interpolation.

    field: (H, W) or (H, W, C); flow: (H, W, 2) pixel displacements (dx, dy).
    Returns (warped, valid) where ``valid`` marks samples whose full bilinear
    support lies inside the image.
    """
    field = np.asarray(field, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    squeeze = field.ndim == 2
    if squeeze:
        field = field[..., None]
    H, W, C = field.shape
    if flow.shape != (H, W, 2):
        raise ValidationError(f"flow shape {flow.shape} does not match field {(H, W)}")

    gx, gy = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    sx = gx + flow[..., 0]
    sy = gy + flow[..., 1]
    valid = (sx >= 0.0) & (sx <= W - 1.0) & (sy >= 0.0) & (sy <= H - 1.0)

    cx = np.clip(sx, 0.0, W - 1.0)
    cy = np.clip(sy, 0.0, H - 1.0)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = cx - x0
    wy = cy - y0

    f00 = field[y0, x0]
    f01 = field[y0, x1]
    f10 = field[y1, x0]
    f11 = field[y1, x1]
    out = ((1 - wx) * (1 - wy))[..., None] * f00 + (wx * (1 - wy))[..., None] * f01 \
        + ((1 - wx) * wy)[..., None] * f10 + (wx * wy)[..., None] * f11
    if squeeze:
        out = out[..., 0]
    return out, valid


# ---------------------------------------------------------------------------
# 6D rotation representation (two unorthonormalized matrix columns)


def rot6d_to_matrix(a6):
    """Gram-Schmidt a (..., 6) vector [a1, a2] into (..., 3, 3) rotations.

    Columns of the result are (b1, b2, b1 x b2).
    """
    a = np.asarray(a6, dtype=np.float64)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    a1 = a[..., :3]
    a2 = a[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1)
    if np.any(n1 <= 1e-12):
        raise DegenerateRotation6D("first 6D column has (near-)zero norm")
    b1 = a1 / n1[..., None]
    proj = np.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    n2 = np.linalg.norm(u2, axis=-1)
    if np.any(n2 <= 1e-12):
        raise DegenerateRotation6D("6D columns are (near-)parallel")
    b2 = u2 / n2[..., None]
    b3 = np.cross(b1, b2)
    R = np.stack([b1, b2, b3], axis=-1)  # columns
    return R[0] if single else R


def rot6d_vjp(a6, grad_R):
    """Adjoint of rot6d_to_matrix: (..., 3, 3) cotangent -> (..., 6)."""
    a = np.atleast_2d(np.asarray(a6, dtype=np.float64))
    single = np.asarray(a6).ndim == 1
    g = np.asarray(grad_R, dtype=np.float64).reshape(a.shape[:-1] + (3, 3))

    a1 = a[..., :3]
    a2 = a[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / n1
    proj = np.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    b2 = u2 / n2

    g1 = g[..., :, 0]
    g2 = g[..., :, 1]
    g3 = g[..., :, 2]

    # b3 = b1 x b2:  <g3, db1 x b2> = <b2 x g3, db1>,  <g3, b1 x db2> = <g3 x b1, db2>
    gb1 = g1 + np.cross(b2, g3)
    gb2 = g2 + np.cross(g3, b1)

    # b2 = u2 / |u2|
    gu2 = (gb2 - np.sum(gb2 * b2, axis=-1, keepdims=True) * b2) / n2
    # u2 = a2 - (b1 . a2) b1
    ga2 = gu2 - np.sum(gu2 * b1, axis=-1, keepdims=True) * b1
    gb1 = gb1 - np.sum(gu2 * b1, axis=-1, keepdims=True) * a2 - proj * gu2
    # b1 = a1 / |a1|
    ga1 = (gb1 - np.sum(gb1 * b1, axis=-1, keepdims=True) * b1) / n1

    out = np.concatenate([ga1, ga2], axis=-1)
    return out[0] if single else out


def matrix_to_rot6d(R):
    """First two columns of (..., 3, 3) rotations as a (..., 6) vector."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def interpolate_se3(Ta: SE3Transform, Tb: SE3Transform, s):
    """Blend two rigid transforms: lerp the 6D rotation and the translation."""
    require(0.0 <= s <= 1.0, f"interpolation parameter {s} outside [0, 1]")
    if s == 0.0:
        return Ta
    if s == 1.0:
        return Tb
    a6 = (1.0 - s) * matrix_to_rot6d(Ta.rotation) + s * matrix_to_rot6d(Tb.rotation)
    R = rot6d_to_matrix(a6)
    t = (1.0 - s) * Ta.translation + s * Tb.translation
    return SE3Transform(R, t)


# ---------------------------------------------------------------------------
# quaternions


def quat_to_matrix(q):
    """Convert (..., 4) quaternions (w, x, y, z) to rotation matrices.

    Quaternions are normalized internally, so callers may pass unnormalized
    values; gradients flow through the normalization (see quat_vjp).
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q / n, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def quat_vjp(q, grad_R):
    """Adjoint of quat_to_matrix: (..., 3, 3) cotangent -> (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    nq = q / norm
    w, x, y, z = np.moveaxis(nq, -1, 0)
    g = np.asarray(grad_R, dtype=np.float64)
    G = g.reshape(q.shape[:-1] + (9,))
    g00, g01, g02, g10, g11, g12, g20, g21, g22 = np.moveaxis(G, -1, 0)

    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    dn = np.stack([dw, dx, dy, dz], axis=-1)
    # through normalization q -> q / |q|
    return (dn - np.sum(dn * nq, axis=-1, keepdims=True) * nq) / norm


def matrix_to_quat(R):
    """Convert (..., 3, 3) rotation matrices to (w, x, y, z) quaternions."""
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 2
    R = R.reshape(-1, 3, 3)
    out = np.empty((R.shape[0], 4))
    for k in range(R.shape[0]):
        m = R[k]
        tr = np.trace(m)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            out[k] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            out[k] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            out[k] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            out[k] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# EWA covariance projection


def pinhole_jacobian(means_cam, fx, fy):
    """First-order pinhole Jacobian d(pixel)/d(camera point), (..., 2, 3)."""
    m = np.asarray(means_cam, dtype=np.float64)
    x, y, z = m[..., 0], m[..., 1], m[..., 2]
    zero = np.zeros_like(z)
    J = np.stack([
        fx / z, zero, -fx * x / (z * z),
        zero, fy / z, -fy * y / (z * z),
    ], axis=-1)
    return J.reshape(m.shape[:-1] + (2, 3))


def ewa_project_covariance(cov3, cam: CameraFrame, mean_cam):
    """Project one 3x3 world covariance to a dilated 2x2 screen covariance."""
    mean_cam = np.asarray(mean_cam, dtype=np.float64)
    if mean_cam[2] <= MIN_DEPTH:
        raise NonPositiveDepth(f"camera-frame depth {mean_cam[2]} <= {MIN_DEPTH}")
    i = cam.intrinsics
    J = pinhole_jacobian(mean_cam, i.fx, i.fy)
    P = J @ cam.extrinsics.rotation
    return P @ np.asarray(cov3, dtype=np.float64) @ P.T + COV2D_DILATION * np.eye(2)


def ewa_project_covariance_batch(covs3, R_w2c, means_cam, fx, fy):
    """Batched EWA projection; returns (cov2 (N,2,2), J (N,2,3))."""
    J = pinhole_jacobian(means_cam, fx, fy)
    P = np.einsum("nij,jk->nik", J, R_w2c)
    cov2 = np.einsum("nij,njk,nlk->nil", P, covs3, P)
    cov2 = cov2 + COV2D_DILATION * np.eye(2)
    return cov2, J


def ewa_backward(grad_cov2, covs3, R_w2c, means_cam, fx, fy, J):
    """Adjoint of ewa_project_covariance_batch.

    Returns (grad_cov3 (N,3,3), grad_mean_cam (N,3)); the camera is fixed.
    """
    g = np.asarray(grad_cov2, dtype=np.float64)
    P = np.einsum("nij,jk->nik", J, R_w2c)
    grad_cov3 = np.einsum("nji,njk,nkl->nil", P, g, P)
    # dP = (g + g^T) P cov3  (cov3 symmetric)
    gsym = g + np.swapaxes(g, -1, -2)
    dP = np.einsum("nij,njk,nkl->nil", gsym, P, covs3)
    dJ = np.einsum("nij,kj->nik", dP, R_w2c)

    x, y, z = means_cam[..., 0], means_cam[..., 1], means_cam[..., 2]
    z2 = z * z
    z3 = z2 * z
    dx = dJ[..., 0, 2] * (-fx / z2)
    dy = dJ[..., 1, 2] * (-fy / z2)
    dz = (dJ[..., 0, 0] * (-fx / z2) + dJ[..., 1, 1] * (-fy / z2)
          + dJ[..., 0, 2] * (2 * fx * x / z3) + dJ[..., 1, 2] * (2 * fy * y / z3))
    return grad_cov3, np.stack([dx, dy, dz], axis=-1)


def projection_backward(grad_pix, grad_z, means_cam, fx, fy):
    """Adjoint of the batched pinhole projection; returns grad w.r.t. camera points."""
    x, y, z = means_cam[..., 0], means_cam[..., 1], means_cam[..., 2]
    dx = grad_pix[..., 0] * fx / z
    dy = grad_pix[..., 1] * fy / z
    dz = grad_z - (grad_pix[..., 0] * fx * x + grad_pix[..., 1] * fy * y) / (z * z)
    return np.stack([dx, dy, dz], axis=-1)
