"""Scene dataset container and its on-disk layout.

Layout (all raw numeric files little-endian, each with a JSON sidecar
{"width","height","channels","dtype"}):

    frames/%05d.ppm        P6 images, 8-bit
    depth/%05d.f32         metric depth, 1 channel
    flow_fwd/%05d.f32      flow t -> t+1, 2 channels (last frame zeros)
    flow_bwd/%05d.f32      flow t -> t-1, 2 channels (first frame zeros)
    uncert/%05d.f32        optional flow uncertainty, 1 channel
    objects/%05d.u16       object id maps (0 = background)
    dyn_mask/%05d.u8       optional precomputed dynamic masks
    gt_flow3d_fwd/%05d.f32 optional ground-truth 3D scene flow, 3 channels
    gt_flow3d_bwd/%05d.f32 optional
    cameras.json           per-frame {fx,fy,cx,cy,width,height,w2c[16]}
    tracks.f32 + tracks.json {"n","t"}   N x T x 3 (u px, v px, visibility)
    gt_labels.json         optional {"dynamic_ids": [...]}
    gt_set.rigs            optional generating Gaussian set (checkpoint format)
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MissingChannel, ShapeMismatch, ValidationError
from .geometry import CameraFrame
from .primitives import GaussianSet, load_checkpoint, save_checkpoint

_DTYPES = {"float32": "<f4", "uint16": "<u2", "uint8": "<u1"}
_SUFFIX = {"float32": ".f32", "uint16": ".u16", "uint8": ".u8"}


@dataclass
class SceneDataset:
    images: np.ndarray          # (T, H, W, 3) in [0, 1]
    cameras: list               # T CameraFrame
    depths: np.ndarray          # (T, H, W)
    flows_fwd: np.ndarray       # (T, H, W, 2), last frame zeros
    flows_bwd: np.ndarray       # (T, H, W, 2), first frame zeros
    object_ids: np.ndarray      # (T, H, W) uint16
    tracks: np.ndarray          # (N, T, 3): u, v, visibility
    uncertainties: np.ndarray | None = None   # (T, H, W)
    dyn_masks: np.ndarray | None = None       # (T, H, W) bool
    gt_dynamic_ids: list | None = None
    gt_flow3d_fwd: np.ndarray | None = None   # (T, H, W, 3)
    gt_flow3d_bwd: np.ndarray | None = None
    gt_set: GaussianSet | None = None

    def __post_init__(self):
        T, H, W = self.images.shape[:3]
        for name in ("depths", "flows_fwd", "flows_bwd", "object_ids"):
            arr = getattr(self, name)
            if arr.shape[:3] != (T, H, W):
                raise ShapeMismatch(f"{name}: expected leading shape {(T, H, W)}, got {arr.shape}")
        if len(self.cameras) != T:
            raise ShapeMismatch(f"expected {T} cameras, got {len(self.cameras)}")
        if self.tracks.ndim != 3 or self.tracks.shape[1] != T or self.tracks.shape[2] != 3:
            raise ShapeMismatch(f"tracks: expected (N, {T}, 3), got {self.tracks.shape}")

    @property
    def n_frames(self):
        return self.images.shape[0]

    @property
    def image_size(self):
        return self.images.shape[1], self.images.shape[2]  # (H, W)


# ---------------------------------------------------------------------------
# raw files with sidecars


def write_raw(path, arr, dtype):
    path = Path(path)
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[..., None]
    H, W, C = arr.shape
    path.write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    sidecar = {"width": W, "height": H, "channels": C, "dtype": dtype}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_raw(path):
    path = Path(path)
    side = path.with_suffix(".json")
    if not path.exists() or not side.exists():
        raise MissingChannel(path.stem, path)
    meta = json.loads(side.read_text())
    dtype = meta["dtype"]
    if dtype not in _DTYPES:
        raise ValidationError(f"{side}: unknown dtype {dtype}")
    W, H, C = int(meta["width"]), int(meta["height"]), int(meta["channels"])
    raw = path.read_bytes()
    itemsize = np.dtype(_DTYPES[dtype]).itemsize
    if len(raw) != W * H * C * itemsize:
        raise ShapeMismatch(f"{path}: payload is {len(raw)} bytes, sidecar implies "
                            f"{W * H * C * itemsize}")
    arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(H, W, C)
    return arr[..., 0] if C == 1 else arr


def write_ppm(path, image):
    """8-bit binary P6 from a float image in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    H, W = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    # header: magic, width, height, maxval, separated by whitespace/comments
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.match(rb"\s*(#[^\n]*\n|\S+)", raw[pos:])
        if m is None:
            raise ValidationError(f"{path}: truncated PPM header")
        tok = m.group(1)
        pos += m.end()
        if not tok.startswith(b"#"):
            tokens.append(tok)
    if tokens[0] != b"P6":
        raise ValidationError(f"{path}: not a binary PPM")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValidationError(f"{path}: only 8-bit PPM supported")
    start = pos + 1  # exactly one whitespace byte separates maxval from pixels
    if len(raw) - start < W * H * 3:
        raise ShapeMismatch(f"{path}: pixel payload truncated")
    data = np.frombuffer(raw, dtype=np.uint8, count=W * H * 3, offset=start)
    return data.reshape(H, W, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset save / load


def _frame_name(i, suffix):
    return f"{i:05d}{suffix}"


def save_dataset(ds: SceneDataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    T = ds.n_frames

    (out / "frames").mkdir(exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    (out / "flow_fwd").mkdir(exist_ok=True)
    (out / "flow_bwd").mkdir(exist_ok=True)
    (out / "objects").mkdir(exist_ok=True)
    for t in range(T):
        write_ppm(out / "frames" / _frame_name(t, ".ppm"), ds.images[t])
        write_raw(out / "depth" / _frame_name(t, ".f32"), ds.depths[t], "float32")
        write_raw(out / "flow_fwd" / _frame_name(t, ".f32"), ds.flows_fwd[t], "float32")
        write_raw(out / "flow_bwd" / _frame_name(t, ".f32"), ds.flows_bwd[t], "float32")
        write_raw(out / "objects" / _frame_name(t, ".u16"), ds.object_ids[t], "uint16")
    if ds.uncertainties is not None:
        (out / "uncert").mkdir(exist_ok=True)
        for t in range(T):
            write_raw(out / "uncert" / _frame_name(t, ".f32"), ds.uncertainties[t], "float32")
    if ds.dyn_masks is not None:
        (out / "dyn_mask").mkdir(exist_ok=True)
        for t in range(T):
            write_raw(out / "dyn_mask" / _frame_name(t, ".u8"),
                      ds.dyn_masks[t].astype(np.uint8), "uint8")
    if ds.gt_flow3d_fwd is not None:
        (out / "gt_flow3d_fwd").mkdir(exist_ok=True)
        (out / "gt_flow3d_bwd").mkdir(exist_ok=True)
        for t in range(T):
            write_raw(out / "gt_flow3d_fwd" / _frame_name(t, ".f32"), ds.gt_flow3d_fwd[t], "float32")
            write_raw(out / "gt_flow3d_bwd" / _frame_name(t, ".f32"), ds.gt_flow3d_bwd[t], "float32")

    cams = [c.to_dict() for c in ds.cameras]
    (out / "cameras.json").write_text(json.dumps(cams, sort_keys=True))
    n = ds.tracks.shape[0]
    (out / "tracks.f32").write_bytes(np.ascontiguousarray(ds.tracks, dtype="<f4").tobytes())
    (out / "tracks.json").write_text(json.dumps({"n": n, "t": T}, sort_keys=True))
    if ds.gt_dynamic_ids is not None:
        (out / "gt_labels.json").write_text(
            json.dumps({"dynamic_ids": [int(i) for i in ds.gt_dynamic_ids]}, sort_keys=True))
    if ds.gt_set is not None:
        save_checkpoint(ds.gt_set, out / "gt_set.rigs")


def _load_frames(dirpath, suffix, T, reader, channel):
    if not dirpath.is_dir():
        raise MissingChannel(channel, dirpath)
    out = []
    for t in range(T):
        p = dirpath / _frame_name(t, suffix)
        if not p.exists():
            raise MissingChannel(channel, p)
        out.append(reader(p))
    return np.stack(out, axis=0)


def load_dataset(dir_path) -> SceneDataset:
    root = Path(dir_path)
    cam_file = root / "cameras.json"
    if not cam_file.exists():
        raise MissingChannel("cameras", cam_file)
    cameras = [CameraFrame.from_dict(d) for d in json.loads(cam_file.read_text())]
    T = len(cameras)

    images = _load_frames(root / "frames", ".ppm", T, read_ppm, "frames")
    depths = _load_frames(root / "depth", ".f32", T, read_raw, "depth").astype(np.float64)
    flows_fwd = _load_frames(root / "flow_fwd", ".f32", T, read_raw, "flow_fwd").astype(np.float64)
    flows_bwd = _load_frames(root / "flow_bwd", ".f32", T, read_raw, "flow_bwd").astype(np.float64)
    objects = _load_frames(root / "objects", ".u16", T, read_raw, "objects").astype(np.int64)

    tracks_file = root / "tracks.f32"
    meta_file = root / "tracks.json"
    if not tracks_file.exists() or not meta_file.exists():
        raise MissingChannel("tracks", tracks_file)
    meta = json.loads(meta_file.read_text())
    n, t_meta = int(meta["n"]), int(meta["t"])
    if t_meta != T:
        raise ShapeMismatch(f"tracks.json frame count {t_meta} != {T}")
    raw = np.frombuffer(tracks_file.read_bytes(), dtype="<f4")
    if raw.size != n * T * 3:
        raise ShapeMismatch(f"tracks.f32 holds {raw.size} floats, expected {n * T * 3}")
    tracks = raw.reshape(n, T, 3).astype(np.float64)

    uncert = None
    if (root / "uncert").is_dir():
        uncert = _load_frames(root / "uncert", ".f32", T, read_raw, "uncert").astype(np.float64)
    dyn = None
    if (root / "dyn_mask").is_dir():
        dyn = _load_frames(root / "dyn_mask", ".u8", T, read_raw, "dyn_mask").astype(bool)
    gt_ids = None
    if (root / "gt_labels.json").exists():
        gt_ids = json.loads((root / "gt_labels.json").read_text())["dynamic_ids"]
    gt_f = gt_b = None
    if (root / "gt_flow3d_fwd").is_dir():
        gt_f = _load_frames(root / "gt_flow3d_fwd", ".f32", T, read_raw, "gt_flow3d_fwd").astype(np.float64)
        gt_b = _load_frames(root / "gt_flow3d_bwd", ".f32", T, read_raw, "gt_flow3d_bwd").astype(np.float64)
    gt_set = None
    if (root / "gt_set.rigs").exists():
        gt_set = load_checkpoint(root / "gt_set.rigs")

    return SceneDataset(
        images=images, cameras=cameras, depths=depths, flows_fwd=flows_fwd,
        flows_bwd=flows_bwd, object_ids=objects, tracks=tracks,
        uncertainties=uncert, dyn_masks=dyn, gt_dynamic_ids=gt_ids,
        gt_flow3d_fwd=gt_f, gt_flow3d_bwd=gt_b, gt_set=gt_set,
    )
