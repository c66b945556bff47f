import numpy as np

from dysplat.sceneflow import (
    backward_scene_flow,
    depth_validity,
    forward_scene_flow,
    scene_flow_mask,
)

from conftest import PlaneMoverScene, make_cam


def erode(mask, r=2):
    """Shrink a boolean mask so warp support never straddles a boundary."""
    out = mask.copy()
    for _ in range(r):
        m = out.copy()
        m[1:] &= out[:-1]
        m[:-1] &= out[1:]
        m[:, 1:] &= out[:, :-1]
        m[:, :-1] &= out[:, 1:]
        out = m
    return out


class StaticPlaneScene(PlaneMoverScene):
    """Single fronto-parallel plane (no boundaries) under camera translation."""

    Z_LEFT = 6.0
    Z_RIGHT = 6.0
    EXT_X = (9e9, 9e9 + 1)  # mover pushed out of view
    U = np.array([0.0, 0.0, 0.0])
    CAMS = [np.zeros(3), np.array([0.35, -0.2, 0.12])]


class TestForwardSceneFlow:
    def test_static_everything_zero(self):
        H, W = 12, 16
        cam = make_cam(width=W, height=H, cx=8.0, cy=6.0)
        depth = np.full((H, W), 3.0)
        v, valid = forward_scene_flow(depth, depth, np.zeros((H, W, 2)), cam, cam)
        assert valid.all()
        assert np.max(np.abs(v)) == 0.0

    def test_camera_motion_invariance(self):
        scene = StaticPlaneScene()
        cam0, cam1 = scene.camera(0), scene.camera(1)
        _, z0, _ = scene.surfaces(scene.CAMS[0], 0)
        _, z1, _ = scene.surfaces(scene.CAMS[1], 1)
        fwd, _ = scene.flow(0, 1)
        v, valid = forward_scene_flow(z0, z1, fwd, cam0, cam1)
        assert valid.any()
        assert np.max(np.abs(v[valid])) <= 1e-6

    def test_translating_object(self):
        scene = PlaneMoverScene()
        cam0, cam1 = scene.camera(0), scene.camera(1)
        ids0, z0, _ = scene.surfaces(scene.CAMS[0], 0)
        _, z1, _ = scene.surfaces(scene.CAMS[1], 1)
        fwd, _ = scene.flow(0, 1)
        v, valid = forward_scene_flow(z0, z1, fwd, cam0, cam1)
        interior = {i: erode(ids0 == i) & valid for i in (0, 1, 2)}
        # background boundaries excluded, background flow vanishes
        for i in (0, 1):
            assert np.max(np.abs(v[interior[i]])) <= 1e-6
        # the mover's 3D displacement is its world velocity
        err = np.abs(v[interior[2]] - scene.U)
        assert np.max(err) <= 1e-6


class TestBackwardSceneFlow:
    def test_static_zero(self):
        H, W = 10, 10
        cam = make_cam(width=W, height=H, cx=5.0, cy=5.0)
        depth = np.full((H, W), 2.0)
        v, valid = backward_scene_flow(depth, depth, np.zeros((H, W, 2)), cam, cam)
        assert valid.all() and np.max(np.abs(v)) == 0.0

    def test_constant_velocity_mirror(self):
        scene = PlaneMoverScene()
        cam0, cam1 = scene.camera(0), scene.camera(1)
        ids1, z1, _ = scene.surfaces(scene.CAMS[1], 1)
        _, z0, _ = scene.surfaces(scene.CAMS[0], 0)
        bwd, _ = scene.flow(1, 0)
        v, valid = backward_scene_flow(z1, z0, bwd, cam1, cam0)
        sel = erode(ids1 == 2) & valid
        assert np.max(np.abs(v[sel] - scene.U)) <= 1e-6

    def test_forward_backward_consistency(self):
        # constant object velocity: v_fwd at t equals v_bwd at t+1 (both = U)
        scene = PlaneMoverScene()
        cam0, cam1 = scene.camera(0), scene.camera(1)
        ids0, z0, _ = scene.surfaces(scene.CAMS[0], 0)
        ids1, z1, _ = scene.surfaces(scene.CAMS[1], 1)
        fwd, _ = scene.flow(0, 1)
        bwd, _ = scene.flow(1, 0)
        vf, valid_f = forward_scene_flow(z0, z1, fwd, cam0, cam1)
        vb, valid_b = backward_scene_flow(z1, z0, bwd, cam1, cam0)
        sf = erode(ids0 == 2) & valid_f
        sb = erode(ids1 == 2) & valid_b
        assert np.max(np.abs(vf[sf] - scene.U)) <= 1e-6
        assert np.max(np.abs(vb[sb] - scene.U)) <= 1e-6


class TestMask:
    def test_absorbing_zero(self):
        rng = np.random.default_rng(0)
        m = rng.uniform(size=(6, 6)) > 0.5
        zero = np.zeros((6, 6), dtype=bool)
        one = np.ones((6, 6), dtype=bool)
        assert not scene_flow_mask(zero, m, one, m).any()

    def test_all_ones(self):
        one = np.ones((4, 4), dtype=bool)
        assert scene_flow_mask(one, one, one, one).all()

    def test_subset_of_each_input(self):
        rng = np.random.default_rng(1)
        masks = [rng.uniform(size=(8, 8)) > 0.4 for _ in range(4)]
        out = scene_flow_mask(*masks)
        for m in masks:
            assert not np.any(out & ~m)

    def test_commutative_idempotent(self):
        rng = np.random.default_rng(2)
        a, b, c, d = [rng.uniform(size=(5, 5)) > 0.5 for _ in range(4)]
        assert np.array_equal(scene_flow_mask(a, b, c, d), scene_flow_mask(d, c, b, a))
        out = scene_flow_mask(a, b, c, d)
        assert np.array_equal(scene_flow_mask(out, out, out, out), out)


def test_depth_validity_range():
    d = np.array([[np.nan, 0.0, 1e-5], [0.5, 100.0, 2e4]])
    assert np.array_equal(depth_validity(d), [[False, False, False], [True, True, False]])
