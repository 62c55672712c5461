import json

import cv2
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from segpatch.appearance import AppearanceParams
from segpatch.errors import BehindCamera, DegenerateConfiguration, InvalidFov, PatchTooLarge, SingularHomography, ValidationError
from segpatch.placement import (
    AffinePlacement,
    CameraIntrinsics,
    EOTConfig,
    Pose,
    ProjectivePlacement,
    apply_homography,
    apply_patches,
    eot_centers,
    estimate_homography,
    intrinsics_from_fov,
    load_pose_file,
    patch_corners,
    placement_from_json,
    placement_to_json,
    project_point,
    project_surface_point,
    rot_x,
    rot_y,
    rot_z,
    sample_eot_placement,
    save_pose_file,
    warp_patch,
)

from fd import check_gradient


# -- intrinsics ---------------------------------------------------------------

def test_intrinsics_reference_values():
    k = intrinsics_from_fov(2048, 1024, np.pi / 2)
    assert k.focal == pytest.approx(1024.0, abs=1e-9)
    assert (k.cx, k.cy) == (1024.0, 512.0)
    assert intrinsics_from_fov(2, 2, np.pi / 2).focal == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(k.K, [[1024, 0, 1024], [0, 1024, 512], [0, 0, 1]])


def test_intrinsics_half_width_convention():
    assert intrinsics_from_fov(2048, 1024, np.pi / 2, "half-width").focal == pytest.approx(2048.0)


def test_focal_decreases_toward_pi():
    fovs = np.linspace(0.1, np.pi - 1e-3, 50)
    f = [intrinsics_from_fov(100, 100, a).focal for a in fovs]
    assert np.all(np.diff(f) < 0)
    assert 0 < f[-1] < 0.1


@pytest.mark.parametrize("fov", [0.0, np.pi, -1.0, 4.0])
def test_invalid_fov(fov):
    with pytest.raises(InvalidFov):
        intrinsics_from_fov(10, 10, fov)


# -- poses and projection -----------------------------------------------------

def test_identity_chain_projects_to_principal_point():
    K = CameraIntrinsics(1.0, 0.0, 0.0, 1, 1)
    uv = project_point([0, 0, 1, 1], Pose.identity(), Pose.identity(), K)
    np.testing.assert_allclose(uv, [0.0, 0.0], atol=1e-15)


def test_pure_translation_pinhole():
    d, f, cx, cy = 5.0, 100.0, 64.0, 32.0
    K = CameraIntrinsics(f, cx, cy, 128, 64)
    plc = ProjectivePlacement(Pose.from_rt(np.eye(3), [0, 0, d]), Pose.identity(), K, (2.0, 1.0))
    for x, y in [(0.0, 0.0), (1.3, 0.4), (2.0, 1.0)]:
        uv = project_surface_point([x, y, 0, 1], plc)
        np.testing.assert_allclose(uv, [f * x / d + cx, f * y / d + cy], atol=1e-12)


def test_behind_camera():
    K = CameraIntrinsics(1.0, 0.0, 0.0, 1, 1)
    with pytest.raises(BehindCamera):
        project_point([0, 0, -1, 1], Pose.identity(), Pose.identity(), K)
    with pytest.raises(BehindCamera):
        ProjectivePlacement(Pose.identity(), Pose.identity(), K, (1.0, 1.0))


def test_pose_validation():
    with pytest.raises(ValidationError):
        Pose(np.diag([1.0, 1.0, 2.0, 1.0]))
    with pytest.raises(ValidationError):
        Pose(np.diag([1.0, 1.0, -1.0, 1.0]))
    assert Pose(np.eye(4).reshape(-1)).matrix.shape == (4, 4)


angles = st.floats(-np.pi, np.pi, allow_nan=False)


@given(st.lists(st.tuples(angles, angles, angles), min_size=1, max_size=20))
def test_rotation_composition_stays_orthonormal(triples):
    pose = Pose.identity()
    for a, b, c in triples:
        pose = pose @ Pose.from_rt(rot_z(c) @ rot_y(b) @ rot_x(a), [a, b, c])
    R = pose.R
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-6)
    assert abs(np.linalg.det(R) - 1) < 1e-6
    np.testing.assert_allclose((pose @ pose.inverse()).matrix, np.eye(4), atol=1e-9)


def test_pose_json_roundtrip(tmp_path):
    from segpatch.scenes import Billboard, camera_pose

    K = intrinsics_from_fov(128, 64, np.pi / 2)
    plc = ProjectivePlacement(camera_pose(0.2, 3.0, 0.01), Billboard().surface_to_world(), K, (6.0, 3.0))
    d = placement_to_json(plc)
    assert set(d) == {"T_world_camera", "T_surface_world", "fov_rad", "image_w", "image_h",
                      "surface_w_m", "surface_h_m"}
    back = placement_from_json(json.loads(json.dumps(d)))
    np.testing.assert_allclose(back.project_corners(), plc.project_corners(), atol=1e-9)
    save_pose_file(tmp_path / "p.json", [plc, plc])
    assert len(load_pose_file(tmp_path / "p.json")) == 2


# -- homography ---------------------------------------------------------------

UNIT = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)


def test_homography_identity_and_scale():
    np.testing.assert_allclose(estimate_homography(UNIT, UNIT), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(estimate_homography(UNIT, 2 * UNIT), np.diag([2.0, 2.0, 1.0]), atol=1e-12)


def test_homography_generic_quad():
    dst = np.array([[0, 0], [1, 0.1], [1.2, 1], [-0.1, 0.9]])
    H = estimate_homography(UNIT, dst)
    assert H[2, 2] == 1.0
    np.testing.assert_allclose(apply_homography(H, UNIT), dst, atol=1e-9)


def test_homography_matches_opencv(rng):
    for _ in range(20):
        src = np.array([[0, 0], [32, 0], [32, 16], [0, 16]], dtype=float)
        dst = src * rng.uniform(0.5, 2.0) + rng.normal(0, 3, size=(4, 2)) + rng.uniform(0, 50, size=2)
        ours = estimate_homography(src, dst)
        ref = cv2.getPerspectiveTransform(src.astype(np.float32), dst.astype(np.float32))
        ref = ref / ref[2, 2]
        np.testing.assert_allclose(apply_homography(ours, src), apply_homography(ref, src), atol=1e-3)


@pytest.mark.parametrize("dst", [
    [[0, 0], [1, 0], [2, 0], [0, 1]],        # three collinear
    [[0, 0], [0, 0], [1, 1], [0, 1]],        # repeated point
])
def test_homography_degenerate(dst):
    with pytest.raises(DegenerateConfiguration):
        estimate_homography(UNIT, np.array(dst, float))


def _random_placement(rng):
    W, H = int(rng.integers(64, 2048)), int(rng.integers(48, 1024))
    K = intrinsics_from_fov(W, H, rng.uniform(0.3, 2.5))
    R = rot_y(rng.uniform(-0.6, 0.6)) @ rot_x(rng.uniform(-0.3, 0.3)) @ rot_z(rng.uniform(-0.2, 0.2))
    surface = Pose.from_rt(R, [rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(6, 30)])
    return ProjectivePlacement(Pose.identity(), surface, K, (rng.uniform(0.5, 4), rng.uniform(0.5, 4)))


def test_homography_round_trip_random_poses():
    rng = np.random.default_rng(7)
    for _ in range(100):
        plc = _random_placement(rng)
        H = plc.homography((16, 32))
        direct = plc.project_corners()
        np.testing.assert_allclose(apply_homography(H, patch_corners((16, 32))), direct, atol=1e-6, rtol=0)


# -- warping ------------------------------------------------------------------

def test_identity_warp(rng):
    p = rng.uniform(size=(6, 9, 3))
    warped, mask = warp_patch(p, np.eye(3), (6, 9))
    assert mask.all()
    np.testing.assert_allclose(warped.numpy(), p, atol=1e-12)


def test_translation_warp(rng):
    p = rng.uniform(size=(4, 5, 3))
    T = np.array([[1, 0, 3], [0, 1, 2], [0, 0, 1.0]])
    warped, mask = warp_patch(p, T, (10, 12))
    expected = np.zeros((10, 12), bool)
    expected[2:6, 3:8] = True
    assert np.array_equal(mask.numpy(), expected)
    np.testing.assert_allclose(warped.numpy()[2:6, 3:8], p, atol=1e-12)
    assert not warped.numpy()[~expected].any()


def test_scaled_checker_footprint():
    checker = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)[..., None]
    _, mask = warp_patch(checker, np.diag([2.0, 2.0, 1.0]), (20, 20))
    area = int(mask.sum())
    assert abs(area - 4 * 64) <= 2 * 16 + 1


def test_singular_homography():
    with pytest.raises(SingularHomography):
        warp_patch(np.zeros((2, 2, 3)), np.zeros((3, 3)), (4, 4))


def test_warp_gradient_matches_finite_differences(rng):
    p = torch.as_tensor(rng.uniform(size=(5, 7, 3)))
    H = np.array([[1.3, 0.2, 2.1], [-0.1, 1.1, 1.7], [0.01, 0.005, 1.0]])
    weights = torch.as_tensor(rng.normal(size=(14, 16, 3)))

    def f(x):
        return (warp_patch(x, H, (14, 16))[0] * weights).sum()

    check_gradient(f, p, n=10, rng=rng)


# -- EOT ----------------------------------------------------------------------

def test_degenerate_eot_is_centered(rng):
    cfg = EOTConfig(scale_range=(1, 1), shift_range=(0, 0))
    plc = sample_eot_placement(rng, (64, 128), (16, 32), cfg)
    assert plc.center == (64.0, 32.0)
    assert plc.scale == 1.0 and plc.rotation == 0.0


def test_eot_sample_ranges():
    rng = np.random.default_rng(0)
    draws = [sample_eot_placement(rng, (64, 128), (16, 32)) for _ in range(10_000)]
    scales = np.array([d.scale for d in draws])
    centers = np.array([d.center for d in draws])
    assert scales.min() >= 0.8 and scales.max() <= 1.2
    assert np.all(np.abs(centers[:, 0] - 64) <= 16) and np.all(np.abs(centers[:, 1] - 32) <= 8)
    assert all(d.rotation == 0 for d in draws)


def test_eot_patch_too_large(rng):
    with pytest.raises(PatchTooLarge):
        sample_eot_placement(rng, (16, 16), (16, 8))


def test_two_patch_centers_are_half_centers():
    assert eot_centers((64, 128), 2) == [(32.0, 32.0), (96.0, 32.0)]
    assert eot_centers((64, 128), 1) == [(64.0, 32.0)]


# -- apply_patches ------------------------------------------------------------

def test_apply_replaces_footprint_exactly(rng):
    img = rng.uniform(size=(20, 30, 3))
    p = rng.uniform(size=(4, 6, 3))
    plc = AffinePlacement(center=(10.0, 8.0))
    out, mask, fps = apply_patches(img, [p], [plc])
    out, mask = out.numpy(), mask.numpy()
    np.testing.assert_array_equal(out[~mask], img[~mask])
    np.testing.assert_allclose(out[6:10, 7:13], p, atol=1e-12)
    assert mask.sum() == 24


def test_disjoint_patches_union_size(rng):
    img = rng.uniform(size=(20, 40, 3))
    ps = [rng.uniform(size=(4, 6, 3)), rng.uniform(size=(5, 5, 3))]
    plcs = [AffinePlacement(center=(8.0, 8.0)), AffinePlacement(center=(30.5, 10.5))]
    _, mask, fps = apply_patches(img, ps, plcs)
    assert int(mask.sum()) == sum(int(f.sum()) for f in fps) == 24 + 25


def test_later_patch_wins(rng):
    img = np.zeros((10, 10, 3))
    a, b = np.full((4, 4, 3), 0.2), np.full((4, 4, 3), 0.9)
    out, _, _ = apply_patches(img, [a, b], [AffinePlacement((5.0, 5.0)), AffinePlacement((6.0, 5.0))])
    assert np.allclose(out.numpy()[3:7, 4:8], 0.9)
    assert np.allclose(out.numpy()[3:7, 3], 0.2)


def test_apply_result_is_clipped(rng):
    img = rng.uniform(size=(12, 12, 3))
    app = AppearanceParams(brightness=0.8)
    out, _, _ = apply_patches(img, [np.full((4, 4, 3), 0.9)], [AffinePlacement((6.0, 6.0))], app)
    assert float(out.max()) <= 1.0 and float(out.min()) >= 0.0


def test_apply_gradient_is_bilinear_mass(rng):
    img = torch.as_tensor(rng.uniform(size=(24, 24, 3)))
    p = torch.as_tensor(rng.uniform(0.1, 0.9, size=(6, 6, 3)))
    plc = AffinePlacement(center=(11.3, 12.7), scale=1.37, rotation=0.3)

    def f(x):
        out, m, _ = apply_patches(img, [x], [plc])
        return (out * m[..., None]).sum()

    pg = p.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(pg), pg)
    assert torch.all(g >= 0)
    H = plc.homography((6, 6))
    ones, mask = warp_patch(torch.ones(6, 6, 1, dtype=torch.float64), H, (24, 24))
    # total bilinear weight equals the footprint area (weights per pixel sum to 1)
    assert float(g[..., 0].sum()) == pytest.approx(float(mask.sum()), rel=1e-9)
    check_gradient(f, p, n=10, rng=rng)


def test_apply_gradient_flows_into_covered_pixels(rng):
    img = torch.as_tensor(rng.uniform(size=(16, 16, 3)))
    p = torch.full((4, 4, 3), 0.5, dtype=torch.float64, requires_grad=True)
    out, m, _ = apply_patches(img, [p], [AffinePlacement((8.0, 8.0))])
    (out[m] ** 2).sum().backward()
    assert torch.all(p.grad != 0)
