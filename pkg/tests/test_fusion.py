import math

import numpy as np
import pytest
from scipy import ndimage

from darkflash.fusion import (FusionError, bilateral_smooth_depth, build_fusion_system,
                              conjugate_gradient, depth_rmse, fuse, solve_fusion, write_ply)
from darkflash.imaging import Camera, NormalMap, ray_directions
from darkflash.synth import make_bumpfield_scene, normals_from_depth
from oracles import bilateral_loop, dense_fusion


def tilted_plane(size=12, degrees=20.0):
    cam = Camera.default(size)
    n = np.array([math.sin(math.radians(degrees)), 0.0, math.cos(math.radians(degrees))])
    depth = -1.2 * n[2] / (ray_directions(cam, (size, size)) @ n)
    normals = NormalMap(np.broadcast_to(n, (size, size, 3)).copy(), np.ones((size, size), bool))
    return cam, depth, normals


@pytest.fixture(scope="module")
def bump():
    scene = make_bumpfield_scene(16, seed=4)
    rng = np.random.default_rng(0)
    stereo = scene.depth + rng.normal(scale=2e-3, size=scene.shape) * scene.mask
    return scene, stereo


def test_zero_normal_weight_is_identity(bump):
    scene, stereo = bump
    system = build_fusion_system(stereo, scene.normals, scene.camera, w_z=2.0, w_n=0.0)
    assert np.array_equal(system.matrix.toarray(), 2.0 * np.eye(system.index.size))
    assert np.array_equal(solve_fusion(system), stereo)


def test_plane_is_exact_solution():
    cam, depth, normals = tilted_plane()
    system = build_fusion_system(depth, normals, cam)
    assert system.energy(depth) < 1e-24
    np.testing.assert_allclose(solve_fusion(system), depth, rtol=0, atol=1e-12)


def test_small_system_equals_dense_assembly():
    rng = np.random.default_rng(1)
    cam = Camera.default(3)
    depth = 1.1 + 0.01 * rng.random((3, 3))
    n = rng.normal(size=(3, 3, 3)) * 0.3 + (0, 0, 1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    valid = np.ones((3, 3), bool)
    valid[2, 0] = False
    normals = NormalMap(n, valid)
    system = build_fusion_system(depth, normals, cam, w_z=0.7, w_n=3.0)
    ata, atb, ids = dense_fusion(depth, n, valid, cam, 0.7, 3.0)
    np.testing.assert_array_equal(ids[valid], np.arange(valid.sum()))
    np.testing.assert_allclose(system.matrix.toarray(), ata, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(system.rhs, atb, rtol=1e-12)


def test_fused_depth_matches_dense_solve(bump):
    scene, stereo = bump
    cam = Camera.default(8)
    sub = stereo[4:12, 4:12]
    normals = normals_from_depth(scene.depth, scene.camera)
    sub_n = NormalMap(normals.normals[4:12, 4:12], np.ones((8, 8), bool))
    fused = fuse(sub, sub_n, cam, 1.0, 10.0)
    ata, atb, ids = dense_fusion(sub, sub_n.normals, sub_n.valid, cam, 1.0, 10.0)
    direct = np.linalg.solve(ata, atb)
    np.testing.assert_allclose(fused[ids >= 0], direct[ids[ids >= 0]], rtol=0, atol=1e-6)


def test_energy_decreases_and_residual_meets_tolerance(bump):
    scene, stereo = bump
    system = build_fusion_system(stereo, scene.normals, scene.camera)
    z, res, _ = conjugate_gradient(system.matrix, system.rhs, system.start, 1e-10)
    assert res <= 1e-10
    assert np.linalg.norm(system.matrix @ z - system.rhs) / np.linalg.norm(system.rhs) <= 1e-10
    assert system.energy(z) <= system.energy(system.start)


def test_small_normal_weight_converges_to_stereo(bump):
    scene, stereo = bump
    gaps = [depth_rmse(fuse(stereo, scene.normals, scene.camera, 1.0, w_n), stereo)
            for w_n in (10.0, 1.0, 0.1, 0.01, 0.001)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    # the gap shrinks in proportion to w_n / w_z once the normals no longer dominate
    assert gaps[-1] < 0.15 * gaps[-2] and gaps[-1] < 1e-5


def test_iteration_cap_raises_with_residual(bump):
    scene, stereo = bump
    with pytest.raises(FusionError) as err:
        fuse(stereo, scene.normals, scene.camera, 1.0, 100.0, tolerance=1e-14, max_iters=2)
    assert err.value.residual > 1e-14


def test_build_validation(bump):
    scene, stereo = bump
    with pytest.raises(ValueError):
        build_fusion_system(stereo, scene.normals, scene.camera, 0.0, 0.0)
    with pytest.raises(ValueError):
        build_fusion_system(np.zeros_like(stereo), scene.normals, scene.camera)
    with pytest.raises(ValueError):
        build_fusion_system(stereo[:-1], scene.normals, scene.camera)


def test_bilateral_examples(rng):
    guide = rng.random((12, 14, 3))
    flat = np.full((12, 14), 1.3)
    np.testing.assert_allclose(bilateral_smooth_depth(flat, guide, 2.0, 0.05), flat)
    depth = 1.0 + 0.01 * rng.random((12, 14))
    depth[3, 4] = 0.0
    out = bilateral_smooth_depth(depth, guide, 1.5, 0.3)
    np.testing.assert_allclose(out, bilateral_loop(depth, guide, 1.5, 0.3), rtol=1e-12)
    assert out[3, 4] == 0.0
    with pytest.raises(ValueError):
        bilateral_smooth_depth(depth, guide, 0.0, 0.1)


def test_bilateral_infinite_range_is_gaussian(rng):
    depth = 1.0 + 0.05 * rng.random((30, 30))
    out = bilateral_smooth_depth(depth, rng.random((30, 30)), 1.5, math.inf)
    ref = ndimage.gaussian_filter(depth, 1.5, truncate=3.0)
    core = (slice(6, -6), slice(6, -6))
    np.testing.assert_allclose(out[core], ref[core], rtol=1e-12)


def test_bilateral_keeps_guide_edges():
    depth = np.where(np.arange(24) < 12, 1.0, 1.05) * np.ones((8, 1))
    guide = np.where(np.arange(24) < 12, 0.1, 0.9) * np.ones((8, 1))
    out = bilateral_smooth_depth(depth, guide, 2.0, 0.05)
    assert out[4, 12] - out[4, 11] >= 0.9 * 0.05
    blurred = bilateral_smooth_depth(depth, guide, 2.0, math.inf)
    assert blurred[4, 12] - blurred[4, 11] < 0.5 * 0.05


def test_depth_rmse_examples():
    ref = np.full((4, 4), 1.2)
    assert depth_rmse(ref, ref) == 0
    assert depth_rmse(ref + 1e-3, ref) == pytest.approx(1e-3)
    mixed = ref.copy()
    mixed[0, :2] += (0.003, -0.004)
    assert depth_rmse(mixed, ref, np.eye(4, dtype=bool) | (np.arange(16).reshape(4, 4) == 1)) \
        == pytest.approx(math.sqrt((0.003**2 + 0.004**2) / 5))
    with pytest.raises(ValueError):
        depth_rmse(ref, ref, np.zeros((4, 4), bool))


def test_ply_export(tmp_path):
    cam, depth, _ = tilted_plane(5)
    depth[0, 0] = 0.0
    faces = write_ply(tmp_path / "m.ply", depth, cam)
    assert faces == 2 * (16 - 1)
    lines = (tmp_path / "m.ply").read_text().splitlines()
    assert lines[0] == "ply" and "element vertex 24" in lines and "element face 30" in lines
    body = lines[lines.index("end_header") + 1:]
    assert len(body) == 24 + 30
    assert all(row.startswith("3 ") for row in body[24:])
