import math

import numpy as np
import pytest

from conftest import constant_map, radius_of
from services import fixtures
from services.errors import EmptyGrid, EmptyMap, TruncatedMap
from services.mesh_io import (
    component_count,
    euler_characteristic,
    is_closed_manifold,
    normalize_mesh,
    signed_volume,
)
from services.metrics import winding_numbers
from services.sp_core import SphericalGrid, SpMap, unproject_points
from services.sp_decode import (
    OccupancyGrid,
    grid_face_pixels,
    grid_triangulate,
    map_points,
    marching_cubes,
    occupancy_from_map,
    occupancy_to_map,
    save_point_cloud,
    unproject_map,
)
from services.sp_encode import EncodeConfig, encode


@pytest.fixture
def sphere_map(sphere_mesh):
    return encode(sphere_mesh, EncodeConfig(grid=SphericalGrid(32, 64), k=2))


def test_map_points_lie_at_layer_depth(sphere_map):
    pts = map_points(sphere_map)
    assert pts.shape == (32 * 64, 3)
    assert np.allclose(np.linalg.norm(pts, axis=1), sphere_map.depth[0].ravel(), atol=1e-6)


def test_unproject_map_estimates_inward_normals(sphere_map):
    cloud = unproject_map(sphere_map)
    assert len(cloud) == 32 * 64
    assert np.allclose(np.linalg.norm(cloud.normals, axis=1), 1.0)
    outward = cloud.points / np.linalg.norm(cloud.points, axis=1, keepdims=True)
    assert np.mean(np.sum(cloud.normals * -outward, axis=1)) > 0.95
    assert np.all(cloud.layer_of == 0)


def test_unproject_empty_map(small_grid):
    with pytest.raises(EmptyMap):
        unproject_map(SpMap.empty(small_grid, 2))
    with pytest.raises(EmptyMap):
        grid_triangulate(SpMap.empty(small_grid, 2))


def test_point_cloud_ply_layout(sphere_map, tmp_path):
    cloud = unproject_map(sphere_map)
    path = tmp_path / "cloud.ply"
    save_point_cloud(cloud, path)
    data = path.read_bytes()
    assert data.startswith(b"ply\nformat binary_little_endian 1.0\n")
    header_end = data.index(b"end_header\n") + len(b"end_header\n")
    assert len(data) - header_end == 24 * len(cloud)
    first = np.frombuffer(data, dtype="<f4", count=6, offset=header_end)
    assert np.allclose(first[:3], cloud.points[0], atol=1e-6)


def test_occupancy_grid_covers_unit_box():
    grid = OccupancyGrid.covering_unit_box(20)
    assert grid.voxel_size == pytest.approx(1.0 / 16)
    assert grid.axis_centers()[2] == pytest.approx(-0.5 + 0.5 / 16)
    with pytest.raises(EmptyGrid):
        OccupancyGrid.covering_unit_box(4)


def test_parity_occupancy_of_sphere(sphere_mesh, sphere_map):
    grid = occupancy_from_map(sphere_map, n=32)
    r = radius_of(sphere_mesh)
    expected = 4.0 / 3.0 * math.pi * r ** 3 / grid.voxel_size ** 3
    assert grid.occupancy.sum() == pytest.approx(expected, rel=0.1)
    assert not grid.occupancy[0].any()


def test_parity_occupancy_of_hollow_ball(shells_mesh):
    sp_map = encode(shells_mesh, EncodeConfig(grid=SphericalGrid(32, 64), k=2))
    grid = occupancy_from_map(sp_map, n=32)
    mid = grid.resolution // 2
    # the cavity around the origin is empty, the shell between the radii is filled
    assert not grid.occupancy[mid, mid, mid]
    centers = grid.centers()
    radius = np.linalg.norm(centers, axis=-1)
    assert grid.occupancy[(radius > 0.3) & (radius < 0.45)].all()


def test_truncated_map_needs_opt_in(shells_mesh):
    sp_map = encode(shells_mesh, EncodeConfig(grid=SphericalGrid(16, 32), k=1))
    with pytest.raises(TruncatedMap):
        occupancy_from_map(sp_map, n=16)
    grid = occupancy_from_map(sp_map, n=16, allow_truncated=True)
    assert not grid.occupancy.any()


def test_marching_cubes_closes_the_sphere(sphere_mesh, sphere_map):
    mesh = marching_cubes(occupancy_from_map(sphere_map, n=32))
    assert is_closed_manifold(mesh)
    assert euler_characteristic(mesh) == 2
    r = radius_of(sphere_mesh)
    assert signed_volume(mesh) == pytest.approx(4.0 / 3.0 * math.pi * r ** 3, rel=0.15)


def test_marching_cubes_keeps_torus_genus():
    mesh = normalize_mesh(fixtures.torus())
    sp_map = encode(mesh, EncodeConfig(grid=SphericalGrid(64, 128), k=2))
    recon = marching_cubes(occupancy_from_map(sp_map, n=64))
    assert euler_characteristic(recon) == 0


def test_marching_cubes_rejects_empty_grid():
    with pytest.raises(EmptyGrid):
        marching_cubes(OccupancyGrid.covering_unit_box(8))


def test_occupancy_to_map_recovers_depth(sphere_mesh, sphere_map):
    grid = occupancy_from_map(sphere_map, n=32)
    again = occupancy_to_map(grid, SphericalGrid(8, 16), k=2)
    assert again.valid[0].all()
    assert not again.valid[1].any()
    assert np.abs(again.depth[0] - radius_of(sphere_mesh)).max() < 2 * grid.voxel_size


def test_grid_triangulation_of_a_full_layer_is_closed(sphere_map):
    mesh = grid_triangulate(SpMap(sphere_map.grid, sphere_map.depth[:1], sphere_map.valid[:1]))
    assert is_closed_manifold(mesh)
    assert euler_characteristic(mesh) == 2
    assert mesh.n_faces == 2 * 32 * 64


def test_grid_triangulation_splits_at_discontinuities(small_grid):
    sp_map = constant_map(small_grid, [0.4])
    sp_map.depth[0, :, 16:] = 0.2
    mesh = grid_triangulate(sp_map, discontinuity_tol=0.05)
    assert component_count(mesh) == 2
    faces = grid_face_pixels(sp_map, discontinuity_tol=0.05)
    cols = faces[..., 2]
    in_pixels = (faces[..., 1] >= 0) & (faces[..., 1] < small_grid.height)
    for tri_cols, inside in zip(cols, in_pixels):
        halves = {int(c) >= 16 for c, ok in zip(tri_cols, inside) if ok}
        assert len(halves) == 1


def test_grid_triangulation_of_open_dome():
    mesh = normalize_mesh(fixtures.hemisphere(closed=False))
    sp_map = encode(mesh, EncodeConfig(grid=SphericalGrid(32, 64), k=1))
    recon = grid_triangulate(sp_map)
    assert recon.n_faces > 0
    assert not is_closed_manifold(recon)


def test_kept_hits_fill_truncated_pixels(shells_mesh):
    sp_map = encode(shells_mesh, EncodeConfig(grid=SphericalGrid(32, 64), k=1))
    grid = occupancy_from_map(sp_map, n=32, allow_truncated=True, truncated_rule="kept")
    mid = grid.resolution // 2
    # only the outer shell survives k=1, so the cavity fills in
    assert grid.occupancy[mid, mid, mid]
    r = radius_of(shells_mesh)
    expected = 4.0 / 3.0 * math.pi * r ** 3 / grid.voxel_size ** 3
    assert grid.occupancy.sum() == pytest.approx(expected, rel=0.1)
    assert is_closed_manifold(marching_cubes(grid))
    with pytest.raises(ValueError):
        occupancy_from_map(sp_map, n=32, allow_truncated=True, truncated_rule="nearest")


def _parity_agreement(mesh, sp_map, n):
    grid = occupancy_from_map(sp_map, n=n)
    inside = winding_numbers(mesh, grid.centers().reshape(-1, 3)) > 0.5
    return float(np.mean(inside == grid.occupancy.ravel()))


@pytest.mark.parametrize("name", ["sphere", "nested_shells", "torus", "cube", "cylinder", "capsule", "ellipsoid"])
def test_parity_occupancy_agrees_with_winding_numbers(name):
    mesh, _ = fixtures.desk_corpus()[name]
    sp_map = encode(mesh, EncodeConfig(grid=SphericalGrid(128, 256), k=4))
    assert sp_map.truncation_count == 0
    assert _parity_agreement(mesh, sp_map, 32) >= 0.995


@pytest.mark.slow
def test_parity_occupancy_agrees_on_the_whole_corpus():
    for name, (mesh, watertight) in fixtures.desk_corpus().items():
        sp_map = encode(mesh, EncodeConfig(grid=SphericalGrid(256, 512), k=4))
        if not watertight or sp_map.truncation_count:
            continue
        assert _parity_agreement(mesh, sp_map, 64) >= 0.995, name


def test_single_voxel_meshes_to_a_sphere_like_blob():
    grid = OccupancyGrid.covering_unit_box(8)
    grid.occupancy[4, 4, 4] = True
    mesh = marching_cubes(grid)
    assert is_closed_manifold(mesh)
    assert euler_characteristic(mesh) == 2


def test_annulus_occupancy_meshes_to_two_surfaces(shells_mesh):
    sp_map = encode(shells_mesh, EncodeConfig(grid=SphericalGrid(32, 64), k=2))
    mesh = marching_cubes(occupancy_from_map(sp_map, n=32))
    assert is_closed_manifold(mesh)
    assert component_count(mesh) == 2


def _rolled(sp_map, shift):
    return SpMap(sp_map.grid, np.roll(sp_map.depth, shift, axis=2), np.roll(sp_map.valid, shift, axis=2))


def _triangle_set(faces):
    return {tuple(map(tuple, tri)) for tri in faces.tolist()}


def test_grid_triangulation_commutes_with_column_roll():
    mesh = normalize_mesh(fixtures.torus())
    sp_map = encode(mesh, EncodeConfig(grid=SphericalGrid(32, 64), k=2))
    h, w = sp_map.grid.shape
    for shift in (1, 5, 63):
        faces = grid_face_pixels(sp_map).copy()
        in_grid = (faces[..., 1] >= 0) & (faces[..., 1] < h)
        faces[..., 2] = np.where(in_grid, (faces[..., 2] + shift) % w, faces[..., 2])
        assert _triangle_set(grid_face_pixels(_rolled(sp_map, shift))) == _triangle_set(faces)
        assert grid_triangulate(_rolled(sp_map, shift)).n_faces == grid_triangulate(sp_map).n_faces


def test_sphere_has_no_seam_crack(sphere_map):
    h, w = sphere_map.grid.shape
    faces = grid_face_pixels(sphere_map)
    cols = faces[..., 2]
    crossing = np.any(cols == 0, axis=1) & np.any(cols == w - 1, axis=1)
    assert crossing.sum() == 2 * (h - 1) + 2
    theta, phi = sphere_map.grid.angle_grids()
    p = unproject_points(theta, phi, sphere_map.depth[0].astype(np.float64))
    seam = np.linalg.norm(p[:, 0] - p[:, -1], axis=-1)
    inner = np.linalg.norm(p[:, 1:] - p[:, :-1], axis=-1)
    assert np.all(seam <= 1.1 * np.median(inner, axis=1))


def test_zero_discontinuity_tolerance_splits_every_quad(sphere_map):
    assert len(grid_face_pixels(sphere_map, discontinuity_tol=0.0)) == 0
    assert grid_triangulate(sphere_map, discontinuity_tol=0.0).n_faces == 0


def test_grid_triangulation_keeps_only_used_vertices():
    # layers 1 and 2 of a one-shell map are all sentinel
    sp_map = encode(fixtures.sphere(0.4), EncodeConfig(grid=SphericalGrid(16, 32), k=3))
    mesh = grid_triangulate(sp_map)
    assert len(mesh.vertices) == 16 * 32 + 2
    assert np.array_equal(np.unique(mesh.faces), np.arange(len(mesh.vertices)))
    assert np.linalg.norm(mesh.vertices, axis=1).max() < 0.41
