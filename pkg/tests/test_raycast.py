import numpy as np
import pytest

from services import fixtures
from services.errors import EmptyMesh
from services.mesh_io import TriangleMesh, normalize_mesh
from services.metrics import winding_numbers
from services.raycast import (
    Ray,
    build_bvh,
    cast_rays,
    cast_rays_with_retry,
    intersect_all,
    intersect_all_with_retry,
    intersect_brute_force,
    perturb_direction,
)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _square() -> TriangleMesh:
    v = [[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.5, 0.5, 0.0], [-0.5, 0.5, 0.0]]
    return TriangleMesh.from_arrays(v, [[0, 1, 2], [0, 2, 3]])


def test_ray_requires_unit_direction():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))


def test_single_hit_on_cube(cube_mesh):
    d = _unit([1.0, 0.1, 0.23])
    hits = intersect_all(build_bvh(cube_mesh), cube_mesh, Ray(np.zeros(3), d))
    assert len(hits) == 1
    assert hits.t[0] == pytest.approx(0.5 / d[0], abs=1e-9)
    assert hits.hits[0].cos_incidence == pytest.approx(d[0], abs=1e-9)


def test_hits_are_ascending_on_nested_shells(shells_mesh):
    bvh = build_bvh(shells_mesh)
    hits = intersect_all(bvh, shells_mesh, Ray(np.zeros(3), _unit([0.3, -0.2, 0.9])))
    assert len(hits) == 2
    assert hits.t[0] < hits.t[1]


@pytest.mark.parametrize("name", ["sphere", "nested_shells", "torus", "cup_with_handle", "box_with_hole"])
def test_bvh_matches_brute_force(name):
    mesh = normalize_mesh(fixtures.FIXTURES[name]())
    bvh = build_bvh(mesh)
    rng = np.random.default_rng(7)
    origins = rng.uniform(-0.3, 0.3, size=(1000, 3))
    dirs = rng.standard_normal((1000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for o, d in zip(origins, dirs):
        ray = Ray(o, d)
        fast = intersect_all(bvh, mesh, ray)
        slow = intersect_brute_force(mesh, ray)
        assert len(fast) == len(slow)
        assert np.allclose(fast.t, slow.t, atol=1e-7)
        assert [h.face_id for h in fast.hits] == [h.face_id for h in slow.hits]


@pytest.mark.parametrize("name", ["sphere", "nested_shells", "torus", "cup_with_handle", "box_with_hole"])
def test_closed_mesh_crossings_follow_inside_outside(name):
    mesh = normalize_mesh(fixtures.FIXTURES[name]())
    rng = np.random.default_rng(3)
    points = rng.uniform(-0.6, 0.6, size=(500, 3))
    inside = winding_numbers(mesh, points) > 0.5
    assert 0 < inside.sum() < len(points)
    dirs = rng.standard_normal((500, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    batch = cast_rays_with_retry(build_bvh(mesh), points, dirs, seed=3)
    # an odd number of crossings from inside, even from outside
    assert np.array_equal(batch.counts % 2 == 1, inside)


def test_batch_matches_single_rays(shells_mesh):
    bvh = build_bvh(shells_mesh)
    rng = np.random.default_rng(1)
    dirs = rng.standard_normal((64, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    batch = cast_rays(bvh, np.zeros(3), dirs)
    for i, d in enumerate(dirs):
        single = intersect_all(bvh, shells_mesh, Ray(np.zeros(3), d))
        assert batch.counts[i] == len(single)
        assert np.allclose(batch.t[i, : batch.counts[i]], single.t)
    assert batch.overflow == 0


def test_near_parallel_hits_are_discarded():
    mesh = _square()
    bvh = build_bvh(mesh)
    ray = Ray(np.array([-0.4, 0.0, 1e-6]), _unit([1.0, 0.0, -1e-5]))
    strict = intersect_all(bvh, mesh, ray)
    assert len(strict) == 0
    assert strict.parallel_discards == 1
    relaxed = intersect_all(bvh, mesh, ray, parallel_cos_threshold=0.0)
    assert len(relaxed) == 1
    assert relaxed.t[0] == pytest.approx(0.1, rel=1e-3)


def test_retry_marks_the_ray():
    mesh = _square()
    bvh = build_bvh(mesh)
    ray = Ray(np.array([-0.4, 0.0, 1e-6]), _unit([1.0, 0.0, -1e-5]))
    retried = intersect_all_with_retry(bvh, mesh, ray, seed=0, index=5)
    assert retried.retried
    clean = intersect_all_with_retry(bvh, mesh, Ray(np.array([0.0, 0.0, 1.0]), _unit([0.1, 0.2, -1.0])))
    assert not clean.retried
    assert len(clean) == 1


def test_batch_retry_only_touches_flagged_rays():
    mesh = _square()
    bvh = build_bvh(mesh)
    origins = np.array([[-0.4, 0.0, 1e-6], [0.0, 0.0, 1.0]])
    dirs = np.stack([_unit([1.0, 0.0, -1e-5]), _unit([0.1, 0.2, -1.0])])
    batch = cast_rays_with_retry(bvh, origins, dirs, seed=2)
    assert batch.retried.tolist() == [True, False]
    assert batch.counts[1] == 1


def test_perturb_direction_is_deterministic():
    d = _unit([0.0, 0.0, 1.0])
    a = perturb_direction(d, 1e-5, seed=0, index=3)
    b = perturb_direction(d, 1e-5, seed=0, index=3)
    c = perturb_direction(d, 1e-5, seed=0, index=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert 0 < np.linalg.norm(a - d) < 2e-5


def test_build_bvh_rejects_empty_mesh():
    with pytest.raises(EmptyMesh):
        build_bvh(TriangleMesh.from_arrays(np.zeros((0, 3)), np.zeros((0, 3))))
