import numpy as np
import pytest

from services import fixtures
from services.mesh_io import (
    boundary_loop_count,
    component_count,
    euler_characteristic,
    is_closed_manifold,
    signed_volume,
)

CORPUS = fixtures.desk_corpus()


def test_desk_corpus_entries():
    assert len(CORPUS) == 11
    assert set(CORPUS) <= set(fixtures.FIXTURES)
    assert [name for name, (_, tight) in CORPUS.items() if not tight] == ["hemisphere_dome"]


@pytest.mark.parametrize("name", sorted(CORPUS))
def test_corpus_meshes_are_normalized(name):
    mesh, _ = CORPUS[name]
    box = mesh.aabb()
    assert box.extent.max() == pytest.approx(1.0)
    assert np.allclose(box.center, 0.0, atol=1e-9)


@pytest.mark.parametrize("name", sorted(n for n, (_, tight) in CORPUS.items() if tight))
def test_watertight_entries_are_closed_solids(name):
    mesh, _ = CORPUS[name]
    assert is_closed_manifold(mesh)
    assert signed_volume(mesh) > 0


def test_genus_one_fixtures():
    assert euler_characteristic(fixtures.torus()) == 0
    frame = fixtures.box_with_hole()
    assert euler_characteristic(frame) == 0
    assert len(frame.vertices) == 16
    assert frame.n_faces == 32


def test_multi_part_fixtures():
    assert component_count(fixtures.cup_with_handle()) == 2
    assert component_count(fixtures.two_spheres()) == 2
    assert component_count(fixtures.nested_shells()) == 2
    assert component_count(fixtures.sphere()) == 1


def test_open_dome():
    dome, tight = CORPUS["hemisphere_dome"]
    assert not tight
    assert not is_closed_manifold(dome)
    assert boundary_loop_count(dome) == 1
    assert is_closed_manifold(fixtures.hemisphere(closed=True))


def test_offset_torus_sits_beside_the_origin():
    box = fixtures.offset_torus().aabb()
    assert box.min[0] == pytest.approx(0.04)
    assert box.max[0] == pytest.approx(0.56)
