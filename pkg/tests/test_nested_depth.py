import math

import numpy as np
import pytest

from services import fixtures
from services.errors import BadMagic, HeaderMismatch, StackMismatch
from services.mesh_io import is_closed_manifold, signed_volume
from services.nested_depth import (
    AXIS_TAGS,
    encode_nested,
    fuse_nested,
    nested_storage_bytes,
    pixel_centers,
    read_spn,
    reconstruct_nested,
    spn_bytes,
    spn_from_bytes,
    write_spn,
)


@pytest.fixture
def cube_stacks(cube_mesh):
    return encode_nested(cube_mesh, n=16, k=2)


def test_one_stack_per_axis(cube_stacks):
    assert [s.axis for s in cube_stacks] == list(AXIS_TAGS)
    for s in cube_stacks:
        assert s.depth.shape == (2, 16, 16)
        assert s.valid.all()


def test_cube_depths_are_signed_coordinates(cube_stacks):
    plus_z = cube_stacks[AXIS_TAGS.index("+z")]
    assert np.allclose(plus_z.depth[0], -0.5, atol=1e-6)
    assert np.allclose(plus_z.depth[1], 0.5, atol=1e-6)
    minus_x = cube_stacks[AXIS_TAGS.index("-x")]
    assert np.allclose(minus_x.depth[0], -0.5, atol=1e-6)


def test_sphere_entry_depth_follows_the_surface():
    stacks = encode_nested(fixtures.sphere(0.4), n=32, k=2)
    plus_z = stacks[AXIS_TAGS.index("+z")]
    c = pixel_centers(32)
    rho2 = c[:, None] ** 2 + c[None, :] ** 2
    inner = rho2 < 0.3 ** 2
    assert plus_z.valid[0][inner].all()
    entry2 = plus_z.depth[0].astype(np.float64) ** 2
    assert np.all(entry2[inner] + rho2[inner] <= 0.16 + 1e-6)
    assert np.all(entry2[inner] + rho2[inner] >= 0.15)
    assert np.all(plus_z.depth[0][inner] < 0)
    assert not plus_z.valid[0][rho2 > 0.45 ** 2].any()


@pytest.mark.parametrize("rule", ["intersection", "majority", "union"])
def test_cube_fuses_to_exact_voxels(cube_stacks, rule):
    grid = fuse_nested(cube_stacks, n_vox=20, rule=rule)
    assert grid.occupancy.sum() == 16 ** 3


def test_fusion_rejects_bad_input(cube_stacks):
    with pytest.raises(StackMismatch):
        fuse_nested(cube_stacks[:5], n_vox=20)
    with pytest.raises(ValueError):
        fuse_nested(cube_stacks, n_vox=20, rule="vote")


def test_sphere_reconstruction_volume(sphere_mesh):
    stacks = encode_nested(sphere_mesh, n=32, k=2)
    mesh = reconstruct_nested(stacks, n_vox=36)
    assert is_closed_manifold(mesh)
    assert signed_volume(mesh) == pytest.approx(4.0 / 3.0 * math.pi * 0.5 ** 3, rel=0.15)


def test_spn_reload(cube_stacks, tmp_path):
    path = tmp_path / "cube.spn"
    write_spn(cube_stacks, path)
    again = read_spn(path)
    assert [s.axis for s in again] == [s.axis for s in cube_stacks]
    for a, b in zip(again, cube_stacks):
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.valid, b.valid)


def test_spn_rejects_bad_files(cube_stacks):
    blob = spn_bytes(cube_stacks)
    with pytest.raises(BadMagic):
        spn_from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(HeaderMismatch):
        spn_from_bytes(blob[:-3])
    with pytest.raises(HeaderMismatch):
        spn_from_bytes(blob[:8])
    with pytest.raises(FileNotFoundError):
        read_spn("missing.spn")


def test_nested_storage_bytes(cube_stacks):
    k, n = 2, 16
    cells = k * n * n
    assert nested_storage_bytes(cube_stacks) == 16 + 6 * (1 + 4 * cells + (cells + 7) // 8)
    assert nested_storage_bytes(cube_stacks, "deflated") < nested_storage_bytes(cube_stacks)
    with pytest.raises(ValueError):
        nested_storage_bytes(cube_stacks, "lzma")
