"""Shared fixtures: small grids, procedural meshes and an isolated sqlite file per test."""
import numpy as np
import pytest

import db
from services import fixtures
from services.mesh_io import TriangleMesh, normalize_mesh
from services.sp_core import SphericalGrid, SpMap


@pytest.fixture(autouse=True)
def isolated_workspace(tmp_path, monkeypatch):
    """Run every test in its own directory with its own cache index."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr(db, "DB_PATH", tmp_path / "spmap.db")
    db.init_db()
    return tmp_path


@pytest.fixture
def small_grid() -> SphericalGrid:
    return SphericalGrid(16, 32)


@pytest.fixture
def sphere_mesh() -> TriangleMesh:
    return normalize_mesh(fixtures.sphere())


@pytest.fixture
def cube_mesh() -> TriangleMesh:
    return fixtures.cube(0.5)


@pytest.fixture
def shells_mesh() -> TriangleMesh:
    return normalize_mesh(fixtures.nested_shells())


def constant_map(grid: SphericalGrid, depths: list[float]) -> SpMap:
    """k = len(depths) layers, every pixel valid with a constant depth per layer."""
    sp_map = SpMap.empty(grid, len(depths))
    for j, d in enumerate(depths):
        sp_map.depth[j] = d
        sp_map.valid[j] = True
    return sp_map


def radius_of(mesh: TriangleMesh) -> float:
    return float(np.linalg.norm(mesh.vertices, axis=1).max())
