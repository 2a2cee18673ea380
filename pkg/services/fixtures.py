"""
Procedural desk corpus. Every fixture is generated, not loaded, so runs are
license-free and exactly reproducible.
"""
import logging
import math

import numpy as np
import trimesh.creation

from services.mesh_io import TriangleMesh, concatenate, normalize_mesh, signed_volume

log = logging.getLogger(__name__)


def _from_trimesh(tm) -> TriangleMesh:
    return TriangleMesh.from_arrays(np.asarray(tm.vertices), np.asarray(tm.faces))


def _outward(mesh: TriangleMesh) -> TriangleMesh:
    return mesh.flipped() if signed_volume(mesh) < 0 else mesh


def _periodic_grid_faces(n_u: int, n_v: int, wrap_u: bool) -> np.ndarray:
    """Two triangles per cell of an n_u x n_v vertex grid; v always wraps."""
    rows = n_u if wrap_u else n_u - 1
    i, j = np.meshgrid(np.arange(rows), np.arange(n_v), indexing="ij")
    i1 = (i + 1) % n_u
    j1 = (j + 1) % n_v
    a, b, c, d = i * n_v + j, i1 * n_v + j, i1 * n_v + j1, i * n_v + j1
    return np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])


def sphere(radius: float = 0.4, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Icosphere; subdivisions=3 gives 1280 faces."""
    tm = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    return _from_trimesh(tm.apply_translation(center))


def nested_shells(outer: float = 0.4, inner: float = 0.2) -> TriangleMesh:
    """Hollow ball: outer shell outward, inner shell facing the cavity."""
    return concatenate([sphere(outer), sphere(inner).flipped()])


def torus(major: float = 0.3, minor: float = 0.1, center=(0.0, 0.0, 0.0), axis: str = "z",
          n_major: int = 64, n_minor: int = 24) -> TriangleMesh:
    """Parametric torus whose ring lies in the plane normal to axis."""
    u = np.linspace(0.0, 2 * math.pi, n_major, endpoint=False)
    v = np.linspace(0.0, 2 * math.pi, n_minor, endpoint=False)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major + minor * np.cos(vv)
    pts = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(vv)], -1).reshape(-1, 3)
    # rotate so the ring's normal is the requested axis
    order = {"z": [0, 1, 2], "x": [2, 0, 1], "y": [1, 2, 0]}[axis]
    pts = pts[:, order] + np.asarray(center)
    return _outward(TriangleMesh.from_arrays(pts, _periodic_grid_faces(n_major, n_minor, wrap_u=True)))


def offset_torus() -> TriangleMesh:
    """Torus beside the origin; rays along +x cross the tube twice (four hits)."""
    return torus(major=0.2, minor=0.06, center=(0.3, 0.0, 0.0))


def _revolve(profile: list[tuple[float, float]], sections: int = 64) -> TriangleMesh:
    """Revolve a closed (r, z) polyline about z; points with r == 0 become single apex vertices."""
    theta = np.linspace(0.0, 2 * math.pi, sections, endpoint=False)
    vertices: list[np.ndarray] = []
    ids: list[np.ndarray] = []
    for r, z in profile:
        start = sum(len(x) for x in vertices)
        if r == 0.0:
            vertices.append(np.array([[0.0, 0.0, z]]))
            ids.append(np.full(sections, start))
        else:
            vertices.append(np.stack([r * np.cos(theta), r * np.sin(theta), np.full(sections, z)], -1))
            ids.append(start + np.arange(sections))
    faces = []
    for a, b in zip(ids, ids[1:] + ids[:1]):
        a1, b1 = np.roll(a, -1), np.roll(b, -1)
        faces.append(np.stack([a, b, b1], -1))
        faces.append(np.stack([a, b1, a1], -1))
    faces = np.concatenate(faces)
    # apex fans collapse half their triangles
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return _outward(TriangleMesh.from_arrays(np.concatenate(vertices), faces[keep]))


def cup_with_handle(radius: float = 0.3, height: float = 0.6, wall: float = 0.03) -> TriangleMesh:
    """Open-topped thick cup plus a ring handle beside the wall (two disjoint closed parts)."""
    zb, zt = -height / 2, height / 2
    cup = _revolve([
        (0.0, zb), (radius, zb), (radius, zt), (radius - wall, zt),
        (radius - wall, zb + wall), (0.0, zb + wall),
    ])
    tube = 0.03
    handle = torus(major=0.12, minor=tube, center=(radius + 0.02 + tube, 0.0, 0.0), axis="x")
    return concatenate([cup, handle])


def box_with_hole(outer: float = 0.4, inner: float = 0.2, half_height: float = 0.15) -> TriangleMesh:
    """Square frame with a square through-hole along z (genus 1, 16 vertices)."""
    square = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    ring = []
    for half in (outer, inner):
        for z in (-half_height, half_height):
            ring.extend((x * half, y * half, z) for x, y in square)
    v = np.asarray(ring, dtype=np.float64)
    ob, ot, ib, it = 0, 4, 8, 12
    faces = []
    for i in range(4):
        j = (i + 1) % 4
        faces += [
            (ob + i, ob + j, ot + j), (ob + i, ot + j, ot + i),      # outer wall
            (ib + j, ib + i, it + i), (ib + j, it + i, it + j),      # inner wall
            (ot + i, ot + j, it + j), (ot + i, it + j, it + i),      # top
            (ob + j, ob + i, ib + i), (ob + j, ib + i, ib + j),      # bottom
        ]
    return _outward(TriangleMesh.from_arrays(v, faces))


def cube(half: float = 0.5) -> TriangleMesh:
    return _from_trimesh(trimesh.creation.box(extents=(2 * half,) * 3))


def cylinder(radius: float = 0.3, height: float = 0.8) -> TriangleMesh:
    return _from_trimesh(trimesh.creation.cylinder(radius=radius, height=height, sections=64))


def capsule(radius: float = 0.2, height: float = 0.5) -> TriangleMesh:
    return _from_trimesh(trimesh.creation.capsule(height=height, radius=radius, count=[32, 32]))


def ellipsoid(axes=(0.45, 0.3, 0.2)) -> TriangleMesh:
    unit = sphere(1.0, subdivisions=4)
    return TriangleMesh.from_arrays(unit.vertices * np.asarray(axes), unit.faces)


def two_spheres(radius: float = 0.2, offset: float = 0.25) -> TriangleMesh:
    return concatenate([sphere(radius, center=(-offset, 0.0, 0.0)), sphere(radius, center=(offset, 0.0, 0.0))])


def hemisphere(radius: float = 0.4, closed: bool = True, n_rings: int = 16, sections: int = 64) -> TriangleMesh:
    """Upper half ball. closed=True adds the flat disk at z=0 (which contains the origin)."""
    profile = [(0.0, radius)]
    for i in range(1, n_rings + 1):
        phi = 0.5 * math.pi * i / n_rings
        profile.append((radius * math.sin(phi), radius * math.cos(phi)))
    profile.append((0.0, 0.0))
    solid = _revolve(profile, sections)
    if closed:
        return solid
    tri = solid.triangles()
    on_disk = np.all(np.abs(tri[:, :, 2]) < 1e-12, axis=1)
    return TriangleMesh.from_arrays(solid.vertices, solid.faces[~on_disk])


def desk_corpus() -> dict[str, tuple[TriangleMesh, bool]]:
    """id -> (normalized mesh, watertight flag)."""
    corpus = {
        "sphere": (sphere(), True),
        "nested_shells": (nested_shells(), True),
        "torus": (torus(), True),
        "cup_with_handle": (cup_with_handle(), True),
        "box_with_hole": (box_with_hole(), True),
        "cube": (cube(), True),
        "cylinder": (cylinder(), True),
        "capsule": (capsule(), True),
        "ellipsoid": (ellipsoid(), True),
        "two_spheres": (two_spheres(), True),
        "hemisphere_dome": (hemisphere(closed=False), False),
    }
    return {name: (normalize_mesh(mesh), watertight) for name, (mesh, watertight) in corpus.items()}


FIXTURES = {
    "sphere": sphere,
    "nested_shells": nested_shells,
    "torus": torus,
    "offset_torus": offset_torus,
    "cup_with_handle": cup_with_handle,
    "box_with_hole": box_with_hole,
    "cube": cube,
    "cylinder": cylinder,
    "capsule": capsule,
    "ellipsoid": ellipsoid,
    "two_spheres": two_spheres,
    "hemisphere": hemisphere,
    "hemisphere_dome": lambda: hemisphere(closed=False),
}
