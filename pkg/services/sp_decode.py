"""
Geometry from SP maps.

Three decoders: oriented point clouds (every valid layer pixel lifted to 3D),
parity occupancy fused into a voxel grid and meshed with marching cubes
(watertight shapes), and direct triangulation of the SP grid (open surfaces).
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import measure

from services.errors import EmptyGrid, EmptyMap, TruncatedMap
from services.mesh_io import TriangleMesh, signed_volume
from services.sp_core import MAX_DEPTH, SENTINEL, SphericalGrid, SpMap, project_points, unproject_points

log = logging.getLogger(__name__)

PAD_VOXELS = 2
POLE_NORTH = -1
POLE_COL = -1


@dataclass(frozen=True, eq=False)
class OrientedPointCloud:
    points: np.ndarray
    normals: np.ndarray
    layer_of: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """N^3 booleans indexed [x, y, z]; voxel i spans origin + [i, i+1) * voxel_size."""

    origin: np.ndarray
    voxel_size: float
    occupancy: np.ndarray

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @classmethod
    def covering_unit_box(cls, n: int) -> "OccupancyGrid":
        """Empty grid over [-0.5-eps, 0.5+eps]^3 with PAD_VOXELS of margin on each side."""
        if n <= 2 * PAD_VOXELS:
            raise EmptyGrid(f"resolution {n} leaves no interior voxels")
        voxel = 1.0 / (n - 2 * PAD_VOXELS)
        half = 0.5 + PAD_VOXELS * voxel
        return cls(origin=np.full(3, -half), voxel_size=voxel, occupancy=np.zeros((n, n, n), dtype=bool))

    def axis_centers(self) -> np.ndarray:
        return self.origin[0] + (np.arange(self.resolution) + 0.5) * self.voxel_size

    def centers(self) -> np.ndarray:
        """(N,N,N,3) voxel centers."""
        c = self.axis_centers()
        return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


# --- Point clouds ---

def map_points(sp_map: SpMap) -> np.ndarray:
    """(N,3) positions of every valid (layer, pixel); empty for an empty map."""
    theta, phi = sp_map.grid.angle_grids()
    pts = unproject_points(theta[None], phi[None], sp_map.depth.astype(np.float64))
    return pts[sp_map.valid]


def _estimate_normals(sp_map: SpMap) -> np.ndarray:
    """Tangent-plane normals from central differences within each layer, wrap-aware in azimuth."""
    theta, phi = sp_map.grid.angle_grids()
    depth = np.where(sp_map.valid, sp_map.depth.astype(np.float64), np.nan)
    pts = unproject_points(theta[None], phi[None], depth)

    def derivative(axis: int, wrap: bool) -> np.ndarray:
        fwd = np.roll(pts, -1, axis=axis) - pts
        bwd = pts - np.roll(pts, 1, axis=axis)
        if not wrap:
            edge = [slice(None)] * pts.ndim
            edge[axis] = -1
            fwd[tuple(edge)] = np.nan
            edge[axis] = 0
            bwd[tuple(edge)] = np.nan
        central = (fwd + bwd) / 2.0
        out = np.where(np.isnan(central), fwd, central)
        return np.where(np.isnan(out), bwd, out)

    d_row = derivative(1, wrap=False)
    d_col = derivative(2, wrap=True)
    normals = np.cross(d_row, d_col)
    rays = unproject_points(theta, phi, np.ones(sp_map.grid.shape))[None]
    length = np.linalg.norm(normals, axis=-1, keepdims=True)
    bad = ~np.isfinite(length) | (length < 1e-12)
    normals = np.where(bad, -rays, normals / np.where(bad, 1.0, length))
    flip = np.sum(normals * rays, axis=-1, keepdims=True) > 0
    return np.where(flip, -normals, normals)


def unproject_map(sp_map: SpMap) -> OrientedPointCloud:
    """Lift every valid pixel to 3D; normals from the map channel or estimated on the grid."""
    if not sp_map.valid.any():
        raise EmptyMap("map has no valid pixels")
    points = map_points(sp_map)
    if sp_map.normals is not None:
        normals = sp_map.normals.astype(np.float64)[sp_map.valid]
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    else:
        normals = _estimate_normals(sp_map)[sp_map.valid]
    layer_of = np.broadcast_to(np.arange(sp_map.k)[:, None, None], sp_map.valid.shape)[sp_map.valid]
    return OrientedPointCloud(points=points, normals=normals, layer_of=layer_of.astype(np.int64))


def save_point_cloud(cloud: OrientedPointCloud, path) -> None:
    """Binary little-endian PLY with x,y,z,nx,ny,nz float32 properties."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = np.empty(len(cloud), dtype=[(n, "<f4") for n in ("x", "y", "z", "nx", "ny", "nz")])
    for i, name in enumerate(("x", "y", "z")):
        records[name] = cloud.points[:, i]
        records["n" + name] = cloud.normals[:, i]
    header = "\n".join([
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(cloud)}",
        *(f"property float {n}" for n in ("x", "y", "z", "nx", "ny", "nz")),
        "end_header",
    ]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(records.tobytes())


# --- Parity occupancy ---

def _parity(sp_map: SpMap, points: np.ndarray, usable: np.ndarray) -> np.ndarray:
    theta, phi, radius = project_points(points)
    r, c = sp_map.grid.angles_to_pixels(theta, phi)
    depth = sp_map.depth[:, r, c]
    valid = sp_map.valid[:, r, c]
    crossings = np.sum(valid & (depth > radius[None, :]), axis=0)
    return (crossings % 2 == 1) & usable[r, c]


TRUNCATED_RULES = ("exclude", "kept")


def occupancy_from_map(
    sp_map: SpMap, n: int = 64, allow_truncated: bool = False, truncated_rule: str = "exclude",
) -> OccupancyGrid:
    """
    A voxel is inside iff an odd number of the map's hits lie beyond it along its pixel ray.

    With allow_truncated, truncated pixels are either left empty ("exclude") or
    filled by the parity of the hits they kept ("kept").
    """
    if truncated_rule not in TRUNCATED_RULES:
        raise ValueError(f"unknown truncated rule {truncated_rule!r}; choose from {TRUNCATED_RULES}")
    if sp_map.truncation_count and not allow_truncated:
        raise TruncatedMap(f"{sp_map.truncation_count} pixel(s) dropped hits; parity is unreliable")
    usable = np.ones(sp_map.grid.shape, dtype=bool)
    if sp_map.truncated is not None and truncated_rule == "exclude":
        usable &= ~sp_map.truncated
    grid = OccupancyGrid.covering_unit_box(n)
    c = grid.axis_centers()
    yy, zz = np.meshgrid(c, c, indexing="ij")
    for i, x in enumerate(c):
        slab = np.stack([np.full(yy.size, x), yy.ravel(), zz.ravel()], axis=1)
        grid.occupancy[i] = _parity(sp_map, slab, usable).reshape(n, n)
    log.info("Parity occupancy at N=%d: %d occupied voxels", n, int(grid.occupancy.sum()))
    return grid


def occupancy_to_map(grid: OccupancyGrid, sphere: SphericalGrid, k: int, step: float | None = None) -> SpMap:
    """Re-extract layer depths by marching each pixel ray through the occupancy field."""
    step = step or grid.voxel_size / 4.0
    t = np.arange(step / 2.0, MAX_DEPTH + grid.voxel_size, step)
    dirs = sphere.ray_directions().reshape(-1, 3)
    n = grid.resolution
    depth = np.full((k, sphere.height, sphere.width), SENTINEL, dtype=np.float32)
    valid = np.zeros_like(depth, dtype=bool)
    flat_depth = depth.reshape(k, -1)
    flat_valid = valid.reshape(k, -1)
    for p, d in enumerate(dirs):
        idx = np.floor((t[:, None] * d[None, :] - grid.origin) / grid.voxel_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < n), axis=1)
        occ = np.zeros(len(t), dtype=bool)
        occ[inside] = grid.occupancy[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
        change = np.flatnonzero(occ[1:] != occ[:-1])
        crossings = (t[change] + t[change + 1]) / 2.0
        outermost = crossings[::-1][:k]
        flat_depth[: len(outermost), p] = outermost
        flat_valid[: len(outermost), p] = True
    return SpMap(sphere, depth, valid)


# --- Marching cubes ---

def marching_cubes(grid: OccupancyGrid, smooth: bool = True) -> TriangleMesh:
    """Closed mesh on the 0.5 level of the (box-filtered) occupancy field, normals outward."""
    if not grid.occupancy.any():
        raise EmptyGrid("occupancy grid is empty")
    field = np.pad(grid.occupancy.astype(np.float64), 1)
    if smooth:
        smoothed = ndimage.uniform_filter(field, size=3, mode="constant")
        if smoothed.max() > 0.5:
            field = smoothed
        else:
            log.warning("Box filter removes every feature of this grid; meshing the raw occupancy")
    verts, faces, _, _ = measure.marching_cubes(
        field, level=0.5, spacing=(grid.voxel_size,) * 3, allow_degenerate=False,
    )
    # cell centers of the padded field sit half a voxel inside each cell
    verts = verts + grid.origin - 0.5 * grid.voxel_size
    mesh = TriangleMesh.from_arrays(verts, faces)
    if signed_volume(mesh) < 0:
        mesh = mesh.flipped()
    log.info("Marching cubes: %d vertices, %d faces", len(mesh.vertices), mesh.n_faces)
    return mesh


# --- SP-grid triangulation ---

def default_discontinuity_tol(sp_map: SpMap) -> float:
    """Four inter-pixel arc lengths at the median depth."""
    d = sp_map.depth[sp_map.valid]
    return 4.0 * sp_map.grid.d_theta * float(np.median(d)) if d.size else 0.0


def _keep(d: np.ndarray, ok: np.ndarray, tol: float) -> np.ndarray:
    """Triangles (..., 3 corners) with every corner valid and every depth jump below tol."""
    jumps = np.maximum.reduce([
        np.abs(d[..., 0] - d[..., 1]), np.abs(d[..., 1] - d[..., 2]), np.abs(d[..., 0] - d[..., 2]),
    ])
    return ok.all(axis=-1) & (jumps < tol)


def grid_face_pixels(sp_map: SpMap, discontinuity_tol: float | None = None) -> np.ndarray:
    """
    Triangles of the SP grid as (F, 3, 3) (layer, row, col) corner indices.
    Pole fan apexes use row -1 (north) or H (south) and column -1.
    """
    tol = default_discontinuity_tol(sp_map) if discontinuity_tol is None else discontinuity_tol
    h, w = sp_map.grid.shape
    r, c = np.meshgrid(np.arange(h - 1), np.arange(w), indexing="ij")
    c1 = (c + 1) % w
    quads = [
        np.stack([np.stack([r, c], -1), np.stack([r + 1, c], -1), np.stack([r, c1], -1)], axis=-2),
        np.stack([np.stack([r, c1], -1), np.stack([r + 1, c], -1), np.stack([r + 1, c1], -1)], axis=-2),
    ]
    cols = np.arange(w)
    cols1 = (cols + 1) % w
    out = []
    for layer in range(sp_map.k):
        depth = sp_map.depth[layer].astype(np.float64)
        valid = sp_map.valid[layer]
        for tri in quads:
            rr, cc = tri[..., 0], tri[..., 1]
            keep = _keep(depth[rr, cc], valid[rr, cc], tol)
            sel = tri[keep]
            out.append(np.concatenate([np.full(sel.shape[:2] + (1,), layer), sel], axis=-1))
        for row, apex_row in ((0, POLE_NORTH), (h - 1, h)):
            ring = valid[row]
            if not ring.any():
                continue
            apex_depth = float(np.median(depth[row][ring]))
            d = np.stack([np.full(w, apex_depth), depth[row, cols], depth[row, cols1]], axis=-1)
            ok = np.stack([np.ones(w, dtype=bool), ring[cols], ring[cols1]], axis=-1)
            keep = _keep(d, ok, tol)
            first, second = (cols, cols1) if row == 0 else (cols1, cols)
            tri = np.stack([
                np.stack([np.full(w, layer), np.full(w, apex_row), np.full(w, POLE_COL)], -1),
                np.stack([np.full(w, layer), np.full(w, row), first], -1),
                np.stack([np.full(w, layer), np.full(w, row), second], -1),
            ], axis=1)
            out.append(tri[keep])
    if not out:
        return np.zeros((0, 3, 3), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def grid_triangulate(sp_map: SpMap, discontinuity_tol: float | None = None) -> TriangleMesh:
    """Mesh each layer by joining neighbouring valid pixels, split at depth discontinuities."""
    if not sp_map.valid.any():
        raise EmptyMap("map has no valid pixels")
    tris = grid_face_pixels(sp_map, discontinuity_tol)
    h, w = sp_map.grid.shape
    theta, phi = sp_map.grid.angle_grids()
    positions = unproject_points(theta[None], phi[None], sp_map.depth.astype(np.float64))

    # vertex ids: layer pixels first, then one north and one south apex per layer
    n_pixels = sp_map.k * h * w
    apex = np.zeros((sp_map.k, 2, 3))
    for layer in range(sp_map.k):
        for slot, row in enumerate((0, h - 1)):
            ring = sp_map.valid[layer, row]
            if ring.any():
                d = float(np.median(sp_map.depth[layer, row][ring]))
                apex[layer, slot] = (0.0, 0.0, d if row == 0 else -d)
    vertices = np.concatenate([positions.reshape(-1, 3), apex.reshape(-1, 3)])

    layer, row, col = tris[..., 0], tris[..., 1], tris[..., 2]
    pixel_id = (layer * h + np.clip(row, 0, h - 1)) * w + np.clip(col, 0, w - 1)
    apex_id = n_pixels + layer * 2 + (row == h).astype(np.int64)
    faces = np.where((row < 0) | (row == h), apex_id, pixel_id)
    # keep only referenced vertices; invalid pixels would mirror to radius 1
    used, faces = np.unique(faces.reshape(-1), return_inverse=True)
    mesh = TriangleMesh.from_arrays(vertices[used], faces.reshape(-1, 3))
    log.info("Grid triangulation: %d faces over %d layer(s)", mesh.n_faces, sp_map.k)
    return mesh
