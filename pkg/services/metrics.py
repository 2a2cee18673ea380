"""
Reconstruction metrics: Chamfer distance, F-Score, volume IoU with a
winding-number voxelizer, brute-force rotation alignment, regional SP-map
errors and storage accounting.

Chamfer here is the symmetric mean of nearest-neighbour L2 distances, halved.
Numbers are comparable only between runs of this tool.
"""
import itertools
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

import config
from services.errors import EmptySet, GridMismatch, NonWatertight
from services.mesh_io import TriangleMesh, normalize_to, sample_surface
from services.raycast import MAX_HITS, build_bvh, cast_rays
from services.sp_core import SpMap, spm_bytes

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "mesh_id", "resolution", "k", "chamfer", "vol_iou", "f_score",
    "storage_raw", "storage_deflated", "seam_abs_rel", "polar_abs_rel",
    "equator_abs_rel", "truncation_count",
)
REGIONS = ("seam", "polar", "equator", "all")
SEAM_COLUMNS = 2
POLAR_FRACTION = 0.15
EQUATOR_FRACTION = 0.30
WATERTIGHT_TOLERANCE = 0.01
DEFLATE_LEVEL = 6


@dataclass
class EvalReport:
    mesh_id: str = ""
    resolution: str = ""
    k: int = 0
    chamfer: float = math.nan
    vol_iou: float | None = None
    f_score: float = math.nan
    storage_raw: int = 0
    storage_deflated: int = 0
    seam_abs_rel: float = math.nan
    polar_abs_rel: float = math.nan
    equator_abs_rel: float = math.nan
    truncation_count: int = 0
    rotation_chosen: int = 0
    extras: dict = field(default_factory=dict)

    def as_row(self) -> list:
        values = asdict(self)
        return ["" if values[c] is None else values[c] for c in CSV_COLUMNS]

    def as_dict(self) -> dict:
        return asdict(self)


# --- Normalization and point-set metrics ---

def normalize_unit(mesh: TriangleMesh) -> TriangleMesh:
    return normalize_to(mesh, 1.0)


def _check_sets(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if not len(a) or not len(b):
        raise EmptySet(f"point sets must be non-empty (got {len(a)} and {len(b)})")
    return a, b


def nearest_distances(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Distance from every point of a to b and from every point of b to a."""
    a, b = _check_sets(a, b)
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return d_ab, d_ba


def chamfer(a, b) -> float:
    d_ab, d_ba = nearest_distances(a, b)
    return float((d_ab.mean() + d_ba.mean()) / 2.0)


def _fscore_from(d_ab: np.ndarray, d_ba: np.ndarray, tau: float) -> float:
    precision = float(np.mean(d_ab < tau))
    recall = float(np.mean(d_ba < tau))
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def f_score(a, b, tau: float = config.F_SCORE_THRESHOLD) -> float:
    """Harmonic mean of precision and recall at distance tau, in percent."""
    d_ab, d_ba = nearest_distances(a, b)
    return _fscore_from(d_ab, d_ba, tau)


# --- Winding numbers and voxelization ---

@njit(cache=True, parallel=True)
def _solid_angle_sum(points, v0, v1, v2, out):
    for i in prange(points.shape[0]):
        total = 0.0
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        for f in range(v0.shape[0]):
            ax, ay, az = v0[f, 0] - px, v0[f, 1] - py, v0[f, 2] - pz
            bx, by, bz = v1[f, 0] - px, v1[f, 1] - py, v1[f, 2] - pz
            cx, cy, cz = v2[f, 0] - px, v2[f, 1] - py, v2[f, 2] - pz
            la = math.sqrt(ax * ax + ay * ay + az * az)
            lb = math.sqrt(bx * bx + by * by + bz * bz)
            lc = math.sqrt(cx * cx + cy * cy + cz * cz)
            det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
            den = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
                   + (bx * cx + by * cy + bz * cz) * la + (cx * ax + cy * ay + cz * az) * lb)
            total += 2.0 * math.atan2(det, den)
        out[i] = total / (4.0 * math.pi)


def winding_numbers(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """Generalized winding number of mesh at each query point (1 inside, 0 outside for closed outward meshes)."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles()
    out = np.zeros(len(points))
    _solid_angle_sum(points, np.ascontiguousarray(tri[:, 0]), np.ascontiguousarray(tri[:, 1]),
                     np.ascontiguousarray(tri[:, 2]), out)
    return out


def _column_winding(bvh, centers: np.ndarray, axis: int, start: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Signed crossing count along +axis from outside the box up to every voxel center.
    Returns (N,N,N) winding in [x,y,z] order and the (N,N) net crossing per column.
    """
    n = len(centers)
    u, v = np.meshgrid(centers, centers, indexing="ij")
    origins = np.zeros((n * n, 3))
    others = [a for a in range(3) if a != axis]
    origins[:, others[0]] = u.ravel()
    origins[:, others[1]] = v.ravel()
    origins[:, axis] = start
    dirs = np.zeros_like(origins)
    dirs[:, axis] = 1.0
    batch = cast_rays(bvh, origins, dirs, parallel_cos_threshold=0.0, max_hits=MAX_HITS)
    width = max(int(min(batch.counts.max(initial=0), MAX_HITS)), 1)
    t = batch.t[:, :width]
    live = np.arange(width)[None, :] < np.minimum(batch.counts, MAX_HITS)[:, None]
    # entering against the outward normal adds one, leaving subtracts one
    sign = np.where(live, -np.sign(batch.facing[:, :width]), 0.0)
    reach = centers - start
    w = np.einsum("rnh,rh->rn", (t[:, None, :] < reach[None, :, None]).astype(np.float64), sign)
    net = sign.sum(axis=1).reshape(n, n)
    w = w.reshape(n, n, n)
    # axis order (others[0], others[1], axis) -> (x, y, z)
    w = np.moveaxis(w, 2, axis)
    return w, net


def voxelize(mesh: TriangleMesh, n: int = config.DEFAULT_VOXELS,
             bounds: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """
    Inside/outside at N^3 voxel centers over bounds^3, by signed ray crossings
    along z, cross-checked along x. Raises NonWatertight when more than 1% of
    voxels disagree between the two axes or sit in a column that does not close.
    """
    lo, hi = bounds
    centers = lo + (np.arange(n) + 0.5) * (hi - lo) / n
    bvh = build_bvh(mesh)
    start = lo - 1.0
    wz, net_z = _column_winding(bvh, centers, axis=2, start=start)
    wx, net_x = _column_winding(bvh, centers, axis=0, start=start)
    inside_z = wz > 0.5
    inside_x = wx > 0.5
    bad = inside_z != inside_x
    bad |= (net_z != 0)[:, :, None]
    bad |= (net_x != 0)[None, :, :]
    bad |= ~np.isin(wz, (0.0, 1.0))
    fraction = float(bad.mean())
    if fraction > WATERTIGHT_TOLERANCE:
        raise NonWatertight(f"{fraction:.2%} of voxels have an ambiguous winding number")
    if fraction:
        log.debug("Voxelizer: %.3f%% ambiguous voxels tolerated", 100 * fraction)
    return inside_z


def volume_iou(a: TriangleMesh, b: TriangleMesh, n: int = config.DEFAULT_VOXELS) -> float:
    """IoU of the two solids on a shared N^3 grid over [-1, 1]^3."""
    va = voxelize(a, n)
    vb = voxelize(b, n)
    union = np.logical_or(va, vb).sum()
    if not union:
        return 1.0
    return float(np.logical_and(va, vb).sum() / union)


# --- Rotation alignment ---

@dataclass(frozen=True, eq=False)
class Rotation:
    rid: int
    matrix: np.ndarray


def octahedral_rotations() -> list[Rotation]:
    """The 24 proper signed permutation matrices; id 0 is the identity."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            m[range(3), perm] = signs
            if np.linalg.det(m) > 0:
                out.append(Rotation(len(out), m))
    return out


def z_rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_set(name: str = "octahedral") -> list[Rotation]:
    """identity, octahedral (24) or refined (24 x 15-degree azimuth steps)."""
    octa = octahedral_rotations()
    if name == "identity":
        return octa[:1]
    if name == "octahedral":
        return octa
    if name == "refined":
        steps = [z_rotation(math.radians(15.0 * j)) for j in range(24)]
        return [Rotation(j * len(octa) + r.rid, z @ r.matrix) for j, z in enumerate(steps) for r in octa]
    raise ValueError(f"unknown rotation set: {name}")


def align_rotation(pred: TriangleMesh, gt: TriangleMesh, rotations: list[Rotation] | None = None,
                   n_samples: int = config.DEFAULT_SAMPLES, tau: float = config.F_SCORE_THRESHOLD,
                   voxels: int | None = None, seed: int = config.DEFAULT_SEED) -> tuple[Rotation, EvalReport]:
    """
    Pick the rotation of pred (after normalize_unit) with the lowest Chamfer
    distance to gt; ties go to the lowest id. Volume IoU is computed at the
    chosen rotation when voxels is given.
    """
    rotations = rotations or octahedral_rotations()
    pred_n = normalize_unit(pred)
    gt_n = normalize_unit(gt)
    p = sample_surface(pred_n, n_samples, seed)
    g = sample_surface(gt_n, n_samples, seed + 1)
    p_tree, g_tree = cKDTree(p), cKDTree(g)

    best, best_cd, best_d = None, math.inf, None
    for rot in sorted(rotations, key=lambda r: r.rid):
        # distances to R.p equal distances from R^T.g to p
        d_pg, _ = g_tree.query(p @ rot.matrix.T)
        d_gp, _ = p_tree.query(g @ rot.matrix)
        cd = float((d_pg.mean() + d_gp.mean()) / 2.0)
        if cd < best_cd:
            best, best_cd, best_d = rot, cd, (d_pg, d_gp)

    report = EvalReport(chamfer=best_cd, f_score=_fscore_from(*best_d, tau), rotation_chosen=best.rid)
    if voxels:
        report.vol_iou = volume_iou(pred_n.transformed(best.matrix), gt_n, voxels)
    log.debug("Rotation %d chosen out of %d (CD %.6f)", best.rid, len(rotations), best_cd)
    return best, report


# --- SP-map regional errors ---

def region_mask(shape: tuple[int, int], region: str) -> np.ndarray:
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    if region == "seam":
        mask[:, :SEAM_COLUMNS] = True
        mask[:, w - SEAM_COLUMNS:] = True
    elif region == "polar":
        rows = max(1, int(round(POLAR_FRACTION * h)))
        mask[:rows] = True
        mask[h - rows:] = True
    elif region == "equator":
        rows = max(1, int(round(EQUATOR_FRACTION * h)))
        top = (h - rows) // 2
        mask[top:top + rows] = True
    elif region == "all":
        mask[:] = True
    else:
        raise ValueError(f"unknown region: {region} (expected one of {', '.join(REGIONS)})")
    return mask


def _check_same_grid(a: SpMap, b: SpMap) -> None:
    if a.grid != b.grid or a.k != b.k:
        raise GridMismatch(
            f"maps differ: {a.grid.height}x{a.grid.width}x{a.k} vs {b.grid.height}x{b.grid.width}x{b.k}"
        )


def regional_abs_rel(sp_map: SpMap, ref: SpMap, region: str = "all") -> float:
    """Mean |d - d_ref| / d_ref over co-valid pixels of the region; NaN when none are co-valid."""
    _check_same_grid(sp_map, ref)
    sel = sp_map.valid & ref.valid & region_mask(sp_map.grid.shape, region)[None]
    if not sel.any():
        return math.nan
    d = sp_map.depth[sel].astype(np.float64)
    r = ref.depth[sel].astype(np.float64)
    return float(np.mean(np.abs(d - r) / r))


def border_abs_rel(sp_map: SpMap) -> float:
    """Relative depth difference between the first and last azimuth columns of one map."""
    first, last = sp_map.depth[:, :, 0], sp_map.depth[:, :, -1]
    sel = sp_map.valid[:, :, 0] & sp_map.valid[:, :, -1]
    if not sel.any():
        return math.nan
    a, b = first[sel].astype(np.float64), last[sel].astype(np.float64)
    return float(np.mean(2.0 * np.abs(a - b) / (a + b)))


# --- Storage ---

def deflated_size(blob: bytes) -> int:
    return len(zlib.compress(blob, DEFLATE_LEVEL))


def storage_bytes(sp_map: SpMap, mode: str = "raw") -> int:
    blob = spm_bytes(sp_map)
    if mode == "raw":
        return len(blob)
    if mode == "deflated":
        return deflated_size(blob)
    raise ValueError(f"unknown storage mode: {mode}")
