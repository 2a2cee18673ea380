"""Multi-layer SP map encoding: one ray per pixel center, layers filled from the outermost hit inward."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

import config
from services.errors import OutOfRange, UnnormalizedMesh
from services.mesh_io import TriangleMesh, mesh_hash, sample_surface
from services.raycast import MAX_HITS, Bvh, build_bvh, cast_rays_with_retry
from services.sp_core import MAX_DEPTH, SENTINEL, SphericalGrid, SpMap
from services.sp_decode import map_points

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncodeConfig:
    grid: SphericalGrid = field(default_factory=lambda: SphericalGrid(*config.DEFAULT_RESOLUTION))
    k: int = config.DEFAULT_LAYERS
    parallel_cos_threshold: float = config.PARALLEL_COS_THRESHOLD
    perturb_sigma: float = config.PERTURB_SIGMA
    store_normals: bool = False
    seed: int = config.DEFAULT_SEED

    def __post_init__(self):
        if self.k < 1:
            raise OutOfRange(f"layer count must be >= 1, got {self.k}")

    def as_dict(self) -> dict:
        return {
            "resolution": f"{self.grid.height}x{self.grid.width}",
            "layers": self.k,
            "parallel_cos_threshold": self.parallel_cos_threshold,
            "perturb_sigma": self.perturb_sigma,
            "store_normals": self.store_normals,
            "seed": self.seed,
        }


def check_normalized(mesh: TriangleMesh) -> None:
    radius = np.linalg.norm(mesh.vertices[np.unique(mesh.faces)], axis=1).max()
    if radius > MAX_DEPTH + 1e-6:
        raise UnnormalizedMesh(f"vertex at radius {radius:.6f} lies outside the sqrt(3)/2 sphere")


def encode(mesh: TriangleMesh, cfg: EncodeConfig | None = None, bvh: Bvh | None = None) -> SpMap:
    """Cast every pixel ray from the origin and fill k layers, outermost hit first."""
    cfg = cfg or EncodeConfig()
    check_normalized(mesh)
    started = time.perf_counter()
    bvh = bvh or build_bvh(mesh)
    grid = cfg.grid
    dirs = grid.ray_directions().reshape(-1, 3)
    batch = cast_rays_with_retry(
        bvh, np.zeros(3), dirs, cfg.parallel_cos_threshold, cfg.perturb_sigma, cfg.seed,
        max_hits=max(MAX_HITS, cfg.k),
    )
    if batch.overflow:
        log.warning("%d ray(s) exceeded %d hits; their farthest hits were lost",
                    batch.overflow, batch.t.shape[1])
    counts = np.minimum(batch.counts, batch.t.shape[1])
    rows = np.arange(len(dirs))

    shape = (cfg.k, grid.height, grid.width)
    depth = np.full(shape, SENTINEL, dtype=np.float32)
    valid = np.zeros(shape, dtype=bool)
    normals = np.zeros(shape + (3,), dtype=np.float32) if cfg.store_normals else None
    for j in range(cfg.k):
        idx = counts - 1 - j
        ok = idx >= 0
        pick = np.where(ok, idx, 0)
        layer_depth = np.where(ok, batch.t[rows, pick], SENTINEL)
        depth[j] = layer_depth.reshape(grid.shape)
        valid[j] = ok.reshape(grid.shape)
        if normals is not None:
            faces = batch.face[rows, pick]
            n = bvh.normals[np.where(ok, faces, 0)]
            # orient against the ray
            n = n * np.where(batch.facing[rows, pick] > 0, -1.0, 1.0)[:, None]
            normals[j] = np.where(ok[:, None], n, 0.0).reshape(grid.shape + (3,))

    # raw counts, so rays past the hit buffer are flagged even when k fills it
    truncated = (batch.counts > cfg.k).reshape(grid.shape)
    dropped = int(np.maximum(batch.counts - cfg.k, 0).sum())
    meta = {
        "source_hash": mesh_hash(mesh)[:16],
        "encoder_version": config.ENCODER_VERSION,
        "truncation_count": int(truncated.sum()),
        "overflow_rays": batch.overflow,
        "dropped_hits": dropped,
        "retried_rays": int(batch.retried.sum()),
    }
    elapsed = time.perf_counter() - started
    log.info(
        "Encoded %d faces at %dx%dx%d in %.2fs (truncated pixels: %d, dropped hits: %d, retried rays: %d)",
        mesh.n_faces, grid.height, grid.width, cfg.k, elapsed,
        meta["truncation_count"], dropped, meta["retried_rays"],
    )
    return SpMap(grid=grid, depth=depth, valid=valid, normals=normals, truncated=truncated, meta=meta)


def layer_histogram(sp_map: SpMap) -> dict[int, int]:
    """Pixel count per number of valid layers, keys 0..k."""
    counts = np.bincount(sp_map.layer_counts().ravel(), minlength=sp_map.k + 1)
    return {i: int(c) for i, c in enumerate(counts)}


def coverage(mesh: TriangleMesh, sp_map: SpMap, n_samples: int = 10_000,
             tol: float = config.COVERAGE_TOLERANCE, seed: int = 0) -> float:
    """Fraction of surface samples whose nearest decoded SP point lies within tol."""
    decoded = map_points(sp_map)
    if not len(decoded):
        return 0.0
    samples = sample_surface(mesh, n_samples, seed)
    dist, _ = cKDTree(decoded).query(samples)
    return float(np.mean(dist <= tol))
