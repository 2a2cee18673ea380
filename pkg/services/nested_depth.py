"""
Nested depth baseline: six axis-aligned orthographic stacks of layered depth
images, fused into voxels by entry/exit parity and meshed with marching cubes.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import config
from services.errors import BadMagic, EmptyMesh, HeaderMismatch, StackMismatch
from services.mesh_io import TriangleMesh
from services.metrics import deflated_size
from services.raycast import MAX_HITS, build_bvh, cast_rays_with_retry
from services.sp_core import SENTINEL
from services.sp_decode import OccupancyGrid, marching_cubes

log = logging.getLogger(__name__)

# name -> (axis index, sign)
AXES = {"+x": (0, 1.0), "-x": (0, -1.0), "+y": (1, 1.0), "-y": (1, -1.0), "+z": (2, 1.0), "-z": (2, -1.0)}
AXIS_TAGS = tuple(AXES)
FUSION_RULES = {"intersection": 6, "majority": 4, "union": 1}
START_OFFSET = 1.0

MAGIC = b"SPN1"
HEADER = struct.Struct("<4sIIBBH")
LITTLE_ENDIAN_TAG = 1


@dataclass(frozen=True, eq=False)
class DepthStack:
    """k layers of N x N depths along one axis, ascending per pixel (entry, exit, entry, ...)."""

    axis: str
    depth: np.ndarray
    valid: np.ndarray

    @property
    def k(self) -> int:
        return self.depth.shape[0]

    @property
    def resolution(self) -> int:
        return self.depth.shape[1]


def _plane_axes(axis: int) -> tuple[int, int]:
    u, v = (a for a in range(3) if a != axis)
    return u, v


def pixel_centers(n: int) -> np.ndarray:
    return -0.5 + (np.arange(n) + 0.5) / n


def encode_nested(mesh: TriangleMesh, n: int, k: int = config.DEFAULT_LAYERS,
                  parallel_cos_threshold: float = config.PARALLEL_COS_THRESHOLD,
                  perturb_sigma: float = config.PERTURB_SIGMA,
                  seed: int = config.DEFAULT_SEED) -> list[DepthStack]:
    """Cast N x N parallel rays along each of the six axis directions, keep the k nearest hits."""
    if not mesh.n_faces:
        raise EmptyMesh("cannot encode a mesh without faces")
    bvh = build_bvh(mesh)
    c = pixel_centers(n)
    uu, vv = np.meshgrid(c, c, indexing="ij")
    stacks = []
    for name, (axis, sign) in AXES.items():
        u, v = _plane_axes(axis)
        origins = np.zeros((n * n, 3))
        origins[:, u] = uu.ravel()
        origins[:, v] = vv.ravel()
        origins[:, axis] = -sign * START_OFFSET
        dirs = np.zeros_like(origins)
        dirs[:, axis] = sign
        batch = cast_rays_with_retry(bvh, origins, dirs, parallel_cos_threshold, perturb_sigma, seed,
                                     max_hits=max(MAX_HITS, k))
        counts = np.minimum(batch.counts, k)
        depth = np.full((k, n * n), SENTINEL, dtype=np.float32)
        valid = np.arange(k)[:, None] < counts[None, :]
        # depth is the signed coordinate along the view axis
        along = batch.t[:, :k].T - START_OFFSET
        depth[valid] = along[valid]
        dropped = int((batch.counts > k).sum())
        if dropped:
            log.info("Stack %s: %d pixel(s) truncated to %d layers", name, dropped, k)
        stacks.append(DepthStack(name, depth.reshape(k, n, n), valid.reshape(k, n, n)))
    return stacks


def _check_stacks(stacks: list[DepthStack]) -> None:
    if sorted(s.axis for s in stacks) != sorted(AXIS_TAGS):
        raise StackMismatch(f"expected one stack per axis, got {[s.axis for s in stacks]}")
    shapes = {s.depth.shape for s in stacks}
    if len(shapes) != 1:
        raise StackMismatch(f"stack shapes differ: {sorted(shapes)}")


def axis_votes(stack: DepthStack, grid: OccupancyGrid) -> np.ndarray:
    """(N,N,N) booleans: voxel center lies inside an entry/exit interval of this stack."""
    axis, sign = AXES[stack.axis]
    u, v = _plane_axes(axis)
    centers = grid.centers()
    n = stack.resolution
    iu = np.floor((centers[..., u] + 0.5) * n).astype(np.int64)
    iv = np.floor((centers[..., v] + 0.5) * n).astype(np.int64)
    inside_plane = (iu >= 0) & (iu < n) & (iv >= 0) & (iv < n)
    iu, iv = np.clip(iu, 0, n - 1), np.clip(iv, 0, n - 1)
    coord = sign * centers[..., axis]
    depth = stack.depth[:, iu, iv]
    valid = stack.valid[:, iu, iv]
    crossed = np.sum(valid & (depth < coord[None]), axis=0)
    return inside_plane & (crossed % 2 == 1)


def fuse_nested(stacks: list[DepthStack], n_vox: int = config.DEFAULT_VOXELS,
                rule: str = "majority") -> OccupancyGrid:
    """Occupied where at least FUSION_RULES[rule] of the six axis votes agree."""
    _check_stacks(stacks)
    if rule not in FUSION_RULES:
        raise ValueError(f"unknown fusion rule: {rule} (expected one of {', '.join(FUSION_RULES)})")
    grid = OccupancyGrid.covering_unit_box(n_vox)
    votes = np.zeros(grid.occupancy.shape, dtype=np.int64)
    for stack in stacks:
        votes += axis_votes(stack, grid)
    grid.occupancy[:] = votes >= FUSION_RULES[rule]
    log.info("Nested fusion (%s) at N=%d: %d occupied voxels", rule, n_vox, int(grid.occupancy.sum()))
    return grid


def reconstruct_nested(stacks: list[DepthStack], n_vox: int = config.DEFAULT_VOXELS,
                       rule: str = "majority", smooth: bool = True) -> TriangleMesh:
    return marching_cubes(fuse_nested(stacks, n_vox, rule), smooth=smooth)


# --- SPN container ---

def spn_bytes(stacks: list[DepthStack]) -> bytes:
    """Header, then per stack: axis tag byte, float32 depths, packed validity bits."""
    _check_stacks(stacks)
    k, n, _ = stacks[0].depth.shape
    parts = [HEADER.pack(MAGIC, n, k, len(stacks), LITTLE_ENDIAN_TAG, config.ENCODER_VERSION)]
    for s in stacks:
        parts.append(bytes([AXIS_TAGS.index(s.axis)]))
        parts.append(np.ascontiguousarray(s.depth, dtype="<f4").tobytes())
        parts.append(np.packbits(s.valid.ravel(), bitorder="little").tobytes())
    return b"".join(parts)


def spn_from_bytes(blob: bytes) -> list[DepthStack]:
    if len(blob) < HEADER.size:
        raise HeaderMismatch(f"file holds {len(blob)} bytes, shorter than the header")
    magic, n, k, count, endian, _version = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {magic!r}")
    if endian != LITTLE_ENDIAN_TAG:
        raise HeaderMismatch(f"unsupported endianness tag {endian}")
    cells = k * n * n
    mask_len = (cells + 7) // 8
    per_stack = 1 + 4 * cells + mask_len
    if len(blob) != HEADER.size + count * per_stack:
        raise HeaderMismatch(f"header declares {HEADER.size + count * per_stack} bytes, file holds {len(blob)}")
    stacks = []
    offset = HEADER.size
    for _ in range(count):
        tag = blob[offset]
        if tag >= len(AXIS_TAGS):
            raise HeaderMismatch(f"unknown axis tag {tag}")
        offset += 1
        depth = np.frombuffer(blob, dtype="<f4", count=cells, offset=offset).reshape(k, n, n).astype(np.float32)
        offset += 4 * cells
        valid = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=mask_len, offset=offset),
                              count=cells, bitorder="little").astype(bool).reshape(k, n, n)
        offset += mask_len
        stacks.append(DepthStack(AXIS_TAGS[tag], depth, valid))
    return stacks


def nested_storage_bytes(stacks: list[DepthStack], mode: str = "raw") -> int:
    """Same raw/deflated accounting as SP maps."""
    blob = spn_bytes(stacks)
    if mode == "raw":
        return len(blob)
    if mode == "deflated":
        return deflated_size(blob)
    raise ValueError(f"unknown storage mode: {mode}")


def write_spn(stacks: list[DepthStack], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(spn_bytes(stacks))


def read_spn(path) -> list[DepthStack]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"SPN file not found: {path}")
    return spn_from_bytes(path.read_bytes())
