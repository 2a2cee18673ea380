"""
Equirectangular grid, SP map container and the SPM file format.

Angles: azimuth theta in [-pi/2, 3pi/2), polar phi in [0, pi), sampled at
pixel centers. A point at distance d maps to
d * (sin(phi) cos(theta), sin(phi) sin(theta), cos(phi)).
"""
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from services.errors import (
    BadMagic,
    HeaderMismatch,
    NonPositiveDepth,
    OriginPoint,
    OutOfRange,
    PadTooLarge,
)

log = logging.getLogger(__name__)

THETA_MIN = -math.pi / 2
TWO_PI = 2.0 * math.pi
SENTINEL = -1.0
MAX_DEPTH = math.sqrt(3.0) / 2.0
POLE_SIN_EPS = 1e-12

MAGIC = b"SPM1"
HEADER = struct.Struct("<4sIIIBBHIQ")
HEADER_SIZE = HEADER.size  # 32
LITTLE_ENDIAN_TAG = 1
FLAG_DEPTH = 0x01
FLAG_NORMALS = 0x02
FLAG_TRUNCATION = 0x04

# Resolution aliases: H -> (H, 2H)
PRESETS = {h: (h, 2 * h) for h in (32, 64, 128, 256, 512)}


@dataclass(frozen=True)
class SphericalGrid:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 2 or self.width < 4:
            raise OutOfRange(f"grid must be at least 2x4, got {self.height}x{self.width}")

    @classmethod
    def preset(cls, height: int) -> "SphericalGrid":
        return cls(*PRESETS[height])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def d_theta(self) -> float:
        return TWO_PI / self.width

    @property
    def d_phi(self) -> float:
        return math.pi / self.height

    def pixel_to_angles(self, r: int, c: int) -> tuple[float, float]:
        if not (0 <= r < self.height and 0 <= c < self.width):
            raise OutOfRange(f"pixel ({r}, {c}) outside {self.height}x{self.width}")
        theta = THETA_MIN + (c + 0.5) * self.d_theta
        phi = (r + 0.5) * self.d_phi
        return theta, phi

    def angles_to_pixel(self, theta: float, phi: float) -> tuple[int, int]:
        r, c = self.angles_to_pixels(np.asarray(theta), np.asarray(phi))
        return int(r), int(c)

    def angles_to_pixels(self, theta: np.ndarray, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized inverse of pixel_to_angles; theta wraps, phi clamps to the pole rows."""
        c = np.floor((theta - THETA_MIN) / self.d_theta).astype(np.int64) % self.width
        r = np.clip(np.floor(phi / self.d_phi).astype(np.int64), 0, self.height - 1)
        return r, c

    def angle_grids(self) -> tuple[np.ndarray, np.ndarray]:
        """(H,W) theta and phi at every pixel center."""
        theta = THETA_MIN + (np.arange(self.width) + 0.5) * self.d_theta
        phi = (np.arange(self.height) + 0.5) * self.d_phi
        return np.broadcast_to(theta, self.shape), np.broadcast_to(phi[:, None], self.shape)

    def ray_directions(self) -> np.ndarray:
        """(H,W,3) unit ray directions through pixel centers."""
        theta, phi = self.angle_grids()
        return unproject_points(theta, phi, np.ones(self.shape))


@dataclass(frozen=True, eq=False)
class SpMap:
    """k layers of H x W depths. Layer 0 holds the outermost hit of each ray."""

    grid: SphericalGrid
    depth: np.ndarray
    valid: np.ndarray
    normals: np.ndarray | None = None
    truncated: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.depth.shape[0]

    @property
    def truncation_count(self) -> int:
        if self.truncated is None:
            return int(self.meta.get("truncation_count", 0))
        return int(self.truncated.sum())

    @classmethod
    def empty(cls, grid: SphericalGrid, k: int, with_normals: bool = False) -> "SpMap":
        shape = (k, grid.height, grid.width)
        return cls(
            grid=grid,
            depth=np.full(shape, SENTINEL, dtype=np.float32),
            valid=np.zeros(shape, dtype=bool),
            normals=np.zeros(shape + (3,), dtype=np.float32) if with_normals else None,
        )

    def check(self) -> None:
        """Raise ValueError if any container invariant is broken."""
        if self.depth.shape != self.valid.shape or self.depth.shape[1:] != self.grid.shape:
            raise HeaderMismatch("depth/valid shapes disagree with the grid")
        if np.any(self.depth[~self.valid] != SENTINEL):
            raise ValueError("invalid pixels must hold the sentinel depth")
        if np.any(~self.valid[:-1] & self.valid[1:]):
            raise ValueError("valid layers must be front-packed")
        d = self.depth[self.valid]
        if d.size and (d.min() <= 0 or d.max() > MAX_DEPTH + 1e-6):
            raise ValueError("valid depths must lie in (0, sqrt(3)/2]")
        both = self.valid[:-1] & self.valid[1:]
        if np.any(self.depth[1:][both] >= self.depth[:-1][both]):
            raise ValueError("valid depths must strictly decrease with layer index")

    def layer_counts(self) -> np.ndarray:
        """(H,W) number of valid layers per pixel."""
        return self.valid.sum(axis=0)

    def with_depth(self, depth: np.ndarray) -> "SpMap":
        """Same validity and metadata, new depth values (invalid pixels reset to the sentinel)."""
        depth = np.where(self.valid, depth, SENTINEL).astype(np.float32)
        return SpMap(self.grid, depth, self.valid.copy(), self.normals, self.truncated, dict(self.meta))


# --- Spherical mapping ---

def unproject(theta: float, phi: float, d: float) -> np.ndarray:
    if d <= 0:
        raise NonPositiveDepth(f"depth must be positive, got {d}")
    s = math.sin(phi)
    return np.array([d * s * math.cos(theta), d * s * math.sin(theta), d * math.cos(phi)])


def unproject_points(theta, phi, d) -> np.ndarray:
    """Vectorized unproject; returns (..., 3)."""
    s = np.sin(phi)
    return np.stack([d * s * np.cos(theta), d * s * np.sin(theta), d * np.cos(phi)], axis=-1)


def wrap_theta(theta):
    """Wrap azimuth into [-pi/2, 3pi/2)."""
    offset = np.mod(np.asarray(theta) - THETA_MIN, TWO_PI)
    # mod can round up to exactly 2pi for tiny negative offsets
    offset = np.where(offset >= TWO_PI, 0.0, offset)
    return offset + THETA_MIN


def project(p) -> tuple[float, float, float]:
    p = np.asarray(p, dtype=np.float64)
    d = float(np.linalg.norm(p))
    if d == 0.0:
        raise OriginPoint("cannot project the origin")
    theta, phi, _ = project_points(p[None, :])
    return float(theta[0]), float(phi[0]), d


def project_points(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(N,3) -> theta, phi, d. theta is 0 at the poles and at the origin."""
    points = np.asarray(points, dtype=np.float64)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    rho = np.hypot(x, y)
    d = np.sqrt(rho * rho + z * z)
    phi = np.arctan2(rho, z)
    theta = wrap_theta(np.arctan2(y, x))
    at_pole = rho <= POLE_SIN_EPS * np.maximum(d, 1e-300)
    theta = np.where(at_pole, 0.0, theta)
    return theta, phi, d


# --- Circular padding ---

def circular_pad(sp_map: SpMap, pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad every layer: columns wrap in azimuth, rows clamp at the poles."""
    return pad_layers(sp_map.depth, sp_map.valid, pad)


def pad_layers(depth: np.ndarray, valid: np.ndarray, pad: int) -> tuple[np.ndarray, np.ndarray]:
    width = depth.shape[-1]
    if pad < 0 or pad >= width:
        raise PadTooLarge(f"pad {pad} must be in [0, {width})")
    lead = [(0, 0)] * (depth.ndim - 2)
    return _pad(depth, lead, pad), _pad(valid, lead, pad)


def _pad(a: np.ndarray, lead, pad: int) -> np.ndarray:
    a = np.pad(a, lead + [(0, 0), (pad, pad)], mode="wrap")
    return np.pad(a, lead + [(pad, pad), (0, 0)], mode="edge")


# --- SPM files ---

def spm_bytes(sp_map: SpMap) -> bytes:
    """Serialize to the SPM layout: header, float32 depths, packed validity, optional extras."""
    k, h, w = sp_map.depth.shape
    flags = FLAG_DEPTH
    if sp_map.normals is not None:
        flags |= FLAG_NORMALS
    if sp_map.truncated is not None and sp_map.truncated.any():
        flags |= FLAG_TRUNCATION
    source = sp_map.meta.get("source_hash", "")
    source_prefix = int(source[:16], 16) if source else 0
    header = HEADER.pack(
        MAGIC, h, w, k, flags, LITTLE_ENDIAN_TAG,
        int(sp_map.meta.get("encoder_version", 0)),
        sp_map.truncation_count,
        source_prefix,
    )
    parts = [
        header,
        np.ascontiguousarray(sp_map.depth, dtype="<f4").tobytes(),
        np.packbits(sp_map.valid.ravel(), bitorder="little").tobytes(),
    ]
    if flags & FLAG_NORMALS:
        parts.append(np.ascontiguousarray(sp_map.normals, dtype="<f4").tobytes())
    if flags & FLAG_TRUNCATION:
        parts.append(np.packbits(sp_map.truncated.ravel(), bitorder="little").tobytes())
    return b"".join(parts)


def _payload_size(k: int, h: int, w: int, flags: int) -> int:
    n = k * h * w
    size = 4 * n + (n + 7) // 8
    if flags & FLAG_NORMALS:
        size += 12 * n
    if flags & FLAG_TRUNCATION:
        size += (h * w + 7) // 8
    return size


def spm_from_bytes(blob: bytes) -> SpMap:
    if len(blob) < HEADER_SIZE:
        raise HeaderMismatch(f"file holds {len(blob)} bytes, shorter than the header")
    magic, h, w, k, flags, endian, version, truncation, source = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {magic!r}")
    if endian != LITTLE_ENDIAN_TAG or not flags & FLAG_DEPTH:
        raise HeaderMismatch(f"unsupported endianness tag {endian} or flags {flags:#x}")
    expected = HEADER_SIZE + _payload_size(k, h, w, flags)
    if len(blob) != expected:
        raise HeaderMismatch(f"header declares {expected} bytes, file holds {len(blob)}")
    n = k * h * w
    offset = HEADER_SIZE
    depth = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(k, h, w).astype(np.float32)
    offset += 4 * n
    mask_len = (n + 7) // 8
    valid = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=mask_len, offset=offset),
                          count=n, bitorder="little").astype(bool).reshape(k, h, w)
    offset += mask_len
    normals = None
    if flags & FLAG_NORMALS:
        normals = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=offset).reshape(k, h, w, 3).astype(np.float32)
        offset += 12 * n
    truncated = None
    if flags & FLAG_TRUNCATION:
        t_len = (h * w + 7) // 8
        truncated = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=t_len, offset=offset),
                                  count=h * w, bitorder="little").astype(bool).reshape(h, w)
    meta = {
        "encoder_version": version,
        "truncation_count": truncation,
        "source_hash": f"{source:016x}" if source else "",
    }
    return SpMap(SphericalGrid(h, w), depth, valid, normals, truncated, meta)


def write_spm(sp_map: SpMap, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(spm_bytes(sp_map))


def read_spm(path) -> SpMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"SPM file not found: {path}")
    return spm_from_bytes(path.read_bytes())
