"""Codec commands: encode, decode, info, coverage."""
import logging
import time
from pathlib import Path

import numpy as np

import config
import db
from services.errors import EmptyMesh
from services.fixtures import FIXTURES
from services.mesh_io import TriangleMesh, load_mesh, mesh_hash, normalize_mesh, save_mesh
from services.metrics import storage_bytes
from services.sp_core import HEADER_SIZE, SpMap, read_spm, spm_bytes, spm_from_bytes, write_spm
from services.sp_decode import (
    grid_triangulate,
    marching_cubes,
    occupancy_from_map,
    save_point_cloud,
    unproject_map,
)
from services.sp_encode import EncodeConfig, coverage, encode, layer_histogram
from tools.settings import FIXTURE_PREFIX, Settings, config_hash, settings_from_arguments

log = logging.getLogger(__name__)

DECODE_METHODS = ("auto", "occupancy", "grid")

COMMANDS = [
    {
        "name": "encode",
        "description": "Encode a mesh (file or fixture:<name>) into an SPM file.",
        "arguments": [
            {"flags": ["mesh"], "help": "mesh path (.obj/.ply) or fixture:<name>"},
            {"flags": ["--raw"], "action": "store_true", "help": "skip normalization (mesh must already fit [-0.5, 0.5]^3)"},
        ],
        "options": ["res", "layers", "seed", "out", "config", "normals", "no_cache"],
    },
    {
        "name": "decode",
        "description": "Decode an SPM file into a mesh, optionally also an oriented point cloud.",
        "arguments": [
            {"flags": ["spm"], "help": "input SPM file"},
            {"flags": ["--method"], "choices": list(DECODE_METHODS), "help": "reconstruction (default: auto)"},
            {"flags": ["--points"], "help": "also write a PLY point cloud with normals"},
            {"flags": ["--allow-truncated"], "action": "store_true", "help": "decode occupancy even if hits were dropped"},
        ],
        "options": ["voxels", "out", "config"],
    },
    {
        "name": "info",
        "description": "Print header fields, layer histogram and storage of an SPM file.",
        "arguments": [{"flags": ["spm"], "help": "input SPM file"}],
        "options": [],
    },
    {
        "name": "coverage",
        "description": "Fraction of surface samples recovered by the encoded layers.",
        "arguments": [{"flags": ["mesh"], "help": "mesh path or fixture:<name>"}],
        "options": ["res", "layers", "seed", "config", "no_cache"],
    },
]


def load_source(source: str) -> TriangleMesh:
    """A mesh file path, or fixture:<name> for a procedural fixture."""
    if source.startswith(FIXTURE_PREFIX):
        name = source[len(FIXTURE_PREFIX):]
        if name not in FIXTURES:
            raise ValueError(f"Unknown fixture: {name} (available: {', '.join(sorted(FIXTURES))})")
        return FIXTURES[name]()
    return load_mesh(source)


def source_stem(source: str) -> str:
    if source.startswith(FIXTURE_PREFIX):
        return source[len(FIXTURE_PREFIX):]
    return Path(source).stem


def encode_cached(mesh: TriangleMesh, cfg: EncodeConfig, settings: Settings) -> SpMap:
    """Encode through the SPM cache; hits and fresh encodes return the same bytes."""
    if not settings.cache:
        return encode(mesh, cfg)
    key_mesh = mesh_hash(mesh)
    key_cfg = config_hash({**cfg.as_dict(), "encoder_version": config.ENCODER_VERSION})
    row = db.get_cached_encoding(key_mesh, key_cfg)
    if row:
        log.info("Cache hit: %s", row["path"])
        return read_spm(row["path"])
    blob = spm_bytes(encode(mesh, cfg))
    path = Path(settings.cache_dir) / f"{key_mesh[:16]}_{key_cfg[:16]}.spm"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    sp_map = spm_from_bytes(blob)
    db.put_cached_encoding(key_mesh, key_cfg, str(path), sp_map.truncation_count)
    return sp_map


def parity_consistent(sp_map: SpMap) -> bool:
    """True when every pixel's hit count has the same parity, as for a closed surface."""
    counts = sp_map.layer_counts()
    if sp_map.truncation_count:
        return False
    parities = np.unique(counts % 2)
    return len(parities) == 1 and bool(counts.any())


def decode_map(sp_map: SpMap, method: str, voxels: int, allow_truncated: bool = False) -> tuple[TriangleMesh, str]:
    if method not in DECODE_METHODS:
        raise ValueError(f"Invalid decode method: {method} (expected one of {', '.join(DECODE_METHODS)})")
    if method == "auto":
        method = "occupancy" if parity_consistent(sp_map) else "grid"
    if method == "occupancy":
        return marching_cubes(occupancy_from_map(sp_map, voxels, allow_truncated)), method
    return grid_triangulate(sp_map), method


def _histogram_json(sp_map: SpMap) -> dict[str, int]:
    return {str(k): v for k, v in layer_histogram(sp_map).items()}


def execute_codec_command(command: str, arguments: dict):
    """Execute a codec command."""
    settings = settings_from_arguments(arguments)

    if command == "encode":
        source = arguments["mesh"]
        mesh = load_source(source)
        if not arguments.get("raw"):
            mesh = normalize_mesh(mesh)
        started = time.perf_counter()
        sp_map = encode_cached(mesh, settings.encode_config(), settings)
        elapsed = time.perf_counter() - started
        out = Path(arguments.get("out") or f"{source_stem(source)}.spm")
        write_spm(sp_map, out)
        log.info("Wrote %s (truncated pixels: %d, %.2fs)", out, sp_map.truncation_count, elapsed)
        return {
            "path": str(out),
            "resolution": f"{sp_map.grid.height}x{sp_map.grid.width}",
            "k": sp_map.k,
            "histogram": _histogram_json(sp_map),
            "truncation_count": sp_map.truncation_count,
            "storage_raw": out.stat().st_size,
            "seconds": round(elapsed, 3),
        }

    if command == "decode":
        spm_path = Path(arguments["spm"])
        sp_map = read_spm(spm_path)
        result = {"spm": str(spm_path)}
        if arguments.get("points"):
            cloud = unproject_map(sp_map)
            save_point_cloud(cloud, arguments["points"])
            result["points"] = str(arguments["points"])
            result["point_count"] = len(cloud)
        mesh, method = decode_map(sp_map, arguments.get("method") or "auto", settings.voxels,
                                  bool(arguments.get("allow_truncated")))
        if not mesh.n_faces:
            raise EmptyMesh("decoding produced no faces")
        out = Path(arguments.get("out") or spm_path.with_suffix(".obj"))
        save_mesh(mesh, out)
        result.update({"mesh": str(out), "method": method, "vertices": len(mesh.vertices), "faces": mesh.n_faces})
        return result

    if command == "info":
        sp_map = read_spm(arguments["spm"])
        return {
            "spm": str(arguments["spm"]),
            "header_bytes": HEADER_SIZE,
            "resolution": f"{sp_map.grid.height}x{sp_map.grid.width}",
            "k": sp_map.k,
            "normals": sp_map.normals is not None,
            "encoder_version": sp_map.meta.get("encoder_version"),
            "source_hash": sp_map.meta.get("source_hash"),
            "truncation_count": sp_map.truncation_count,
            "histogram": _histogram_json(sp_map),
            "storage_raw": storage_bytes(sp_map, "raw"),
            "storage_deflated": storage_bytes(sp_map, "deflated"),
        }

    if command == "coverage":
        mesh = normalize_mesh(load_source(arguments["mesh"]))
        sp_map = encode_cached(mesh, settings.encode_config(), settings)
        value = coverage(mesh, sp_map, settings.coverage_samples, settings.coverage_tol, settings.seed)
        return {
            "mesh": arguments["mesh"],
            "resolution": f"{sp_map.grid.height}x{sp_map.grid.width}",
            "k": sp_map.k,
            "coverage": value,
            "samples": settings.coverage_samples,
            "tol": settings.coverage_tol,
        }

    raise ValueError(f"Unknown codec command: {command}")
