"""Evaluation commands: single-mesh roundtrip and the resolution x layer sweep."""
import csv
import json
import logging
import math
import multiprocessing
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import db
from services.errors import UnnormalizedMesh
from services.mesh_io import TriangleMesh, normalize_mesh, save_mesh
from services.metrics import (
    CSV_COLUMNS,
    EvalReport,
    align_rotation,
    border_abs_rel,
    regional_abs_rel,
    storage_bytes,
)
from services.nested_depth import encode_nested, nested_storage_bytes, reconstruct_nested
from services.sp_core import SphericalGrid, SpMap
from services.sp_decode import grid_triangulate, marching_cubes, occupancy_from_map
from services.sp_encode import coverage, encode
from services.sp_quality import combined_quality
from tools.codec import encode_cached, load_source, source_stem
from tools.settings import Settings, load_manifest, settings_from_arguments

log = logging.getLogger(__name__)

QUALITY_COLUMNS = ("l_total", "l1", "l_edge", "l_spec")
REPORT_COLUMNS = CSV_COLUMNS + ("representation", "decode") + QUALITY_COLUMNS
CHAMFER_CONVENTION = "symmetric mean of nearest-neighbour L2 distances, halved; meshes scaled to [-1, 1]"

COMMANDS = [
    {
        "name": "roundtrip",
        "description": "Encode, decode and score one mesh; writes roundtrip.csv/.json and timings.json.",
        "arguments": [
            {"flags": ["mesh"], "help": "mesh path or fixture:<name>"},
            {"flags": ["--open"], "action": "store_true", "help": "mesh is not watertight (grid triangulation, no IoU)"},
            {"flags": ["--save-mesh"], "help": "also write the reconstructed mesh"},
        ],
        "options": ["res", "layers", "repr", "samples", "voxels", "seed", "out", "config", "rotations", "no_cache"],
    },
    {
        "name": "sweep",
        "description": "Resolution x layers x representation sweep over a manifest ('desk' for the built-in corpus).",
        "arguments": [
            {"flags": ["manifest"], "help": "CSV manifest (mesh_id,path,watertight) or 'desk'"},
            {"flags": ["--res"], "dest": "resolutions", "help": "comma separated resolutions (default 32x64,...,256x512)"},
            {"flags": ["--layers"], "dest": "layer_counts", "help": "comma separated layer counts (default 1,2,3,4)"},
            {"flags": ["--repr"], "dest": "representations", "help": "comma separated subset of sp,nested"},
        ],
        "options": ["samples", "voxels", "seed", "out", "config", "workers", "rotations", "no_cache"],
    },
]


@dataclass(frozen=True)
class CellResult:
    report: EvalReport
    representation: str
    coverage: float | None
    recon: TriangleMesh


def _resolution(grid: SphericalGrid) -> str:
    return f"{grid.height}x{grid.width}"


def _regional(sp_map: SpMap, recon: TriangleMesh, settings: Settings, report: EvalReport) -> None:
    """Re-encode the reconstruction; compare it with the source map per region and by map quality."""
    try:
        again = encode(recon, settings.encode_config(sp_map.grid, sp_map.k))
    except UnnormalizedMesh as e:
        log.warning("Regional errors skipped: %s", e)
        return
    report.seam_abs_rel = regional_abs_rel(again, sp_map, "seam")
    report.polar_abs_rel = regional_abs_rel(again, sp_map, "polar")
    report.equator_abs_rel = regional_abs_rel(again, sp_map, "equator")
    report.extras["all_abs_rel"] = regional_abs_rel(again, sp_map, "all")
    report.extras["border_abs_rel"] = border_abs_rel(again)
    report.extras["quality"] = combined_quality(again, sp_map, settings.quality).as_dict()


def decode_for_scoring(sp_map: SpMap, watertight: bool, n_vox: int) -> tuple[TriangleMesh, str]:
    """
    Reconstruction used for scoring, and the name of the decode that made it.

    Truncated watertight maps keep the parity of the hits they hold, so every
    k gets a closed mesh and a volume IoU.
    """
    if not watertight:
        return grid_triangulate(sp_map), "grid"
    if sp_map.truncation_count:
        log.info("%d truncated pixel(s); decoding from kept hits", sp_map.truncation_count)
        occupancy = occupancy_from_map(sp_map, n_vox, allow_truncated=True, truncated_rule="kept")
        return marching_cubes(occupancy), "occupancy_kept_hits"
    return marching_cubes(occupancy_from_map(sp_map, n_vox)), "occupancy"


def evaluate_mesh(mesh_id: str, mesh: TriangleMesh, watertight: bool, grid: SphericalGrid, k: int,
                  representation: str, settings: Settings, with_coverage: bool = False) -> CellResult:
    """Encode, decode and score one normalized mesh at one (resolution, k, representation)."""
    cov = None
    if representation == "sp":
        sp_map = encode_cached(mesh, settings.encode_config(grid, k), settings)
        if with_coverage:
            cov = coverage(mesh, sp_map, settings.coverage_samples, settings.coverage_tol, settings.seed)
        recon, decode = decode_for_scoring(sp_map, watertight, settings.voxels)
        raw, deflated = storage_bytes(sp_map, "raw"), storage_bytes(sp_map, "deflated")
        truncation = sp_map.truncation_count
    else:
        stacks = encode_nested(mesh, grid.height, k, settings.parallel_cos_threshold,
                               settings.perturb_sigma, settings.seed)
        recon = reconstruct_nested(stacks, settings.voxels, settings.fusion)
        decode = f"nested_{settings.fusion}"
        raw, deflated = nested_storage_bytes(stacks, "raw"), nested_storage_bytes(stacks, "deflated")
        truncation = 0

    _, report = align_rotation(recon, mesh, settings.rotation_set(), settings.samples, settings.tau,
                               settings.voxels if watertight else None, settings.seed)
    report.mesh_id = mesh_id
    report.resolution = _resolution(grid)
    report.k = k
    report.storage_raw = raw
    report.storage_deflated = deflated
    report.truncation_count = truncation
    report.extras["decode"] = decode
    if representation == "sp":
        _regional(sp_map, recon, settings, report)
    return CellResult(report=report, representation=representation, coverage=cov, recon=recon)


# --- Report writers ---

def _clean(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_clean(v) for v in value]
    return value


def write_json(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")


def write_csv(rows: list[list], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(rows)


def _row(report: EvalReport, representation: str) -> list:
    quality = report.extras.get("quality", {})
    scores = [quality.get(c, "") for c in QUALITY_COLUMNS]
    return report.as_row() + [representation, report.extras.get("decode", "")] + scores


# --- Sweep ---

@dataclass(frozen=True)
class SweepTask:
    mesh_id: str
    source: str
    watertight: bool
    grid: SphericalGrid
    k: int
    representation: str
    settings: Settings
    db_path: str

    @property
    def key(self) -> tuple:
        return (self.mesh_id, self.representation, self.grid.height, self.grid.width, self.k)


def run_cell(task: SweepTask) -> dict:
    """One sweep cell. Runs in a worker process; failures come back as data."""
    db.DB_PATH = Path(task.db_path)
    db.init_db()
    started = time.perf_counter()
    try:
        mesh = normalize_mesh(load_source(task.source))
        cell = evaluate_mesh(task.mesh_id, mesh, task.watertight, task.grid, task.k,
                             task.representation, task.settings, with_coverage=task.representation == "sp")
    except Exception as e:
        return {"ok": False, "error": f"{type(e).__name__}: {e}", "seconds": time.perf_counter() - started}
    return {
        "ok": True,
        "report": cell.report,
        "coverage": cell.coverage,
        "seconds": time.perf_counter() - started,
    }


def _stats(values: list[float], prefix: str) -> dict:
    values = [v for v in values if v is not None and not math.isnan(v)]
    if not values:
        return {f"{prefix}_mean": None, f"{prefix}_median": None}
    return {f"{prefix}_mean": statistics.fmean(values), f"{prefix}_median": statistics.median(values)}


def summarize(tasks: list[SweepTask], results: list[dict]) -> list[dict]:
    """Per (representation, resolution, k) means and medians, with failed meshes counted."""
    cells: dict[tuple, list] = {}
    for task, result in zip(tasks, results):
        cells.setdefault((task.representation, task.grid.height, task.grid.width, task.k), []).append(result)
    summary = []
    for (representation, h, w, k), group in sorted(cells.items()):
        ok = [r for r in group if r["ok"]]
        reports = [r["report"] for r in ok]
        entry = {
            "representation": representation,
            "resolution": f"{h}x{w}",
            "k": k,
            "meshes": len(group),
            "failed": len(group) - len(ok),
            "complete": len(ok) == len(group),
        }
        entry.update(_stats([r.chamfer for r in reports], "chamfer"))
        entry.update(_stats([r.vol_iou for r in reports], "vol_iou"))
        entry.update(_stats([r.f_score for r in reports], "f_score"))
        entry.update(_stats([float(r.storage_raw) for r in reports], "storage_raw"))
        entry.update(_stats([float(r.storage_deflated) for r in reports], "storage_deflated"))
        if representation == "sp":
            entry.update(_stats([r["coverage"] for r in ok], "coverage"))
            entry.update(_stats([r.extras.get("quality", {}).get("l_total") for r in reports], "l_total"))
            entry["decode"] = sorted({r.extras["decode"] for r in reports})
        summary.append(entry)
    return summary


def run_sweep(entries, settings: Settings, out_dir: Path) -> dict:
    tasks = sorted(
        (
            SweepTask(e.mesh_id, e.source, e.watertight, grid, k, rep, settings, str(db.DB_PATH))
            for e in entries
            for grid in settings.resolutions
            for k in settings.layer_counts
            for rep in settings.representations
        ),
        key=lambda t: t.key,
    )
    log.info("Sweep: %d cells over %d mesh(es), %d worker(s)", len(tasks), len(entries), settings.workers)
    if settings.workers == 1:
        results = [run_cell(t) for t in tasks]
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=settings.workers, mp_context=ctx) as pool:
            results = list(pool.map(run_cell, tasks))

    rows, failures, timings = [], [], []
    for task, result in zip(tasks, results):
        label = f"{task.mesh_id} {task.representation} {_resolution(task.grid)} k={task.k}"
        timings.append({"cell": label, "seconds": round(result["seconds"], 3)})
        if result["ok"]:
            rows.append(_row(result["report"], task.representation))
            log.info("Cell done: %s", label)
        else:
            failures.append({"cell": label, "error": result["error"]})
            log.warning("Cell failed: %s (%s)", label, result["error"])

    summary = {
        "config": settings.as_dict(),
        "chamfer_convention": CHAMFER_CONVENTION,
        "quality_weights": settings.quality.as_dict(),
        "cells": summarize(tasks, results),
        "failures": failures,
    }
    write_csv(rows, out_dir / "sweep.csv")
    write_json(summary, out_dir / "summary.json")
    write_json({"cells": timings}, out_dir / "timings.json")
    return summary


def execute_evaluate_command(command: str, arguments: dict):
    """Execute an evaluation command."""
    settings = settings_from_arguments(arguments)
    out_dir = Path(arguments.get("out") or ".")

    if command == "roundtrip":
        source = arguments["mesh"]
        started = time.perf_counter()
        mesh = normalize_mesh(load_source(source))
        watertight = not arguments.get("open")
        cell = evaluate_mesh(source_stem(source), mesh, watertight, settings.resolution, settings.layers,
                             settings.representation, settings)
        elapsed = time.perf_counter() - started
        row = dict(zip(REPORT_COLUMNS, _row(cell.report, cell.representation)))
        payload = {
            "config": settings.as_dict(),
            "chamfer_convention": CHAMFER_CONVENTION,
            "watertight": watertight,
            "row": row,
            "rotation_chosen": cell.report.rotation_chosen,
            "extras": cell.report.extras,
            "quality_weights": settings.quality.as_dict(),
        }
        write_csv([_row(cell.report, cell.representation)], out_dir / "roundtrip.csv")
        write_json(payload, out_dir / "roundtrip.json")
        write_json({"seconds": round(elapsed, 3)}, out_dir / "timings.json")
        if arguments.get("save_mesh"):
            save_mesh(cell.recon, arguments["save_mesh"])
        db.log_run("roundtrip", json.dumps(settings.as_dict(), sort_keys=True), "ok")
        return _clean(payload)

    if command == "sweep":
        entries = load_manifest(arguments["manifest"])
        summary = run_sweep(entries, settings, out_dir)
        status = "ok" if not summary["failures"] else "incomplete"
        db.log_run("sweep", json.dumps(settings.as_dict(), sort_keys=True), status)
        return _clean({"cells": len(summary["cells"]), "failures": len(summary["failures"]),
                       "csv": str(out_dir / "sweep.csv"), "summary": str(out_dir / "summary.json")})

    raise ValueError(f"Unknown evaluation command: {command}")
