"""Run settings: key = value config files, resolution aliases and CLI overrides."""
import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import config
from services.errors import OutOfRange
from services.fixtures import desk_corpus
from services.metrics import rotation_set
from services.nested_depth import FUSION_RULES
from services.sp_core import SphericalGrid
from services.sp_encode import EncodeConfig
from services.sp_quality import QualityWeights

log = logging.getLogger(__name__)

# Named resolutions for convenience; a bare H also means H x 2H
RESOLUTION_ALIASES = {
    "TINY": "32x64",
    "LOW": "64x128",
    "MEDIUM": "128x256",
    "FULL": "256x512",
}
REPRESENTATIONS = ("sp", "nested")
FIXTURE_PREFIX = "fixture:"
DESK_MANIFEST = "desk"


def resolve_resolution(text: str) -> SphericalGrid:
    """Resolve 'HxW', a bare 'H' (meaning H x 2H) or an alias to a grid."""
    text = str(text or "").strip()
    if not text:
        raise ValueError("Resolution cannot be empty")
    resolved = RESOLUTION_ALIASES.get(text.upper(), text).lower()
    try:
        if "x" in resolved:
            h, w = (int(p) for p in resolved.split("x", 1))
        else:
            h = int(resolved)
            w = 2 * h
    except ValueError:
        raise ValueError(f"Invalid resolution: {text}")
    return SphericalGrid(h, w)


def _split(text: str) -> list[str]:
    return [p.strip() for p in str(text).split(",") if p.strip()]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"Invalid boolean: {text}")


def _choice(options):
    def parse(text) -> str:
        value = str(text).strip()
        if value not in options:
            raise ValueError(f"Invalid value {value!r} (expected one of {', '.join(options)})")
        return value
    return parse


def _list_of(parse):
    def parse_list(text) -> tuple:
        items = text if isinstance(text, (list, tuple)) else _split(text)
        if not items:
            raise ValueError("List value cannot be empty")
        return tuple(parse(i) for i in items)
    return parse_list


PARSERS = {
    "resolution": resolve_resolution,
    "layers": int,
    "representation": _choice(REPRESENTATIONS),
    "samples": int,
    "coverage_samples": int,
    "voxels": int,
    "seed": int,
    "workers": int,
    "rotations": _choice(("identity", "octahedral", "refined")),
    "fusion": _choice(tuple(FUSION_RULES)),
    "tau": float,
    "coverage_tol": float,
    "parallel_cos_threshold": float,
    "perturb_sigma": float,
    "store_normals": _bool,
    "cache": _bool,
    "cache_dir": str,
    "resolutions": _list_of(resolve_resolution),
    "layer_counts": _list_of(int),
    "representations": _list_of(_choice(REPRESENTATIONS)),
    "mu": float,
    "zeta": float,
    "alpha": float,
    "beta": float,
    "highpass_radius_frac": float,
    "margin": int,
    "threshold_frac": float,
}
QUALITY_KEYS = tuple(f.name for f in fields(QualityWeights))


@dataclass(frozen=True)
class Settings:
    resolution: SphericalGrid = field(default_factory=lambda: SphericalGrid(*config.DEFAULT_RESOLUTION))
    layers: int = config.DEFAULT_LAYERS
    representation: str = "sp"
    samples: int = config.DEFAULT_SAMPLES
    coverage_samples: int = 10_000
    voxels: int = config.DEFAULT_VOXELS
    seed: int = config.DEFAULT_SEED
    workers: int = config.SPMAP_WORKERS
    rotations: str = "octahedral"
    fusion: str = "majority"
    tau: float = config.F_SCORE_THRESHOLD
    coverage_tol: float = config.COVERAGE_TOLERANCE
    parallel_cos_threshold: float = config.PARALLEL_COS_THRESHOLD
    perturb_sigma: float = config.PERTURB_SIGMA
    store_normals: bool = False
    cache: bool = True
    cache_dir: str = config.SPMAP_CACHE_DIR
    resolutions: tuple = field(default_factory=lambda: tuple(SphericalGrid(h, 2 * h) for h in (32, 64, 128, 256)))
    layer_counts: tuple = (1, 2, 3, 4)
    representations: tuple = REPRESENTATIONS
    quality: QualityWeights = field(default_factory=QualityWeights)

    def __post_init__(self):
        if self.layers < 1 or any(k < 1 for k in self.layer_counts):
            raise OutOfRange("layer counts must be >= 1")
        if self.samples < 1 or self.coverage_samples < 1 or self.voxels < 8:
            raise OutOfRange("samples must be >= 1 and voxels >= 8")
        if self.workers < 1:
            raise OutOfRange(f"workers must be >= 1, got {self.workers}")
        if "sp" in self.representations and any(g.width != 2 * g.height for g in self.resolutions):
            raise OutOfRange("sweep resolutions must keep W = 2H")

    def encode_config(self, grid: SphericalGrid | None = None, k: int | None = None) -> EncodeConfig:
        return EncodeConfig(
            grid=grid or self.resolution,
            k=k or self.layers,
            parallel_cos_threshold=self.parallel_cos_threshold,
            perturb_sigma=self.perturb_sigma,
            store_normals=self.store_normals,
            seed=self.seed,
        )

    def rotation_set(self):
        return rotation_set(self.rotations)

    def as_dict(self) -> dict:
        """JSON-ready view embedded in every report; excludes machine-local keys."""
        out = {}
        for f in fields(self):
            if f.name in ("workers", "cache", "cache_dir"):
                continue
            value = getattr(self, f.name)
            if isinstance(value, SphericalGrid):
                value = f"{value.height}x{value.width}"
            elif f.name == "resolutions":
                value = [f"{g.height}x{g.width}" for g in value]
            elif isinstance(value, QualityWeights):
                value = value.as_dict()
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out


def read_config_file(path) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in PARSERS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def resolve_settings(overrides: dict | None = None, config_path=None) -> Settings:
    """Defaults, then config file values, then CLI overrides (None means not given)."""
    raw: dict = {}
    if config_path:
        raw.update(read_config_file(config_path))
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None and k in PARSERS})
    parsed = {}
    for key, value in raw.items():
        parse = PARSERS[key]
        parsed[key] = parse(value) if isinstance(value, str) else value
    quality = {k: parsed.pop(k) for k in QUALITY_KEYS if k in parsed}
    settings = Settings(**parsed)
    if quality:
        settings = replace(settings, quality=QualityWeights(**quality))
    return settings


def config_hash(payload: dict) -> str:
    return hashlib.sha1(json.dumps(payload, sort_keys=True).encode()).hexdigest()


# --- Corpus manifests ---

@dataclass(frozen=True)
class ManifestEntry:
    mesh_id: str
    source: str
    watertight: bool


def load_manifest(manifest: str) -> list[ManifestEntry]:
    """
    'desk' selects the procedural corpus; otherwise a CSV file with columns
    mesh_id,path,watertight. Relative paths resolve against the manifest's folder.
    """
    if manifest == DESK_MANIFEST:
        return [ManifestEntry(name, FIXTURE_PREFIX + name, wt) for name, (_, wt) in sorted(desk_corpus().items())]
    path = Path(manifest)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(line for line in fh if not line.lstrip().startswith("#")):
            try:
                source = row["path"].strip()
                if not source.startswith(FIXTURE_PREFIX) and not Path(source).is_absolute():
                    source = str(path.parent / source)
                entries.append(ManifestEntry(row["mesh_id"].strip(), source, _bool(row.get("watertight", "true"))))
            except KeyError as e:
                raise ValueError(f"{path}: missing column {e}")
    ids = [e.mesh_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate mesh ids")
    if not entries:
        raise ValueError(f"{path}: manifest is empty")
    return entries


def settings_from_arguments(arguments: dict) -> Settings:
    """Settings for a CLI invocation: parsed flags override the --config file."""
    return resolve_settings({k: arguments.get(k) for k in PARSERS}, arguments.get("config"))
