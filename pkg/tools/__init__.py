"""Command definitions and execution for the spmap CLI."""
import json
import logging

import numpy as np

from services.errors import EvaluationError, SpmapError
from tools.codec import COMMANDS as CODEC_COMMANDS, execute_codec_command
from tools.evaluate import COMMANDS as EVALUATE_COMMANDS, execute_evaluate_command
from tools.quality import COMMANDS as QUALITY_COMMANDS, execute_quality_command

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_EVALUATION = 1
EXIT_USAGE = 2

# Options shared across commands; values stay strings until tools.settings parses them
COMMON_OPTIONS = {
    "res": {"flags": ["--res"], "dest": "resolution", "help": "grid as HxW, a bare H (H x 2H) or TINY/LOW/MEDIUM/FULL"},
    "layers": {"flags": ["--layers"], "help": "layer count K"},
    "repr": {"flags": ["--repr"], "dest": "representation", "choices": ["sp", "nested"], "help": "representation"},
    "samples": {"flags": ["--samples"], "help": "surface samples per mesh for CD / F-Score"},
    "voxels": {"flags": ["--voxels"], "help": "occupancy / IoU grid resolution"},
    "seed": {"flags": ["--seed"], "help": "seed for sampling and ray perturbation"},
    "out": {"flags": ["--out", "-o"], "help": "output file (or directory for roundtrip/sweep)"},
    "config": {"flags": ["--config"], "help": "key = value config file"},
    "workers": {"flags": ["--workers"], "help": "parallel sweep workers (env SPMAP_WORKERS)"},
    "rotations": {"flags": ["--rotations"], "choices": ["identity", "octahedral", "refined"],
                  "help": "rotation search set for alignment (default octahedral)"},
    "normals": {"flags": ["--normals"], "dest": "store_normals", "action": "store_const", "const": "true",
                "help": "store per-hit normals in the SPM file"},
    "no_cache": {"flags": ["--no-cache"], "dest": "cache", "action": "store_const", "const": "false",
                 "help": "bypass the SPM encode cache"},
}

COMMANDS_SCHEMA = CODEC_COMMANDS + EVALUATE_COMMANDS + QUALITY_COMMANDS
AVAILABLE_COMMANDS = {
    "encode": execute_codec_command,
    "decode": execute_codec_command,
    "info": execute_codec_command,
    "coverage": execute_codec_command,
    "roundtrip": execute_evaluate_command,
    "sweep": execute_evaluate_command,
    "quality": execute_quality_command,
}


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


def execute_command(name: str, arguments: dict) -> tuple[int, str]:
    """Execute a command; returns (exit code, JSON result or error message)."""
    if name not in AVAILABLE_COMMANDS:
        return EXIT_USAGE, f"Unknown command: {name}"

    fn = AVAILABLE_COMMANDS[name]
    try:
        result = fn(name, arguments)
        return EXIT_OK, json.dumps(result, indent=2, sort_keys=True, default=_json_default)
    except EvaluationError as e:
        return EXIT_EVALUATION, f"{type(e).__name__}: {e}"
    except (ValueError, OSError, KeyError, SpmapError) as e:
        return EXIT_USAGE, f"{type(e).__name__}: {e}"
    except Exception as e:
        log.exception("Command %s failed", name)
        return EXIT_EVALUATION, f"{type(e).__name__}: {e}"
