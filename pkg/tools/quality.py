"""Quality command: compare a candidate SP map against a reference."""
import json
import logging
from pathlib import Path

from services.sp_core import read_spm
from services.sp_quality import combined_quality
from tools.settings import settings_from_arguments

log = logging.getLogger(__name__)

COMMANDS = [
    {
        "name": "quality",
        "description": "Edge-weighted, spectral and L1 scores of a candidate SPM against a reference SPM.",
        "arguments": [
            {"flags": ["cand"], "help": "candidate SPM file"},
            {"flags": ["ref"], "help": "reference SPM file"},
            {"flags": ["--mu"], "help": "weight of masked (edge) pixels, in [0, 1]"},
            {"flags": ["--zeta"], "help": "magnitude term weight in the spectral loss"},
            {"flags": ["--alpha"], "help": "edge-weighted L1 weight in the total"},
            {"flags": ["--beta"], "help": "spectral loss weight in the total"},
            {"flags": ["--margin"], "help": "edge mask dilation in pixels"},
        ],
        "options": ["out", "config"],
    },
]


def execute_quality_command(command: str, arguments: dict):
    """Execute a quality command."""
    if command != "quality":
        raise ValueError(f"Unknown quality command: {command}")
    weights = settings_from_arguments(arguments).quality
    cand, ref = read_spm(arguments["cand"]), read_spm(arguments["ref"])
    scores = combined_quality(cand, ref, weights)
    log.info("Quality %s vs %s: total %.6g", arguments["cand"], arguments["ref"], scores.total)
    result = {
        "cand": str(arguments["cand"]),
        "ref": str(arguments["ref"]),
        "weights": weights.as_dict(),
        "scores": scores.as_dict(),
    }
    if arguments.get("out"):
        out = Path(arguments["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result
