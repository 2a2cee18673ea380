"""Load configuration from environment."""
import os
from dotenv import load_dotenv

load_dotenv()

SPMAP_WORKERS = int(os.getenv("SPMAP_WORKERS", "1"))
SPMAP_CACHE_DIR = os.getenv("SPMAP_CACHE_DIR", "data/cache")
SPMAP_DB_PATH = os.getenv("SPMAP_DB_PATH", "data/spmap.db")
SPMAP_LOG_LEVEL = os.getenv("SPMAP_LOG_LEVEL", "INFO")

ENCODER_VERSION = 1

# Codec defaults
DEFAULT_RESOLUTION = (256, 512)
DEFAULT_LAYERS = 4
PARALLEL_COS_THRESHOLD = 1e-4
PERTURB_SIGMA = 1e-5

# Evaluation defaults
DEFAULT_SAMPLES = 100_000
DEFAULT_VOXELS = 64
DEFAULT_SEED = 0
F_SCORE_THRESHOLD = 0.1
COVERAGE_TOLERANCE = 0.01
