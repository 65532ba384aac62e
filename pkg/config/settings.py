from pathlib import Path
import os
from dotenv import load_dotenv

BASE_DIR = Path(__file__).resolve().parent.parent
load_dotenv(BASE_DIR / ".env")

SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "laps-local-only")
DEBUG = os.getenv("LAPS_DEBUG", "0") == "1"

INSTALLED_APPS = [
    "targets",
    "integrators",
    "kernels",
    "adaptation",
    "diagnostics",
    "harness",
]

# No database: every test is a SimpleTestCase and runs are written to files.
DATABASES = {}

LAPS_VERSION = "1.0.0"

# --- Run defaults (CLI flags and --config files override these) ---
LAPS_CHAINS = int(os.getenv("LAPS_CHAINS", "4096"))
LAPS_SEED = int(os.getenv("LAPS_SEED", "0"))
LAPS_MAXITER = int(os.getenv("LAPS_MAXITER", "1000"))
# 0 means "use every available core"
LAPS_WORKERS = int(os.getenv("LAPS_WORKERS", "0"))
# chains per work unit; fixed so results do not depend on the worker count
LAPS_BLOCK_SIZE = int(os.getenv("LAPS_BLOCK_SIZE", "256"))
LAPS_OUTPUT_DIR = os.getenv("LAPS_OUTPUT_DIR", str(BASE_DIR / "runs"))

# --- Adaptation defaults ---
LAPS_C = float(os.getenv("LAPS_C", "0.025"))
LAPS_ALPHA = float(os.getenv("LAPS_ALPHA", "2.0"))
LAPS_FLUCTUATION_THRESHOLD = float(os.getenv("LAPS_FLUCTUATION_THRESHOLD", "0.01"))
LAPS_WINDOW_FRACTION = float(os.getenv("LAPS_WINDOW_FRACTION", "0.2"))
LAPS_ACCEPTANCE_TOLERANCE = float(os.getenv("LAPS_ACCEPTANCE_TOLERANCE", "0.03"))
LAPS_HUTCHINSON_PROBES = int(os.getenv("LAPS_HUTCHINSON_PROBES", "100"))
LAPS_EQUIPARTITION = os.getenv("LAPS_EQUIPARTITION", "diagonal")

LAPS_BENCH_SUITE = {
    "targets": [
        {"target": "banana"},
        {"target": "gaussian", "dim": 50},
        {"target": "icg", "dim": 100, "condition": 1e5},
    ],
    "chains": [256, 4096],
    "seeds": [0, 1, 2],
    "thresholds": [0.01],
}

LAPS_LOG_LEVEL = os.getenv("LAPS_LOG_LEVEL", "INFO")

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "loggers": {
        app: {"handlers": ["console"], "level": LAPS_LOG_LEVEL, "propagate": False}
        for app in INSTALLED_APPS
    },
}
