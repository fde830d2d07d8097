# backend/config.py

import os
from dotenv import load_dotenv

# Load environment variables from .env
load_dotenv()

# --- Simulation defaults (overridable per scenario file / CLI flag) ---
DEFAULT_SEED = int(os.getenv("TRIALDESIGN_SEED", "20240611"))
DEFAULT_REPLICATES = int(os.getenv("TRIALDESIGN_REPLICATES", "10000"))
DEFAULT_THREADS = int(os.getenv("TRIALDESIGN_THREADS", "1"))
DEFAULT_GRID_POINTS = int(os.getenv("TRIALDESIGN_GRID_POINTS", "21"))
DEFAULT_REPS_PER_CELL = int(os.getenv("TRIALDESIGN_REPS_PER_CELL", "2000"))

OUTPUT_DIR = os.getenv("TRIALDESIGN_OUTPUT_DIR", "output")
LOG_LEVEL = os.getenv("TRIALDESIGN_LOG_LEVEL", "INFO").upper()

# --- Recency assay uncertainty (not published with the assay estimates) ---
SE_MDRI_RELATIVE = float(os.getenv("TRIALDESIGN_SE_MDRI_RELATIVE", "0.05"))
SE_FRR = float(os.getenv("TRIALDESIGN_SE_FRR", "0.0025"))

# --- Fixed conventions ---
DAYS_PER_YEAR = 365.25
ZERO_EVENT_CORRECTION = 0.5
MARGIN_CONFIDENCE_QUANTILE = 0.025  # the "95%" in 95%-95%

if DEFAULT_REPLICATES < 1:
    raise RuntimeError("TRIALDESIGN_REPLICATES must be at least 1. Check your .env file.")
