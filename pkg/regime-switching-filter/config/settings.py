import os
import logging
from dotenv import load_dotenv

load_dotenv()


class Settings:
    # unset means the [output] section or DEFAULT_OUTPUT_DIR decides
    OUTPUT_DIR = os.getenv("REGIME_FILTER_OUTPUT_DIR")
    DEFAULT_OUTPUT_DIR = "output"
    THREADS = int(os.getenv("REGIME_FILTER_THREADS", "0") or 0)
    LOG_LEVEL = os.getenv("REGIME_FILTER_LOG_LEVEL", "INFO")
    SHOW_PROGRESS = os.getenv("REGIME_FILTER_PROGRESS", "1") not in ("0", "false", "no")

    QUAD_ORDER = 64
    RESAMPLE_THRESHOLD = 0.5
    PSI_PATH_SAMPLES = 2000
    ORACLE_X_CELLS = 200
    ORACLE_V_CELLS = 256
    ORACLE_BUDGET = 200_000_000


def setup_logging(level: str | None = None) -> None:
    logging.basicConfig(
        format="%(message)s",
        level=getattr(logging, (level or Settings.LOG_LEVEL).upper(), logging.INFO),
    )
