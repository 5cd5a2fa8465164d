"""
Process-level configuration.

Defaults come from the environment (optionally a .env file). Run-specific
parameters live in the INI run configs (see src/run_config.py); values here
only fill in what a run config and the CLI flags leave open.
"""
import logging
import os

from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _env_bool(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in ("1", "true", "yes", "on")


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"⚠️ {name}={raw!r} is not an integer, using {default}")
        return default


class Config:
    """
    Environment defaults with validation.

    Variables:
    - PATCHLAB_LOG_LEVEL: console log level (INFO)
    - PATCHLAB_LOG_JSON: JSON log lines on the console (false)
    - PATCHLAB_LOG_FILE / PATCHLAB_LOG_DIR: optional JSON log file
    - PATCHLAB_OUTPUT_DIR: root for result directories (results)
    - PATCHLAB_SEED: global seed when neither --seed nor [run] seed is given (0)
    - PATCHLAB_THREADS: worker count for independent trials (1)
    """

    # --- LOGGING ---
    LOG_LEVEL = os.getenv("PATCHLAB_LOG_LEVEL", "INFO").upper()
    LOG_JSON = _env_bool("PATCHLAB_LOG_JSON", False)
    LOG_FILE = os.getenv("PATCHLAB_LOG_FILE") or None
    LOG_DIR = os.getenv("PATCHLAB_LOG_DIR", "logs")

    # --- RUNS ---
    OUTPUT_DIR = os.getenv("PATCHLAB_OUTPUT_DIR", "results")
    SEED = _env_int("PATCHLAB_SEED", 0)
    THREADS = _env_int("PATCHLAB_THREADS", 1)

    @classmethod
    def validate(cls) -> dict:
        """
        Validate configuration and return status.
        Does NOT raise exceptions - returns validation results.

        Returns:
            dict with keys: valid, warnings, errors
        """
        result = {
            "valid": True,
            "warnings": [],
            "errors": [],
        }

        if cls.LOG_LEVEL not in _LEVELS:
            result["errors"].append(f"PATCHLAB_LOG_LEVEL={cls.LOG_LEVEL} is not one of {', '.join(_LEVELS)}")
            result["valid"] = False

        if cls.THREADS < 1:
            result["errors"].append(f"PATCHLAB_THREADS must be >= 1, got {cls.THREADS}")
            result["valid"] = False

        if cls.SEED < 0 or cls.SEED >= 2 ** 64:
            result["errors"].append(f"PATCHLAB_SEED must fit in an unsigned 64-bit integer, got {cls.SEED}")
            result["valid"] = False

        if cls.THREADS > (os.cpu_count() or 1):
            result["warnings"].append(
                f"PATCHLAB_THREADS={cls.THREADS} exceeds the {os.cpu_count()} available CPUs"
            )

        if result["errors"]:
            logger.error(f"❌ Configuration errors: {result['errors']}")
        for warning in result["warnings"]:
            logger.warning(f"⚠️ {warning}")

        return result

    @classmethod
    def get_effective_threads(cls, requested: int = None) -> int:
        """CLI --threads wins; invalid values fall back to one worker."""
        threads = requested if requested is not None else cls.THREADS
        if threads < 1:
            logger.warning(f"threads={threads} is invalid, falling back to 1")
            return 1
        return threads

