"""
Structured logging for the attention patch lab.

Features:
- JSON formatted logs (one object per line) for batch runs and log files
- Human-readable colored console logs for interactive use
- Run/stage correlation through context variables
- Execution time decorator
- Specialized loggers for training, attacks and sweeps

Log output never goes into result directories: result files must stay
byte-identical across re-runs, log lines carry timestamps.
"""

import json
import logging
import sys
import time
import traceback
import uuid
from contextvars import ContextVar
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from functools import wraps
from pathlib import Path
from typing import Any, Dict, Optional

from src.exceptions import LabError

run_id_var: ContextVar[str] = ContextVar("run_id", default="no-run-id")
stage_var: ContextVar[str] = ContextVar("stage", default="")

_RESERVED = {
    "name", "msg", "args", "created", "filename", "funcName", "levelname", "levelno",
    "lineno", "module", "msecs", "pathname", "process", "processName", "relativeCreated",
    "stack_info", "exc_info", "exc_text", "thread", "threadName", "taskName", "message",
    "run_id", "stage", "duration_ms",
}


@dataclass
class LogRecord:
    """Structured log record with all relevant fields."""
    timestamp: str
    level: str
    logger: str
    message: str
    run_id: str = ""
    stage: str = ""
    duration_ms: Optional[float] = None
    extra: Dict[str, Any] = field(default_factory=dict)
    error: Optional[Dict[str, Any]] = None

    def to_json(self) -> str:
        data = {k: v for k, v in asdict(self).items() if v is not None and v != "" and v != {}}
        return json.dumps(data, ensure_ascii=False, default=str)


class JSONFormatter(logging.Formatter):
    """One JSON object per log line."""

    def format(self, record: logging.LogRecord) -> str:
        log_record = LogRecord(
            timestamp=datetime.now(timezone.utc).isoformat(),
            level=record.levelname,
            logger=record.name,
            message=record.getMessage(),
            run_id=run_id_var.get(),
            stage=stage_var.get(),
        )

        extra = {k: v for k, v in record.__dict__.items() if k not in _RESERVED and v is not None}
        if extra:
            log_record.extra = extra

        if hasattr(record, "duration_ms"):
            log_record.duration_ms = record.duration_ms

        if record.exc_info:
            log_record.error = {
                "type": record.exc_info[0].__name__ if record.exc_info[0] else "Unknown",
                "message": str(record.exc_info[1]) if record.exc_info[1] else "",
                "traceback": traceback.format_exception(*record.exc_info) if record.exc_info[0] else [],
            }

        return log_record.to_json()


class ConsoleFormatter(logging.Formatter):
    """Human-readable console formatter with colors."""

    COLORS = {
        "DEBUG": "\033[36m",
        "INFO": "\033[32m",
        "WARNING": "\033[33m",
        "ERROR": "\033[31m",
        "CRITICAL": "\033[35m",
    }
    RESET = "\033[0m"

    def format(self, record: logging.LogRecord) -> str:
        color = self.COLORS.get(record.levelname, "")
        timestamp = datetime.now().strftime("%H:%M:%S")
        prefix = f"{color}[{timestamp}] [{record.levelname:>8}]{self.RESET}"

        stage = stage_var.get()
        if stage:
            prefix += f" [{stage}]"

        message = f"{prefix} {record.name}: {record.getMessage()}"

        if hasattr(record, "duration_ms"):
            message += f" ({record.duration_ms:.2f}ms)"

        if record.exc_info:
            message += f"\n{traceback.format_exception(*record.exc_info)[-1].strip()}"

        return message


def setup_logging(
    level: str = "INFO",
    json_output: bool = False,
    log_file: Optional[str] = None,
    log_dir: str = "logs"
) -> logging.Logger:
    """
    Configure logging for the lab.

    Args:
        level: Log level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        json_output: Use JSON format for console output
        log_file: Optional file name; written as JSON lines under log_dir
        log_dir: Directory for log files

    Returns:
        Root logger instance
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, level.upper()))
    root_logger.handlers.clear()

    # stderr keeps stdout free for CLI summaries
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(getattr(logging, level.upper()))
    console_handler.setFormatter(JSONFormatter() if json_output else ConsoleFormatter())
    root_logger.addHandler(console_handler)

    if log_file:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(Path(log_dir) / log_file, encoding="utf-8")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(JSONFormatter())
        root_logger.addHandler(file_handler)

    return root_logger


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


# ═══════════════════════════════════════════════════════════════
# CONTEXT MANAGERS AND DECORATORS
# ═══════════════════════════════════════════════════════════════

class RunContext:
    """Context manager tagging every log line with a run id and stage."""

    def __init__(self, stage: str = "", run_id: Optional[str] = None):
        self.stage = stage
        self.run_id = run_id or run_id_var.get()
        if self.run_id == "no-run-id":
            self.run_id = uuid.uuid4().hex[:12]
        self._token_run = None
        self._token_stage = None

    def __enter__(self):
        self._token_run = run_id_var.set(self.run_id)
        self._token_stage = stage_var.set(self.stage)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        run_id_var.reset(self._token_run)
        stage_var.reset(self._token_stage)
        return False


def log_execution_time(logger: logging.Logger = None, level: int = logging.INFO, label: Optional[str] = None):
    """
    Log wall time of a run step as duration_ms.

    Lab errors are logged as one line (the CLI reports them); anything else
    keeps its traceback.

        @log_execution_time(label="controlled sweep")
        def controlled_sweep(...):
            ...
    """
    def decorator(func):
        name = label or func.__name__

        @wraps(func)
        def wrapper(*args, **kwargs):
            log = logger or logging.getLogger(func.__module__)
            started = time.perf_counter()

            def elapsed() -> Dict[str, Any]:
                return {"duration_ms": (time.perf_counter() - started) * 1000, "step": name}

            try:
                result = func(*args, **kwargs)
            except LabError as e:
                log.error(f"❌ {name} failed: {e}", extra=elapsed())
                raise
            except Exception as e:
                log.error(f"❌ {name} crashed: {e}", extra=elapsed(), exc_info=True)
                raise
            log.log(level, f"⏱️ {name} done", extra=elapsed())
            return result

        return wrapper
    return decorator


# ═══════════════════════════════════════════════════════════════
# SPECIALIZED LOGGERS
# ═══════════════════════════════════════════════════════════════

class TrainingLogger:
    """Per-epoch training progress."""

    def __init__(self):
        self.logger = logging.getLogger("patchlab.training")
        self._epochs = 0

    def log_epoch(self, epoch: int, loss: float, train_accuracy: float, val_accuracy: Optional[float] = None):
        self._epochs += 1
        extra = {
            "event_type": "train_epoch",
            "epoch": epoch,
            "loss": round(loss, 6),
            "train_accuracy": round(train_accuracy, 4),
        }
        message = f"epoch {epoch}: loss={loss:.4f} train_acc={train_accuracy:.3f}"
        if val_accuracy is not None:
            extra["val_accuracy"] = round(val_accuracy, 4)
            message += f" val_acc={val_accuracy:.3f}"
        self.logger.info(message, extra=extra)


class AttackLogger:
    """Per-image attack outcomes and per-iteration debug traces."""

    def __init__(self):
        self.logger = logging.getLogger("patchlab.attack")

    def log_iteration(self, iteration: int, step_size: float, total: float, terms: Dict[str, float]):
        if not self.logger.isEnabledFor(logging.DEBUG):
            return
        extra = {
            "event_type": "pgd_iteration",
            "iteration": iteration,
            "step_size": step_size,
            "total_loss": total,
            **{f"term_{k}": v for k, v in terms.items()},
        }
        self.logger.debug(f"iter {iteration}: loss={total:.5f} step={step_size:.5f}", extra=extra)

    def log_image(self, image_id: int, label: int, clean_pred: int, attacked_pred: int,
                  success: bool, final_loss: float):
        extra = {
            "event_type": "attack_image",
            "image_id": image_id,
            "label": label,
            "clean_pred": clean_pred,
            "attacked_pred": attacked_pred,
            "success": success,
            "final_loss": final_loss,
        }
        self.logger.info(
            f"image {image_id}: label={label} clean={clean_pred} attacked={attacked_pred} "
            f"{'✅ fooled' if success else '❌ held'}",
            extra=extra
        )


class SweepLogger:
    """Controlled-setting grid cells."""

    def __init__(self):
        self.logger = logging.getLogger("patchlab.controlled")

    def log_cell(self, mu: float, w: float, d_k: int, median_epsilon: float, attained: int, seeds: int):
        extra = {
            "event_type": "sweep_cell",
            "mu": mu,
            "w": w,
            "d_k": d_k,
            "median_epsilon": median_epsilon,
            "attained": attained,
            "seeds": seeds,
        }
        self.logger.info(
            f"cell mu={mu} w={w} d_k={d_k}: median eps*={median_epsilon:.4f} ({attained}/{seeds} attained)",
            extra=extra
        )


# ═══════════════════════════════════════════════════════════════
# SINGLETON INSTANCES
# ═══════════════════════════════════════════════════════════════

_training_logger: Optional[TrainingLogger] = None
_attack_logger: Optional[AttackLogger] = None
_sweep_logger: Optional[SweepLogger] = None


def get_training_logger() -> TrainingLogger:
    global _training_logger
    if _training_logger is None:
        _training_logger = TrainingLogger()
    return _training_logger


def get_attack_logger() -> AttackLogger:
    global _attack_logger
    if _attack_logger is None:
        _attack_logger = AttackLogger()
    return _attack_logger


def get_sweep_logger() -> SweepLogger:
    global _sweep_logger
    if _sweep_logger is None:
        _sweep_logger = SweepLogger()
    return _sweep_logger


# ═══════════════════════════════════════════════════════════════
# QUICK SETUP
# ═══════════════════════════════════════════════════════════════

def configure_from_env():
    """Configure logging from the process-level Config."""
    from src.config import Config

    setup_logging(
        level=Config.LOG_LEVEL,
        json_output=Config.LOG_JSON,
        log_file=Config.LOG_FILE,
        log_dir=Config.LOG_DIR
    )
