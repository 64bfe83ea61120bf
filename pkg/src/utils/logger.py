"""Logging configuration and utilities using Loguru."""

import os
import sys
from pathlib import Path

from loguru import logger


def setup_logging(log_level: str = "INFO", log_dir: str | None = None) -> None:
    """
    Configure loguru logging for the application.

    Args:
        log_level: The logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_dir: Directory for the rotating log files (KDPL_LOG_DIR if unset)
    """
    # Remove default logger
    logger.remove()

    log_path = Path(log_dir or os.getenv("KDPL_LOG_DIR", "logs"))
    log_path.mkdir(parents=True, exist_ok=True)

    # Console logging with colors
    logger.add(
        sys.stdout,
        format=(
            "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | "
            "<level>{level: <8}</level> | "
            "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> | "
            "<level>{message}</level>"
        ),
        level=log_level,
        colorize=True,
    )

    file_format = (
        "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | "
        "{name}:{function}:{line} | {message}"
    )

    # File logging - general logs
    logger.add(
        log_path / "kdpl.log",
        format=file_format,
        level=log_level,
        rotation="10 MB",
        retention="7 days",
        compression="zip",
    )

    # File logging - training events only
    logger.add(
        log_path / "training_events.log",
        format=file_format,
        level="INFO",
        filter=lambda record: "TRAIN_EVENT" in record["extra"],
        rotation="5 MB",
        retention="30 days",
        compression="zip",
    )

    # File logging - teacher cache operations only
    logger.add(
        log_path / "cache_operations.log",
        format=file_format,
        level="DEBUG",
        filter=lambda record: "CACHE_OP" in record["extra"],
        rotation="5 MB",
        retention="7 days",
        compression="zip",
    )

    # File logging - errors only
    logger.add(
        log_path / "errors.log",
        format=file_format,
        level="ERROR",
        rotation="10 MB",
        retention="30 days",
        compression="zip",
    )


def get_training_logger():
    """Get a logger configured for training events."""
    return logger.bind(TRAIN_EVENT=True)


def get_cache_logger():
    """Get a logger configured for teacher cache operations."""
    return logger.bind(CACHE_OP=True)


def log_train_step(step: int, epoch: int, loss: float, lr: float) -> None:
    """
    Log a single optimizer step.

    Args:
        step: Global step counter
        epoch: Current epoch (1-based)
        loss: Batch loss after the forward pass
        lr: Learning rate used for the step
    """
    get_training_logger().debug(
        f"Train step - Epoch: {epoch}, Step: {step}, Loss: {loss:.6f}, "
        f"LR: {lr:.3g}"
    )


def log_epoch_event(event_type: str, data: dict) -> None:
    """
    Log an epoch-level training event.

    Args:
        event_type: Type of event (e.g., 'epoch_completed', 'prompt_aggregated')
        data: Dictionary containing event data
    """
    get_training_logger().info(f"Training event - Type: {event_type}, Data: {data}")


def log_selection_event(step: int, names: list[str], top_mass: float) -> None:
    """
    Log a class-agnostic selection.

    Args:
        step: Global step counter
        names: Selected class names (only a preview is logged)
        top_mass: Sum of the batch-mean teacher probability over the selection
    """
    preview = ", ".join(names[:5])
    get_training_logger().debug(
        f"Selection event - Step: {step}, K: {len(names)}, "
        f"Mass: {top_mass:.4f}, Head: [{preview}]"
    )


def log_run_event(event_type: str, data: dict) -> None:
    """
    Log an experiment-level event (run start, seed completed, resume).

    Args:
        event_type: Type of event
        data: Dictionary containing event data
    """
    get_training_logger().info(f"Run event - Type: {event_type}, Data: {data}")


def log_cache_operation(
    operation: str,
    path: str,
    hits: int = 0,
    misses: int = 0,
    success: bool = True,
    error: str | None = None,
) -> None:
    """
    Log teacher cache operations for monitoring and debugging.

    Args:
        operation: The cache operation (e.g., 'open', 'flush', 'lookup')
        path: The cache file
        hits: Cache hits served by the operation
        misses: Cache misses served by the operation
        success: Whether the operation was successful
        error: Error message if operation failed
    """
    cache_logger = get_cache_logger()

    if success:
        cache_logger.debug(
            f"Cache operation - File: {path}, Operation: {operation}, "
            f"Hits: {hits}, Misses: {misses}, Status: SUCCESS"
        )
    else:
        cache_logger.error(
            f"Cache operation - File: {path}, Operation: {operation}, "
            f"Status: FAILED, Error: {error}"
        )
