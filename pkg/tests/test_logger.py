import pytest
from loguru import logger

from src.utils.logger import (
    log_cache_operation,
    log_epoch_event,
    setup_logging,
)


@pytest.fixture
def log_dir(tmp_path):
    setup_logging("DEBUG", str(tmp_path))
    yield tmp_path
    logger.remove()


def _read(path):
    logger.complete()
    return path.read_text(encoding="utf-8") if path.exists() else ""


class TestSinks:
    def test_cache_operations_have_their_own_file(self, log_dir):
        log_cache_operation("flush", "teacher.kdpc", hits=3, misses=1)
        log_epoch_event("epoch_completed", {"epoch": 1})

        cache_log = _read(log_dir / "cache_operations.log")
        assert "Operation: flush" in cache_log
        assert "Hits: 3" in cache_log
        assert "epoch_completed" not in cache_log

        training_log = _read(log_dir / "training_events.log")
        assert "epoch_completed" in training_log
        assert "Operation: flush" not in training_log

    def test_failed_cache_operation_reaches_the_error_log(self, log_dir):
        log_cache_operation("flush", "teacher.kdpc", success=False, error="disk full")
        assert "Status: FAILED" in _read(log_dir / "cache_operations.log")
        assert "disk full" in _read(log_dir / "errors.log")
