"""Unit tests for logger.py."""

import logging

from tosuda.logger import setup_logger


def test_run_log_file(tmp_path):
    """Test the optional run log file."""
    # This test verifies that:
    # 1. Records reach the log file in the shared format
    # 2. A later setup call replaces the file handler instead of adding one
    # 3. Without a log file only the console handler remains
    first = tmp_path / "first.log"
    logger = setup_logger("INFO", first)
    logger.info("epoch done")
    assert " - tosuda - INFO - epoch done" in first.read_text()

    second = tmp_path / "second.log"
    setup_logger("DEBUG", second)
    file_handlers = [h for h in logger.handlers if isinstance(h, logging.FileHandler)]
    assert len(file_handlers) == 1
    logger.debug("step")
    assert "step" in second.read_text()
    assert "step" not in first.read_text()

    setup_logger("INFO")
    assert not any(isinstance(h, logging.FileHandler) for h in logger.handlers)
    assert all(h.level == logging.INFO for h in logger.handlers)
