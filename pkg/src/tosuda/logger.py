import logging
import sys

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logger(log_level="INFO", log_file=None):
    """
    Configure the ``tosuda`` logger.

    Records always go to stderr. With ``log_file``, they are also written to
    that file (truncated), replacing any run log set up by an earlier call.
    """
    logger = logging.getLogger("tosuda")
    logger.setLevel(log_level)
    formatter = logging.Formatter(LOG_FORMAT)

    for handler in list(logger.handlers):
        if isinstance(handler, logging.FileHandler):
            logger.removeHandler(handler)
            handler.close()

    if not logger.handlers:
        console = logging.StreamHandler(sys.stderr)
        console.setFormatter(formatter)
        logger.addHandler(console)

    if log_file is not None:
        run_log = logging.FileHandler(log_file, mode="w")
        run_log.setFormatter(formatter)
        logger.addHandler(run_log)

    for handler in logger.handlers:
        handler.setLevel(log_level)

    return logger


logger = setup_logger()
