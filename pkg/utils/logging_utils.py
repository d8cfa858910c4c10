"""
Logging utilities and the error hierarchy for the SMS reconstruction toolkit.
"""
import os
import sys
from typing import Any, Dict

from loguru import logger


def setup_logging(debug_mode: bool = False, log_dir: str = "logs"):
    """
    Configure logging for the application.

    Args:
        debug_mode (bool): Whether to enable debug logging
        log_dir (str): Directory for the rotating error log
    """
    # Remove default logger
    logger.remove()

    # Determine log level based on debug mode
    log_level = "DEBUG" if debug_mode else "INFO"

    # Diagnostics go to stderr so stdout stays free for JSON echoes
    logger.add(
        sys.stderr,
        format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>",
        level=log_level,
        colorize=True,
    )

    # Add file handler for error logs
    os.makedirs(log_dir, exist_ok=True)
    logger.add(
        os.path.join(log_dir, "sms_diffusion_error.log"),
        format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}",
        level="ERROR",
        rotation="10 MB",
        retention="1 week",
    )

    logger.info(f"Logging initialized with level: {log_level}")
    return logger


class SmsReconError(Exception):
    """Base exception class for SMS reconstruction errors."""
    pass


class InvalidArgumentError(SmsReconError, ValueError):
    """Raised when an argument violates a precondition."""
    pass


class GeometryMismatchError(InvalidArgumentError):
    """Raised when tensors, kernels or plans disagree on their dimensions."""
    pass


class ConfigError(SmsReconError):
    """Raised when a run file or flag cannot be resolved."""
    pass


class ArtifactError(SmsReconError):
    """Raised when an input artifact is missing or unreadable."""
    pass


class TensorFormatError(SmsReconError):
    """Raised when a CT4F file is malformed."""
    pass


class BadMagicError(TensorFormatError):
    pass


class InvalidHeaderError(TensorFormatError):
    pass


class TruncatedFileError(TensorFormatError):
    pass


class PayloadSizeError(TensorFormatError):
    """File holds more bytes than the header declares."""
    pass


class CalibrationError(SmsReconError):
    """Raised when a kernel fit is under-determined."""
    pass


class SolverError(SmsReconError):
    """Raised when a linear solve cannot be carried out."""
    pass


class StepSizeError(SmsReconError):
    """Raised when fixed-step gradient descent diverges."""
    pass


class OperatorDefectError(SmsReconError):
    """Raised when CG meets negative curvature on a supposedly PSD operator."""
    pass


class DivergenceError(SmsReconError):
    """Raised when a sampler iterate becomes non-finite."""
    pass


class TrainingError(SmsReconError):
    """Raised when score-model training produces a non-finite loss."""
    pass


# category, exit code; first match wins so subclasses come first
_ERROR_TABLE = (
    (ConfigError, "config_error", 2),
    (ArtifactError, "missing_file", 3),
    (FileNotFoundError, "missing_file", 3),
    (TensorFormatError, "format_error", 4),
    (GeometryMismatchError, "geometry_mismatch", 5),
    (InvalidArgumentError, "invalid_argument", 2),
    (CalibrationError, "calibration_error", 6),
    (SolverError, "solver_error", 6),
    (StepSizeError, "step_size_error", 6),
    (OperatorDefectError, "operator_defect", 6),
    (DivergenceError, "divergence_error", 6),
    (TrainingError, "training_error", 7),
)


def handle_exception(exc: Exception) -> Dict[str, Any]:
    """
    Handle exceptions and return appropriate error messages.

    Args:
        exc (Exception): The exception to handle

    Returns:
        dict: A dictionary with error category, message and CLI exit code
    """
    error_type = type(exc).__name__
    error_msg = str(exc)

    for exc_type, category, exit_code in _ERROR_TABLE:
        if isinstance(exc, exc_type):
            logger.error(f"{category}: {error_msg}")
            return {"error": category, "message": error_msg, "exit_code": exit_code}

    # Generic error handling
    logger.error(f"Unexpected error ({error_type}): {error_msg}")
    return {"error": "unexpected_error", "message": f"{error_type}: {error_msg}", "exit_code": 1}
