"""
Utilities for the SMS reconstruction toolkit.
"""

from loguru import logger

from .logging_utils import (
    setup_logging,
    SmsReconError,
    InvalidArgumentError,
    GeometryMismatchError,
    ConfigError,
    ArtifactError,
    TensorFormatError,
    BadMagicError,
    InvalidHeaderError,
    TruncatedFileError,
    PayloadSizeError,
    CalibrationError,
    SolverError,
    StepSizeError,
    OperatorDefectError,
    DivergenceError,
    TrainingError,
    handle_exception,
)

from .config import (
    get_settings,
    load_run_config,
    SmsReconSettings,
    PhantomSpec,
    SamplingConfig,
    CalibrationConfig,
    SgspConfig,
    ScheduleConfig,
    ProjectionConfig,
    SamplerConfig,
    ScoreNetConfig,
    TrainConfig,
    InputPaths,
    RunConfig,
)

__all__ = [
    "setup_logging",
    "logger",
    "SmsReconError",
    "InvalidArgumentError",
    "GeometryMismatchError",
    "ConfigError",
    "ArtifactError",
    "TensorFormatError",
    "BadMagicError",
    "InvalidHeaderError",
    "TruncatedFileError",
    "PayloadSizeError",
    "CalibrationError",
    "SolverError",
    "StepSizeError",
    "OperatorDefectError",
    "DivergenceError",
    "TrainingError",
    "handle_exception",
    "get_settings",
    "load_run_config",
    "SmsReconSettings",
    "PhantomSpec",
    "SamplingConfig",
    "CalibrationConfig",
    "SgspConfig",
    "ScheduleConfig",
    "ProjectionConfig",
    "SamplerConfig",
    "ScoreNetConfig",
    "TrainConfig",
    "InputPaths",
    "RunConfig",
]
