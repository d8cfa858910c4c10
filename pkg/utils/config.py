"""
Configuration utilities for the SMS reconstruction toolkit.

Every knob lives in a pydantic model with ``extra="forbid"`` so that a typo in a
run file is reported instead of silently ignored.  Process-level settings
(debug mode, log directory, FFT worker threads) come from the environment.
"""
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .logging_utils import logger, ConfigError


# Load environment variables from .env file if it exists
load_dotenv()


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SmsReconSettings(BaseModel):
    """Process-level settings read from the environment."""

    debug_mode: bool = Field(
        default_factory=lambda: os.getenv("SMS_DEBUG_MODE", "false").lower() == "true",
        description="Enable debug mode for verbose logging"
    )

    log_dir: str = Field(
        default_factory=lambda: os.getenv("SMS_LOG_DIR", "logs"),
        description="Directory for the rotating error log"
    )

    fft_workers: int = Field(
        default_factory=lambda: os.getenv("SMS_FFT_WORKERS", "1"),
        validate_default=True,
        ge=1,
        description="Worker threads for per-plane FFTs"
    )


class PhantomSpec(_Strict):
    """Synthetic ground-truth geometry."""

    n_slice: int = Field(3, ge=1)
    n_coil: int = Field(8, ge=1)
    grid: Tuple[int, int] = (60, 60)
    seed: int = 0
    shape_family: Literal["ellipses", "blobs"] = "ellipses"


class SamplingConfig(_Strict):
    accel: int = Field(3, ge=1, description="In-plane acceleration R")
    acs_lines: int = Field(32, ge=0)
    caipi_increment: float = Field(2.0 * math.pi / 3.0, description="Radians per ky line per slice index")
    noise_std: float = Field(0.0, ge=0.0)


class CalibrationConfig(_Strict):
    kernel_size: Tuple[int, int] = (5, 5)
    tikhonov: Optional[float] = Field(None, ge=0.0, description="None selects 1e-4*||A||_F^2/n_rows")

    @field_validator("kernel_size")
    @classmethod
    def _odd(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if any(k < 1 or k % 2 == 0 for k in value):
            raise ValueError(f"kernel_size must be odd and positive, got {value}")
        return value


class SgspConfig(_Strict):
    max_iters: int = Field(100, ge=1)
    step_size: Union[Literal["auto"], float] = "auto"
    data_weight: float = Field(1.0, gt=0.0)
    tol: float = Field(1e-8, ge=0.0)
    solver: Literal["gradient", "cg"] = "cg"
    power_iters: int = Field(20, ge=1)
    patience: int = Field(5, ge=1, description="Consecutive increases tolerated with a fixed step")

    @field_validator("step_size")
    @classmethod
    def _positive_step(cls, value):
        if value != "auto" and value <= 0:
            raise ValueError("step_size must be positive or 'auto'")
        return value


class ScheduleConfig(_Strict):
    sigma_min: float = Field(0.01, gt=0.0)
    sigma_max: float = Field(10.0, gt=0.0)
    kappa: float = Field(1.0, ge=0.0)
    n_steps: int = Field(500, ge=1)
    eps: float = Field(1e-3, gt=0.0, lt=1.0)


class ProjectionConfig(_Strict):
    mu: float = Field(1e-2, gt=0.0)
    solver: Literal["auto", "direct", "cg"] = Field(
        "auto", description="direct needs CAIPIRINHA shifts of whole ky bins; auto falls back to CG otherwise"
    )
    max_iter: int = Field(50, ge=1, description="CG iterations when T is not solved directly")
    tol: float = Field(1e-6, ge=0.0)
    max_block_entries: int = Field(2**26, ge=1, description="Size cap of the per-frequency inverse blocks")


class SamplerConfig(_Strict):
    dc_weight: float = Field(1.0, ge=0.0)
    final_data_consistency: bool = True
    n_corrector: int = Field(0, ge=0)
    snr: float = Field(0.16, gt=0.0)
    clip_drift: bool = True
    log_every: int = Field(10, ge=1)
    init: Literal["zero_filled", "sgsp"] = "sgsp"


class ScoreNetConfig(_Strict):
    width: int = Field(32, ge=1)
    n_hidden: int = Field(3, ge=1)
    embed_dim: int = Field(32, ge=2)
    dtype: Literal["float32", "float64"] = "float32"


class TrainConfig(_Strict):
    steps: int = Field(200, ge=1)
    batch_size: int = Field(4, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    optimizer: Literal["adam"] = "adam"
    t_sampling: Literal["uniform"] = "uniform"
    loss_weight: Literal["sigma2"] = "sigma2"
    seed: int = 0
    checkpoint_every: int = Field(0, ge=0, description="0 disables intermediate checkpoints")
    n_phantoms: int = Field(20, ge=1)


class InputPaths(_Strict):
    y: Optional[str] = None
    plan: Optional[str] = None
    calib: Optional[str] = None
    kernels: Optional[str] = None
    checkpoint: Optional[str] = None
    truth: Optional[str] = None
    init: Optional[str] = None
    recon: Optional[str] = None
    tensor: Optional[str] = None


class RunConfig(_Strict):
    """Declarative run file: inputs by path plus every module's knobs."""

    seed: Optional[int] = None
    out_dir: str = "runs/default"
    inputs: InputPaths = Field(default_factory=InputPaths)
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    sgsp: SgspConfig = Field(default_factory=SgspConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    projection: ProjectionConfig = Field(default_factory=ProjectionConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    score_net: ScoreNetConfig = Field(default_factory=ScoreNetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    def resolved(self) -> str:
        """Canonical JSON echo; feeding it back as a run file reproduces the run."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved().encode("utf-8")).hexdigest()


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build a RunConfig from an optional JSON run file and flag overrides.

    Args:
        path: Run file path, or None for defaults
        overrides: Nested dict of values that win over the file

    Returns:
        RunConfig: The validated configuration

    Raises:
        ConfigError: If the file is unreadable or contains unknown/invalid keys
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"Run file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Run file {path} is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"Run file {path} must hold a JSON object")

    try:
        config = RunConfig.model_validate(_merge(raw, overrides or {}))
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"Invalid run configuration: {problems}")

    logger.debug(f"Run configuration resolved (hash {config.config_hash()[:12]})")
    return config


def get_settings() -> SmsReconSettings:
    """
    Get the process-level settings.

    Returns:
        SmsReconSettings: The settings object

    Raises:
        ConfigError: If an environment value does not validate
    """
    try:
        return SmsReconSettings()
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(part) for part in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid environment settings (SMS_* variables): {problems}")
