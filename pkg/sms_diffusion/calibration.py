"""
SPIRiT and slice-GRAPPA kernel calibration by ridge-regularised least squares.

Kernels are stored as (n_coil_out, n_coil_in, kh, kw) arrays applied in
correlation form:

    out[o, y, x] = sum_{c, dy, dx} W[o, c, dy, dx] * in[c, y + dy - hy, x + dx - hx]

with hy = kh // 2, hx = kw // 2. Only interior targets whose whole neighbourhood
lies inside the calibration block enter the fit.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg

from utils import logger, InvalidArgumentError, GeometryMismatchError, CalibrationError, SolverError, ArtifactError

from .file_utils import PathLike, atomic_write_json, read_json
from .simulation import SamplingPlan, acs_start, caipi_demodulate
from .tensor_core import ComplexTensor4, Domain, Tensorish, as_array, read_tensor, write_tensor

DEFAULT_RIDGE_SCALE = 1e-4


@dataclass(frozen=True)
class KernelSet:
    """Per-slice kernels, dims (n_slice, n_coil_out, n_coil_in, kh, kw)."""

    kernels: np.ndarray
    tikhonov: List[float] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)

    kind = "kernels"

    def __post_init__(self):
        kernels = np.asarray(self.kernels)
        if kernels.ndim != 5:
            raise InvalidArgumentError(f"Kernel set needs 5 axes (slice, out, in, kh, kw), got {kernels.shape}")
        if kernels.shape[-2] % 2 == 0 or kernels.shape[-1] % 2 == 0:
            raise InvalidArgumentError(f"Kernel size must be odd, got {kernels.shape[-2:]}")
        object.__setattr__(self, "kernels", kernels.astype(np.complex128))

    @property
    def n_slice(self) -> int:
        return int(self.kernels.shape[0])

    @property
    def n_coil(self) -> int:
        return int(self.kernels.shape[2])

    @property
    def kernel_size(self) -> Tuple[int, int]:
        return int(self.kernels.shape[-2]), int(self.kernels.shape[-1])


@dataclass(frozen=True)
class SpiritKernelSet(KernelSet):
    """G_i per slice; the self-coil centre tap is exactly zero."""

    kind = "spirit"

    def __post_init__(self):
        super().__post_init__()
        hy, hx = self.kernel_size[0] // 2, self.kernel_size[1] // 2
        diag = np.arange(min(self.kernels.shape[1], self.kernels.shape[2]))
        if np.any(self.kernels[:, diag, diag, hy, hx] != 0):
            raise InvalidArgumentError("SPIRiT kernels must have a zero self-coil centre tap")


@dataclass(frozen=True)
class SliceGrappaKernelSet(KernelSet):
    """K_i per slice, mapping collapsed multi-coil k-space to slice i."""

    caipi_increment: float = 0.0

    kind = "slice_grappa"


def _ridge_weight(tikhonov: Optional[float], A: np.ndarray) -> float:
    if tikhonov is None:
        return DEFAULT_RIDGE_SCALE * float(np.linalg.norm(A) ** 2) / A.shape[0]
    if tikhonov < 0:
        raise InvalidArgumentError(f"Tikhonov weight must be >= 0, got {tikhonov}")
    return float(tikhonov)


def _patches(source: np.ndarray, kernel_size: Tuple[int, int]) -> np.ndarray:
    """Neighbourhood matrix: one row per interior target, columns ordered (c, dy, dx)."""
    kh, kw = kernel_size
    windows = np.lib.stride_tricks.sliding_window_view(source, (kh, kw), axis=(-2, -1))
    n_c, n_y, n_x = windows.shape[:3]
    return windows.transpose(1, 2, 0, 3, 4).reshape(n_y * n_x, n_c * kh * kw)


def _interior(target: np.ndarray, kernel_size: Tuple[int, int]) -> np.ndarray:
    hy, hx = kernel_size[0] // 2, kernel_size[1] // 2
    n_y, n_x = target.shape[-2:]
    block = target[:, hy : n_y - hy, hx : n_x - hx]
    return block.reshape(block.shape[0], -1).T


def _check_block(block: np.ndarray, kernel_size: Tuple[int, int], name: str) -> None:
    kh, kw = kernel_size
    if kh % 2 == 0 or kw % 2 == 0 or kh < 1 or kw < 1:
        raise InvalidArgumentError(f"Kernel size must be odd and positive, got {kernel_size}")
    if block.shape[-2] < kh + 2 or block.shape[-1] < kw + 2:
        raise CalibrationError(
            f"{name} block {block.shape[-2:]} is smaller than the kernel plus a one-point margin ({kh + 2}, {kw + 2})"
        )


def build_calibration_system(
    source: np.ndarray, target: np.ndarray, kernel_size: Tuple[int, int]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Least-squares system for correlation kernels.

    Args:
        source: (C, Y, X) calibration k-space feeding the kernel
        target: (O, Y, X) calibration k-space to reproduce
        kernel_size: (kh, kw), both odd

    Returns:
        (A, B): A has one row per interior target and columns (c, dy, dx);
        B holds the matching targets, one column per output coil
    """
    _check_block(source, kernel_size, "Calibration")
    if source.shape[-2:] != target.shape[-2:]:
        raise GeometryMismatchError(f"Source {source.shape} and target {target.shape} grids differ")
    return _patches(source, kernel_size), _interior(target, kernel_size)


def ridge_solve(A: np.ndarray, B: np.ndarray, lam: float) -> np.ndarray:
    """
    argmin_W ||A W - B||_F^2 + lam ||W||_F^2.

    Cholesky on the normal matrix, with a dense lstsq on the augmented system
    as fallback.
    """
    n_rows, n_cols = A.shape
    if n_rows < n_cols and lam == 0:
        raise CalibrationError(f"Under-determined calibration: {n_rows} targets for {n_cols} kernel taps")
    if lam == 0 and np.linalg.matrix_rank(A) < n_cols:
        raise SolverError("Calibration matrix is rank deficient; use a Tikhonov weight > 0")

    AhA = A.conj().T @ A
    AhB = A.conj().T @ B
    try:
        factor = scipy.linalg.cho_factor(AhA + lam * np.eye(n_cols), lower=False, check_finite=True)
        return scipy.linalg.cho_solve(factor, AhB)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        logger.warning("Cholesky failed on the calibration normal matrix; falling back to lstsq")
        A_aug = np.vstack([A, np.sqrt(lam) * np.eye(n_cols)])
        B_aug = np.vstack([B, np.zeros((n_cols, B.shape[1]), dtype=B.dtype)])
        return scipy.linalg.lstsq(A_aug, B_aug)[0]


def _relative_residual(A: np.ndarray, W: np.ndarray, B: np.ndarray) -> float:
    scale = np.linalg.norm(B)
    return float(np.linalg.norm(A @ W - B) / scale) if scale > 0 else 0.0


def _as_block(data: Tensorish, name: str) -> np.ndarray:
    if isinstance(data, ComplexTensor4) or np.ndim(data) >= 4:
        block = as_array(data, Domain.KSPACE, name)
    else:
        block = np.asarray(data, dtype=np.complex128)
    if block.ndim == 4:
        if block.shape[0] != 1:
            raise InvalidArgumentError(f"{name} must hold a single slice, got {block.shape}")
        block = block[0]
    if block.ndim != 3:
        raise InvalidArgumentError(f"{name} must be (coil, ky, kx), got {block.shape}")
    return block


def fit_spirit(
    acs: Tensorish, kernel_size: Tuple[int, int] = (5, 5), tikhonov: Optional[float] = None
) -> Tuple[np.ndarray, float, float]:
    """
    Fit one slice's SPIRiT kernel G with its self-coil centre tap held at zero.

    Args:
        acs: Calibration k-space of one slice, (1, C, Y, X) or (C, Y, X)
        kernel_size: Odd (kh, kw)
        tikhonov: Absolute ridge weight, or None for the scaled default

    Returns:
        (kernel (C, C, kh, kw), relative fit residual, ridge weight used)
    """
    block = _as_block(acs, "SPIRiT calibration")
    A, B = build_calibration_system(block, block, kernel_size)
    kh, kw = kernel_size
    n_coil = block.shape[0]
    taps = kh * kw
    centre = (kh // 2) * kw + kw // 2
    lam = _ridge_weight(tikhonov, A)

    kernel = np.zeros((n_coil, n_coil * taps), dtype=np.complex128)
    fitted = np.zeros_like(B)
    for o in range(n_coil):
        keep = np.ones(n_coil * taps, dtype=bool)
        keep[o * taps + centre] = False
        w = ridge_solve(A[:, keep], B[:, o : o + 1], lam)
        kernel[o, keep] = w[:, 0]
        fitted[:, o] = A[:, keep] @ w[:, 0]

    scale = np.linalg.norm(B)
    residual = float(np.linalg.norm(fitted - B) / scale) if scale > 0 else 0.0
    return kernel.reshape(n_coil, n_coil, kh, kw), residual, lam


def fit_spirit_set(
    acs_slices: Tensorish, kernel_size: Tuple[int, int] = (5, 5), tikhonov: Optional[float] = None
) -> SpiritKernelSet:
    """Fit G_i for every slice of unmodulated calibration data (S, C, Y, X)."""
    data = as_array(acs_slices, Domain.KSPACE, "SPIRiT calibration")
    kernels, ridges, residuals = [], [], []
    for i in range(data.shape[-4]):
        kernel, residual, lam = fit_spirit(data[i], kernel_size, tikhonov)
        kernels.append(kernel)
        ridges.append(lam)
        residuals.append(residual)
        logger.info(f"SPIRiT slice {i}: residual {residual:.3e} (ridge {lam:.3e})")
    return SpiritKernelSet(np.stack(kernels), ridges, residuals)


def fit_slice_grappa(
    calib_slices: Tensorish,
    calib_collapsed: Tensorish,
    kernel_size: Tuple[int, int] = (5, 5),
    tikhonov: Optional[float] = None,
    caipi_increment: float = 0.0,
) -> SliceGrappaKernelSet:
    """
    Fit K_i mapping the collapsed calibration block to each slice's block.

    Args:
        calib_slices: Per-slice calibration k-space (S, C, Y, X), modulated
        calib_collapsed: Their collapsed sum (1, C, Y, X)
        kernel_size: Odd (kh, kw)
        tikhonov: Absolute ridge weight, or None for the scaled default
        caipi_increment: Recorded with the kernels so that H uses the same frame

    Returns:
        SliceGrappaKernelSet
    """
    targets = as_array(calib_slices, Domain.KSPACE, "slice-GRAPPA targets")
    source = _as_block(calib_collapsed, "slice-GRAPPA source")
    if targets.ndim != 4 or targets.shape[1:] != source.shape:
        raise GeometryMismatchError(f"Slice calibration {targets.shape} does not match collapsed {source.shape}")

    n_slice, n_coil = targets.shape[:2]
    A, _ = build_calibration_system(source, source, kernel_size)
    B = np.concatenate([_interior(targets[i], kernel_size) for i in range(n_slice)], axis=1)
    lam = _ridge_weight(tikhonov, A)
    W = ridge_solve(A, B, lam)

    kh, kw = kernel_size
    kernels, residuals = [], []
    for i in range(n_slice):
        cols = slice(i * n_coil, (i + 1) * n_coil)
        residual = _relative_residual(A, W[:, cols], B[:, cols])
        residuals.append(residual)
        kernels.append(W[:, cols].T.reshape(n_coil, n_coil, kh, kw))
        logger.info(f"slice-GRAPPA slice {i}: residual {residual:.3e} (ridge {lam:.3e})")
    return SliceGrappaKernelSet(np.stack(kernels), [lam] * n_slice, residuals, caipi_increment=caipi_increment)


@dataclass(frozen=True)
class CalibratedKernels:
    spirit: SpiritKernelSet
    slice_grappa: SliceGrappaKernelSet


def fit_kernels(
    calib_slices: Tensorish,
    plan: SamplingPlan,
    kernel_size: Tuple[int, int] = (5, 5),
    tikhonov: Optional[float] = None,
) -> CalibratedKernels:
    """
    Fit both kernel families from modulated per-slice ACS blocks.

    SPIRiT uses the demodulated blocks; slice-GRAPPA uses the modulated blocks
    and their sum.
    """
    modulated = as_array(calib_slices, Domain.KSPACE, "calibration data")
    offset = acs_start(plan.grid[0], plan.acs_lines) if modulated.shape[-2] != plan.grid[0] else 0
    plain = caipi_demodulate(modulated, plan.caipi_increment, n_ky_full=plan.grid[0], ky_offset=offset)
    spirit = fit_spirit_set(plain, kernel_size, tikhonov)
    collapsed = np.sum(modulated, axis=-4, keepdims=True)
    grappa = fit_slice_grappa(modulated, collapsed, kernel_size, tikhonov, plan.caipi_increment)
    return CalibratedKernels(spirit, grappa)


def _sidecar(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_kernel_set(kernel_set: KernelSet, path: PathLike, extra: Optional[dict] = None) -> Path:
    """CT4F payload (S*O, C, kh, kw) plus a JSON sidecar with geometry and fit metadata."""
    s, o, c, kh, kw = kernel_set.kernels.shape
    write_tensor(ComplexTensor4(kernel_set.kernels.reshape(s * o, c, kh, kw), Domain.KSPACE), path)
    document = {
        "kind": kernel_set.kind,
        "n_slice": s,
        "n_coil_out": o,
        "n_coil_in": c,
        "kernel_size": [kh, kw],
        "tikhonov": list(kernel_set.tikhonov),
        "residuals": list(kernel_set.residuals),
        "caipi_increment": float(getattr(kernel_set, "caipi_increment", 0.0)),
    }
    document.update(extra or {})
    atomic_write_json(_sidecar(path), document)
    return Path(path)


def load_kernel_set(path: PathLike) -> KernelSet:
    meta = read_json(_sidecar(path))
    payload = read_tensor(path).data
    try:
        shape = (meta["n_slice"], meta["n_coil_out"], meta["n_coil_in"], *meta["kernel_size"])
        kernels = payload.reshape(shape)
        args = (kernels, meta["tikhonov"], meta["residuals"])
        if meta["kind"] == SpiritKernelSet.kind:
            return SpiritKernelSet(*args)
        if meta["kind"] == SliceGrappaKernelSet.kind:
            return SliceGrappaKernelSet(*args, caipi_increment=meta["caipi_increment"])
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactError(f"Malformed kernel sidecar for {path}: {e}")
    raise ArtifactError(f"Unknown kernel kind {meta.get('kind')!r} in {path}")
