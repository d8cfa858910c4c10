"""
Synthetic SMS experiments: phantoms, coil sensitivities, CAIPIRINHA phase
cycling, undersampling plans and the collapsed measurement.
"""
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from utils import logger, InvalidArgumentError, GeometryMismatchError, ArtifactError, PhantomSpec

from .file_utils import PathLike, atomic_write_json, read_json
from .tensor_core import ComplexTensor4, Domain, Tensorish, as_array, fft2c, rewrap

MIN_GRID = 8
DEFAULT_CAIPI = 2.0 * math.pi / 3.0


@dataclass(frozen=True)
class SamplingPlan:
    """Cartesian ky-line undersampling shared by every slice and coil."""

    lines: np.ndarray
    n_kx: int
    accel: int
    acs_lines: int
    caipi_increment: float = DEFAULT_CAIPI

    def __post_init__(self):
        lines = np.asarray(self.lines, dtype=bool)
        if lines.ndim != 1 or lines.size == 0 or self.n_kx <= 0:
            raise InvalidArgumentError(f"Invalid sampling plan geometry: lines {lines.shape}, n_kx {self.n_kx}")
        object.__setattr__(self, "lines", lines)

    @property
    def grid(self) -> Tuple[int, int]:
        return int(self.lines.size), int(self.n_kx)

    @property
    def mask(self) -> np.ndarray:
        """Binary (n_ky, n_kx) mask broadcasting over slices and coils."""
        return np.repeat(self.lines[:, None], self.n_kx, axis=1).astype(np.float64)

    @property
    def acs_slice(self) -> slice:
        start = acs_start(self.grid[0], self.acs_lines)
        return slice(start, start + self.acs_lines)

    def check_grid(self, shape: Tuple[int, ...], name: str = "tensor") -> None:
        if tuple(shape[-2:]) != self.grid:
            raise GeometryMismatchError(f"{name} grid {tuple(shape[-2:])} does not match plan grid {self.grid}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accel": int(self.accel),
            "acs_lines": int(self.acs_lines),
            "caipi_increment": float(self.caipi_increment),
            "n_kx": int(self.n_kx),
            "n_ky": int(self.lines.size),
            "sampled_lines": [int(i) for i in np.flatnonzero(self.lines)],
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "SamplingPlan":
        try:
            n_ky = int(document["n_ky"])
            lines = np.zeros(n_ky, dtype=bool)
            lines[np.asarray(document["sampled_lines"], dtype=int)] = True
            return cls(
                lines=lines,
                n_kx=int(document["n_kx"]),
                accel=int(document["accel"]),
                acs_lines=int(document["acs_lines"]),
                caipi_increment=float(document["caipi_increment"]),
            )
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise ArtifactError(f"Malformed sampling plan: {e}")


def acs_start(n_ky: int, acs_lines: int) -> int:
    return n_ky // 2 - acs_lines // 2


def make_mask(accel: int, acs_lines: int, grid: Tuple[int, int], caipi_increment: float = DEFAULT_CAIPI) -> SamplingPlan:
    """
    Uniform ky undersampling plus a centered fully sampled ACS block.

    Lines with (m - n_ky//2) divisible by ``accel`` are kept, so the k-space
    centre line is always sampled.
    """
    n_ky, n_kx = grid
    if accel < 1:
        raise InvalidArgumentError(f"Acceleration must be >= 1, got {accel}")
    if acs_lines < 0 or acs_lines > n_ky:
        raise InvalidArgumentError(f"acs_lines must lie in [0, {n_ky}], got {acs_lines}")

    ky = np.arange(n_ky)
    lines = (ky - n_ky // 2) % accel == 0
    start = acs_start(n_ky, acs_lines)
    lines[start : start + acs_lines] = True

    logger.debug(f"Sampling plan R={accel} acs={acs_lines} grid={grid}: {int(lines.sum())}/{n_ky} lines")
    return SamplingPlan(lines=lines, n_kx=n_kx, accel=accel, acs_lines=acs_lines, caipi_increment=caipi_increment)


def save_plan(plan: SamplingPlan, path: PathLike):
    return atomic_write_json(path, plan.to_dict())


def load_plan(path: PathLike) -> SamplingPlan:
    return SamplingPlan.from_dict(read_json(path))


def caipi_phase(
    n_slice: int, n_ky: int, increment: float, rows: Optional[int] = None, ky_offset: int = 0
) -> np.ndarray:
    """Phase ramps exp(i*j*(m - n_ky//2)*increment), shape (n_slice, 1, rows, 1).

    ``rows``/``ky_offset`` select a block of the grid (e.g. the ACS rows).
    """
    rows = n_ky if rows is None else rows
    j = np.arange(n_slice)[:, None]
    m = np.arange(ky_offset, ky_offset + rows)[None, :] - n_ky // 2
    return np.exp(1j * increment * j * m)[:, None, :, None]


def _phase_for(data: np.ndarray, increment: float, n_ky_full: Optional[int], ky_offset: int) -> np.ndarray:
    n_slice, rows = data.shape[-4], data.shape[-2]
    n_ky = rows if n_ky_full is None else n_ky_full
    return caipi_phase(n_slice, n_ky, increment, rows=rows, ky_offset=ky_offset)


def caipi_modulate(
    k: Tensorish, increment: float, n_ky_full: Optional[int] = None, ky_offset: int = 0
) -> Tensorish:
    """
    Multiply slice j, ky line m by exp(i*j*(m - n_ky//2)*increment).

    With increment 2*pi/3 and n_ky divisible by 3 the image of slice j is
    circularly shifted by j*n_ky/3 rows. ``n_ky_full``/``ky_offset`` locate a
    cropped block (e.g. ACS rows) inside the full grid.
    """
    data = as_array(k, Domain.KSPACE, "caipi_modulate input")
    out = data * _phase_for(data, increment, n_ky_full, ky_offset)
    return rewrap(k, out, Domain.KSPACE)


def caipi_demodulate(
    k: Tensorish, increment: float, n_ky_full: Optional[int] = None, ky_offset: int = 0
) -> Tensorish:
    data = as_array(k, Domain.KSPACE, "caipi_demodulate input")
    out = data * np.conj(_phase_for(data, increment, n_ky_full, ky_offset))
    return rewrap(k, out, Domain.KSPACE)


def sms_collapse(k: Tensorish, plan: SamplingPlan) -> Tensorish:
    """y = D * sum over slices of already-modulated k-space; shape (..., 1, C, Y, X)."""
    data = as_array(k, Domain.KSPACE, "sms_collapse input")
    plan.check_grid(data.shape, "sms_collapse input")
    y = plan.mask * np.sum(data, axis=-4, keepdims=True)
    return rewrap(k, y, Domain.KSPACE)


def _unit_grid(grid: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    n_y, n_x = grid
    yy, xx = np.meshgrid(
        (np.arange(n_y) - n_y / 2.0) / (n_y / 2.0),
        (np.arange(n_x) - n_x / 2.0) / (n_x / 2.0),
        indexing="ij",
    )
    return yy, xx


def phantom_support(grid: Tuple[int, int]) -> np.ndarray:
    """Elliptical object support shared by every slice."""
    yy, xx = _unit_grid(grid)
    return (yy / 0.9) ** 2 + (xx / 0.75) ** 2 <= 1.0


def _ellipses(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    image = 0.6 * (((yy / 0.85) ** 2 + (xx / 0.7) ** 2) <= 1.0)
    for _ in range(int(rng.integers(4, 9))):
        cy, cx = rng.uniform(-0.5, 0.5, size=2)
        ry, rx = rng.uniform(0.06, 0.35, size=2)
        angle = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(angle) + dx * np.sin(angle)
        v = -dy * np.sin(angle) + dx * np.cos(angle)
        image = image + rng.uniform(-0.3, 0.4) * (((u / ry) ** 2 + (v / rx) ** 2) <= 1.0)
    return image


def _blobs(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    image = np.zeros_like(yy)
    for _ in range(int(rng.integers(5, 11))):
        cy, cx = rng.uniform(-0.6, 0.6, size=2)
        width = rng.uniform(0.08, 0.3)
        image += rng.uniform(0.2, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))
    return image / max(float(image.max()), 1e-12)


def make_phantom(spec: PhantomSpec) -> ComplexTensor4:
    """
    Multi-slice complex phantom, image domain, single coil: dims (n_slice, 1, Y, X).

    Magnitudes lie in [0, 1], the background outside ``phantom_support`` is
    exactly zero and each slice draws its own structures and smooth phase.
    """
    n_y, n_x = spec.grid
    if n_y < MIN_GRID or n_x < MIN_GRID:
        raise InvalidArgumentError(f"Phantom grid must be at least {MIN_GRID}x{MIN_GRID}, got {spec.grid}")

    rng = np.random.default_rng(spec.seed)
    yy, xx = _unit_grid(spec.grid)
    support = phantom_support(spec.grid)
    draw = _ellipses if spec.shape_family == "ellipses" else _blobs

    slices = []
    for _ in range(spec.n_slice):
        magnitude = np.clip(draw(rng, yy, xx), 0.0, 1.0) * support
        a0, a1, a2 = rng.uniform(-np.pi, np.pi), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)
        slices.append(magnitude * np.exp(1j * (a0 + a1 * yy + a2 * xx)))

    logger.debug(f"Phantom {spec.shape_family} seed={spec.seed} dims=({spec.n_slice}, 1, {n_y}, {n_x})")
    return ComplexTensor4(np.stack(slices)[:, None], Domain.IMAGE)


def make_coils(n_coil: int, grid: Tuple[int, int], n_slice: int = 1, seed: int = 0, radius: float = 2.0) -> np.ndarray:
    """
    Birdcage-style sensitivity maps, dims (n_slice, n_coil, Y, X).

    Coils sit on one ring (two rings from 8 coils up) around the object and the
    slices at distinct heights, so each slice sees its own sensitivities. Maps
    are normalised to unit root-sum-of-squares; the seed rotates the array.
    """
    if n_coil < 2:
        raise InvalidArgumentError(f"At least 2 coils are required, got {n_coil}")
    n_y, n_x = grid
    if n_y < MIN_GRID or n_x < MIN_GRID:
        raise InvalidArgumentError(f"Coil grid must be at least {MIN_GRID}x{MIN_GRID}, got {grid}")

    n_rings = 2 if n_coil >= 8 else 1
    per_ring = math.ceil(n_coil / n_rings)
    rotation = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi / per_ring)

    c = np.arange(n_coil)
    angle = c * (2.0 * np.pi / per_ring) + rotation
    coil_y = radius * np.sin(angle)
    coil_x = radius * np.cos(angle)
    coil_z = np.floor(c / per_ring) - 0.5 * (n_rings - 1)
    coil_phase = -(c + np.floor(c / per_ring)) * (2.0 * np.pi / per_ring)

    slice_z = np.linspace(-0.5, 0.5, n_slice) if n_slice > 1 else np.zeros(1)
    yy, xx = _unit_grid(grid)

    y_co = yy[None, None] - coil_y[None, :, None, None]
    x_co = xx[None, None] - coil_x[None, :, None, None]
    z_co = slice_z[:, None, None, None] - coil_z[None, :, None, None]
    rr = np.sqrt(x_co**2 + y_co**2 + z_co**2)
    phi = np.arctan2(x_co, -y_co) + coil_phase[None, :, None, None]
    maps = np.exp(1j * phi) / rr

    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=1, keepdims=True))
    return maps


def apply_coils(image: Tensorish, maps: np.ndarray) -> Tensorish:
    """Coil images S_c * rho: (S, 1, Y, X) x (S, C, Y, X) -> (S, C, Y, X)."""
    data = as_array(image, Domain.IMAGE, "apply_coils input")
    if data.shape[-4] != maps.shape[0] or data.shape[-2:] != maps.shape[-2:]:
        raise GeometryMismatchError(f"Image {data.shape} and coil maps {maps.shape} disagree")
    return rewrap(image, data * maps, Domain.IMAGE)


def coil_combine(images: Tensorish, maps: np.ndarray) -> Tensorish:
    """Sensitivity-weighted combination back to (S, 1, Y, X)."""
    data = as_array(images, Domain.IMAGE, "coil_combine input")
    if data.shape[-4:] != maps.shape:
        raise GeometryMismatchError(f"Coil images {data.shape} and coil maps {maps.shape} disagree")
    weight = np.sum(np.abs(maps) ** 2, axis=1, keepdims=True)
    combined = np.sum(np.conj(maps) * data, axis=-3, keepdims=True) / np.maximum(weight, 1e-12)
    return rewrap(images, combined, Domain.IMAGE)


def extract_acs(k: Tensorish, plan: SamplingPlan) -> Tensorish:
    """Crop the ACS rows: (..., S, C, acs_lines, X)."""
    data = as_array(k, Domain.KSPACE, "extract_acs input")
    plan.check_grid(data.shape, "extract_acs input")
    if plan.acs_lines == 0:
        raise InvalidArgumentError("Sampling plan has no ACS lines")
    return rewrap(k, np.array(data[..., plan.acs_slice, :]), Domain.KSPACE)


def embed_acs(acs: Tensorish, plan: SamplingPlan) -> Tensorish:
    """Zero-embed an ACS crop back onto the full grid."""
    data = as_array(acs, Domain.KSPACE, "embed_acs input")
    if data.shape[-2:] != (plan.acs_lines, plan.n_kx):
        raise GeometryMismatchError(f"ACS block {data.shape[-2:]} does not match plan ({plan.acs_lines}, {plan.n_kx})")
    full = np.zeros(data.shape[:-2] + plan.grid, dtype=data.dtype)
    full[..., plan.acs_slice, :] = data
    return rewrap(acs, full, Domain.KSPACE)


def add_noise(y: Tensorish, plan: SamplingPlan, noise_std: float, rng: np.random.Generator) -> Tensorish:
    """Complex Gaussian noise of total standard deviation ``noise_std`` on sampled entries."""
    data = as_array(y, Domain.KSPACE, "add_noise input")
    if noise_std <= 0:
        return y
    noise = (rng.standard_normal(data.shape) + 1j * rng.standard_normal(data.shape)) * (noise_std / np.sqrt(2.0))
    return rewrap(y, data + plan.mask * noise, Domain.KSPACE)


@dataclass
class SimulationResult:
    """Everything a retrospective SMS experiment needs, plus its ground truth."""

    truth: ComplexTensor4
    maps: np.ndarray
    coil_images: ComplexTensor4
    kspace: ComplexTensor4
    plan: SamplingPlan
    calib_slices: ComplexTensor4
    calib_collapsed: ComplexTensor4
    y: ComplexTensor4
    metadata: Dict[str, Any] = field(default_factory=dict)


def simulate(
    spec: PhantomSpec,
    accel: int,
    acs_lines: int,
    caipi_increment: float = DEFAULT_CAIPI,
    noise_std: float = 0.0,
    truth: Optional[ComplexTensor4] = None,
) -> SimulationResult:
    """
    Build the full retrospective experiment from a phantom spec.

    Calibration data are the CAIPIRINHA-modulated per-slice ACS blocks and their
    collapsed sum; ``y`` is the undersampled collapsed measurement.
    """
    truth = make_phantom(spec) if truth is None else truth
    maps = make_coils(spec.n_coil, spec.grid, spec.n_slice, seed=spec.seed)
    coil_images = apply_coils(truth, maps)
    kspace = fft2c(coil_images)
    plan = make_mask(accel, acs_lines, spec.grid, caipi_increment)

    modulated = caipi_modulate(kspace, caipi_increment)
    y = sms_collapse(modulated, plan)
    y = add_noise(y, plan, noise_std, np.random.default_rng(spec.seed + 1))

    calib_slices = extract_acs(modulated, plan) if acs_lines > 0 else modulated
    calib_collapsed = calib_slices.with_data(np.sum(calib_slices.data, axis=0, keepdims=True))

    logger.info(
        f"Simulated SMS{spec.n_slice} R={accel} acs={acs_lines} coils={spec.n_coil} grid={spec.grid}: "
        f"{int(plan.lines.sum())} sampled lines"
    )
    return SimulationResult(
        truth=truth,
        maps=maps,
        coil_images=coil_images,
        kspace=kspace,
        plan=plan,
        calib_slices=calib_slices,
        calib_collapsed=calib_collapsed,
        y=y,
        metadata={"phantom": spec.model_dump(mode="json"), "noise_std": noise_std},
    )
