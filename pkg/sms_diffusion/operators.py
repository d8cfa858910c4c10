"""
Linear operators of the SMS self-consistency model, each with an exact adjoint:

- SpiritOperator      G: per-slice SPIRiT convolution
- SliceGrappaOperator K: collapsed k-space -> per-slice k-space
- CompositeH          H k = stack_i conj(P_i) [K_i * sum_j P_j (G_j * k_j)]
- SamplingOperator    D: CAIPIRINHA phases, slice sum and ky mask

P_j is the CAIPIRINHA phase ramp of slice j. All convolutions are circular, so
they are applied as per-coil-pair filter responses in the (uncentered) DFT
domain.
"""
from typing import Optional, Tuple

import numpy as np
import scipy.fft

from utils import InvalidArgumentError, GeometryMismatchError

from .calibration import KernelSet, SliceGrappaKernelSet, SpiritKernelSet
from .linalg import power_iteration
from .simulation import SamplingPlan, caipi_phase
from .tensor_core import Domain, Tensorish, as_array, fft2c, fft_workers, ifft2c, rewrap

_AXES = (-2, -1)


def _fft(a: np.ndarray) -> np.ndarray:
    return scipy.fft.fft2(a, axes=_AXES, workers=fft_workers())


def _ifft(a: np.ndarray) -> np.ndarray:
    return scipy.fft.ifft2(a, axes=_AXES, workers=fft_workers())


def kernel_response(kernels: np.ndarray, grid: Tuple[int, int]) -> np.ndarray:
    """
    DFT-domain responses of correlation kernels on a torus.

    Tap (dy, dx) of a kernel reads the input at offset (dy - hy, dx - hx), so it
    is placed at (hy - dy, hx - dx) modulo the grid before the transform.
    """
    kh, kw = kernels.shape[-2:]
    n_y, n_x = grid
    if kh > n_y or kw > n_x:
        raise GeometryMismatchError(f"Kernel {kh}x{kw} does not fit the {n_y}x{n_x} grid")
    padded = np.zeros(kernels.shape[:-2] + (n_y, n_x), dtype=np.complex128)
    rows = (kh // 2 - np.arange(kh)) % n_y
    cols = (kw // 2 - np.arange(kw)) % n_x
    padded[..., rows[:, None], cols[None, :]] = kernels
    return _fft(padded)


def adjoint_kernel(kernels: np.ndarray) -> np.ndarray:
    """Conjugated, flipped, coil-transposed kernel: the adjoint in correlation form."""
    return np.conj(np.flip(np.swapaxes(kernels, -4, -3), axis=(-2, -1)))


def apply_kernel(kernels: np.ndarray, data: np.ndarray) -> np.ndarray:
    """Circularly apply correlation kernels (O, C, kh, kw) to (..., C, Y, X)."""
    response = kernel_response(kernels, data.shape[-2:])
    return _ifft(np.einsum("ocyx,...cyx->...oyx", response, _fft(data)))


class _KernelOperator:
    def __init__(self, kernel_set: KernelSet, grid: Tuple[int, int]):
        self.kernel_set = kernel_set
        self.grid = tuple(int(g) for g in grid)
        self.n_slice = kernel_set.n_slice
        self.n_coil = kernel_set.n_coil
        self.response = kernel_response(kernel_set.kernels, self.grid)

    def _check(self, data: np.ndarray, n_slice: int, name: str) -> None:
        if data.shape[-2:] != self.grid:
            raise GeometryMismatchError(f"{name} grid {data.shape[-2:]} does not match operator grid {self.grid}")
        if data.shape[-3] != self.n_coil:
            raise InvalidArgumentError(f"{name} has {data.shape[-3]} coils, kernels expect {self.n_coil}")
        if data.shape[-4] != n_slice:
            raise InvalidArgumentError(f"{name} has {data.shape[-4]} slices, expected {n_slice}")


class SpiritOperator(_KernelOperator):
    """Slice i output = G_i * k_i."""

    def __init__(self, kernel_set: SpiritKernelSet, grid: Tuple[int, int]):
        super().__init__(kernel_set, grid)

    def apply(self, k: Tensorish) -> Tensorish:
        data = as_array(k, Domain.KSPACE, "G input")
        self._check(data, self.n_slice, "G input")
        out = _ifft(np.einsum("socyx,...scyx->...soyx", self.response, _fft(data)))
        return rewrap(k, out, Domain.KSPACE)

    def adjoint(self, k: Tensorish) -> Tensorish:
        data = as_array(k, Domain.KSPACE, "G* input")
        self._check(data, self.n_slice, "G* input")
        out = _ifft(np.einsum("socyx,...soyx->...scyx", np.conj(self.response), _fft(data)))
        return rewrap(k, out, Domain.KSPACE)


class SliceGrappaOperator(_KernelOperator):
    """Slice i output = K_i * collapsed; input (..., 1, C, Y, X)."""

    def __init__(self, kernel_set: SliceGrappaKernelSet, grid: Tuple[int, int]):
        super().__init__(kernel_set, grid)

    def apply(self, collapsed: Tensorish) -> Tensorish:
        data = as_array(collapsed, Domain.KSPACE, "K input")
        self._check(data, 1, "K input")
        out = _ifft(np.einsum("socyx,...cyx->...soyx", self.response, _fft(data[..., 0, :, :, :])))
        return rewrap(collapsed, out, Domain.KSPACE)

    def adjoint(self, slices: Tensorish) -> Tensorish:
        data = as_array(slices, Domain.KSPACE, "K* input")
        self._check(data, self.n_slice, "K* input")
        out = _ifft(np.einsum("socyx,...soyx->...cyx", np.conj(self.response), _fft(data)))
        return rewrap(slices, out[..., None, :, :, :], Domain.KSPACE)


class CompositeH:
    """
    Self-consistency operator on unmodulated per-slice k-space.

    With a zero CAIPIRINHA increment this is the plain block product
    [K_1; ...; K_S][I ... I] diag(G_1, ..., G_S).
    """

    def __init__(self, spirit: SpiritKernelSet, slice_grappa: SliceGrappaKernelSet, grid: Tuple[int, int]):
        if spirit.n_slice != slice_grappa.n_slice or spirit.n_coil != slice_grappa.n_coil:
            raise GeometryMismatchError(
                f"SPIRiT kernels ({spirit.n_slice} slices, {spirit.n_coil} coils) and slice-GRAPPA kernels "
                f"({slice_grappa.n_slice} slices, {slice_grappa.n_coil} coils) disagree"
            )
        self.G = SpiritOperator(spirit, grid)
        self.K = SliceGrappaOperator(slice_grappa, grid)
        self.grid = self.G.grid
        self.n_slice = spirit.n_slice
        self.n_coil = spirit.n_coil
        self.caipi_increment = slice_grappa.caipi_increment
        self.phase = caipi_phase(self.n_slice, self.grid[0], self.caipi_increment)

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return (self.n_slice, self.n_coil) + self.grid

    def apply(self, k: Tensorish) -> Tensorish:
        data = as_array(k, Domain.KSPACE, "H input")
        modulated = self.G.apply(data) * self.phase
        separated = self.K.apply(np.sum(modulated, axis=-4, keepdims=True))
        return rewrap(k, separated * np.conj(self.phase), Domain.KSPACE)

    def adjoint(self, k: Tensorish) -> Tensorish:
        data = as_array(k, Domain.KSPACE, "H* input")
        collapsed = self.K.adjoint(data * self.phase)
        return rewrap(k, self.G.adjoint(collapsed * np.conj(self.phase)), Domain.KSPACE)

    def residual(self, k: Tensorish) -> Tensorish:
        """(H - I) k."""
        data = as_array(k, Domain.KSPACE, "H - I input")
        return rewrap(k, self.apply(data) - data, Domain.KSPACE)

    def residual_adjoint(self, k: Tensorish) -> Tensorish:
        data = as_array(k, Domain.KSPACE, "(H - I)* input")
        return rewrap(k, self.adjoint(data) - data, Domain.KSPACE)

    def normal_k(self, k: np.ndarray) -> np.ndarray:
        return self.residual_adjoint(self.residual(k))

    def normal_psi(self, x: Tensorish) -> Tensorish:
        """Psi(x) = F^-1 (H - I)* (H - I) F x, image domain in and out."""
        data = as_array(x, Domain.IMAGE, "Psi input")
        return rewrap(x, ifft2c(self.normal_k(fft2c(data))), Domain.IMAGE)

    def residual_norm(self, x: Tensorish) -> float:
        """||(H - I) F x|| for an image-domain x."""
        return float(np.linalg.norm(self.residual(fft2c(as_array(x, Domain.IMAGE, "x")))))

    def estimate_lipschitz(self, n_iter: int = 20, seed: int = 0) -> float:
        """Largest eigenvalue of Psi by power iteration."""
        return power_iteration(self.normal_psi, self.dims, n_iter=n_iter, seed=seed)

    def bin_shifts(self) -> Optional[np.ndarray]:
        """
        Per-slice ky shifts s_j with P_j = c_j exp(2 pi i s_j m / n_ky), or None.

        Whole-bin shifts make H block diagonal in a rolled DFT basis, see
        ``frequency_blocks``.
        """
        n_ky = self.grid[0]
        slices = np.arange(self.n_slice)
        shifts = np.rint(self.caipi_increment * slices * n_ky / (2.0 * np.pi)).astype(np.int64) % n_ky
        ramp = np.exp(2j * np.pi * shifts[:, None] * np.arange(n_ky)[None, :] / n_ky)
        phase = self.phase[:, 0, :, 0]
        if not np.allclose(phase, phase[:, :1] * ramp, rtol=0.0, atol=1e-9):
            return None
        return shifts

    def to_bins(self, k: np.ndarray, shifts: np.ndarray) -> np.ndarray:
        """Uncentered DFT of each slice, rolled by its shift along ky."""
        spectrum = _fft(k)
        return np.stack([np.roll(spectrum[..., j, :, :, :], s, axis=-2) for j, s in enumerate(shifts)], axis=-4)

    def from_bins(self, z: np.ndarray, shifts: np.ndarray) -> np.ndarray:
        rolled = np.stack([np.roll(z[..., j, :, :, :], -s, axis=-2) for j, s in enumerate(shifts)], axis=-4)
        return _ifft(rolled)

    def frequency_blocks(self, shifts: np.ndarray) -> np.ndarray:
        """
        H in the basis of ``to_bins``: one (S*C, S*C) matrix per frequency.

        Entry ((i, o), (j, c)) at (y, x) is conj(c_i) c_j sum_p K_i[o, p](y, x) G_j[p, c](y - s_j, x).
        """
        n_sc = self.n_slice * self.n_coil
        rolled = np.stack([np.roll(self.G.response[j], s, axis=-2) for j, s in enumerate(shifts)])
        scale = self.phase[:, 0, 0, 0]
        blocks = np.einsum("iopyx,jpcyx->yxiojc", self.K.response, rolled)
        blocks *= np.conj(scale)[:, None, None, None] * scale[None, None, :, None]
        return blocks.reshape(self.grid + (n_sc, n_sc))


class SamplingOperator:
    """D k = mask * sum_j P_j k_j, mapping (..., S, C, Y, X) to (..., 1, C, Y, X)."""

    def __init__(self, plan: SamplingPlan, n_slice: int):
        self.plan = plan
        self.n_slice = n_slice
        self.mask = plan.mask
        self.phase = caipi_phase(n_slice, plan.grid[0], plan.caipi_increment)

    def apply(self, k: Tensorish) -> Tensorish:
        data = as_array(k, Domain.KSPACE, "D input")
        self.plan.check_grid(data.shape, "D input")
        if data.shape[-4] != self.n_slice:
            raise GeometryMismatchError(f"D input has {data.shape[-4]} slices, plan expects {self.n_slice}")
        return rewrap(k, self.mask * np.sum(data * self.phase, axis=-4, keepdims=True), Domain.KSPACE)

    def adjoint(self, y: Tensorish) -> Tensorish:
        data = as_array(y, Domain.KSPACE, "D* input")
        self.plan.check_grid(data.shape, "D* input")
        if data.shape[-4] != 1:
            raise GeometryMismatchError(f"D* input must be collapsed (1 slice), got {data.shape[-4]}")
        return rewrap(y, np.conj(self.phase) * (self.mask * data), Domain.KSPACE)

    def project(self, y: Tensorish) -> Tensorish:
        """Mask projection on measurement space; idempotent."""
        data = as_array(y, Domain.KSPACE, "mask input")
        return rewrap(y, self.mask * data, Domain.KSPACE)

    def gram_diagonal(self) -> np.ndarray:
        """D D* = n_slice * mask."""
        return self.n_slice * self.mask

    def zero_filled(self, y: Tensorish) -> np.ndarray:
        """F^-1 D* y, the image-domain zero-filled adjoint."""
        return ifft2c(as_array(self.adjoint(y)))

