"""
Reconstruction metrics and magnitude previews.
"""
import io
import math
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from utils import logger, InvalidArgumentError, GeometryMismatchError

from .file_utils import PathLike, atomic_write_bytes
from .tensor_core import ComplexTensor4, Domain, Tensorish, as_array


def _pair(recon: Tensorish, truth: Tensorish):
    a = recon.data if isinstance(recon, ComplexTensor4) else np.asarray(recon)
    b = truth.data if isinstance(truth, ComplexTensor4) else np.asarray(truth)
    if a.shape != b.shape:
        raise GeometryMismatchError(f"Reconstruction {a.shape} and truth {b.shape} dims differ")
    return a, b


def nmse(recon: Tensorish, truth: Tensorish) -> float:
    """||recon - truth||^2 / ||truth||^2."""
    a, b = _pair(recon, truth)
    denominator = float(np.linalg.norm(b) ** 2)
    if denominator == 0:
        raise InvalidArgumentError("NMSE is undefined for an all-zero reference")
    return float(np.linalg.norm(a - b) ** 2) / denominator


def psnr(recon: Tensorish, truth: Tensorish) -> Optional[float]:
    """PSNR of magnitude images with peak max|truth|; None when the images match exactly."""
    a, b = _pair(recon, truth)
    mse = float(np.mean((np.abs(a) - np.abs(b)) ** 2))
    if mse == 0:
        return None
    peak = float(np.max(np.abs(b)))
    return 10.0 * math.log10(peak**2 / mse) if peak > 0 else float("-inf")


def compute_metrics(recon: Tensorish, truth: Tensorish) -> Dict[str, Optional[float]]:
    return {"nmse": nmse(recon, truth), "psnr": psnr(recon, truth)}


def magnitude_slices(tensor: Tensorish) -> np.ndarray:
    """Root-sum-of-squares over coils, scaled per slice to [0, 255] (uint8, (S, Y, X))."""
    if isinstance(tensor, ComplexTensor4) and tensor.domain == Domain.KSPACE:
        raise InvalidArgumentError("Plotting needs an image-domain tensor; apply ifft2c to k-space data first")
    data = as_array(tensor, Domain.IMAGE, "plot input")
    if data.ndim != 4:
        raise InvalidArgumentError(f"Plot input must be (S, C, Y, X), got {data.shape}")
    magnitude = np.sqrt(np.sum(np.abs(data) ** 2, axis=1))
    peaks = magnitude.max(axis=(1, 2), keepdims=True)
    scaled = np.where(peaks > 0, magnitude / np.where(peaks > 0, peaks, 1.0), 0.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def save_slice_pngs(tensor: Tensorish, out_path: PathLike) -> List[Path]:
    """
    Write one grayscale PNG per slice: ``<stem>_slice<i>.png`` next to ``out_path``.

    Returns:
        Paths written, in slice order
    """
    out_path = Path(out_path)
    paths = []
    for i, plane in enumerate(magnitude_slices(tensor)):
        buffer = io.BytesIO()
        Image.fromarray(plane).save(buffer, format="PNG")
        path = out_path.with_name(f"{out_path.stem}_slice{i}{out_path.suffix or '.png'}")
        atomic_write_bytes(path, buffer.getvalue())
        paths.append(path)
    logger.info(f"Wrote {len(paths)} slice previews next to {out_path}")
    return paths
