"""
Complex 4-axis tensors (slice, coil, ky, kx), centered unitary FFTs, inner
products and the CT4F on-disk format.

Operators throughout the package accept either a ``ComplexTensor4`` (domain tag
checked and propagated) or a bare ndarray whose last four axes are
(slice, coil, ky, kx); extra leading axes are treated as a batch.
"""
import functools
import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import scipy.fft

from utils import (
    get_settings,
    logger,
    InvalidArgumentError,
    GeometryMismatchError,
    BadMagicError,
    InvalidHeaderError,
    TruncatedFileError,
    PayloadSizeError,
)

from .file_utils import PathLike, atomic_write_bytes, validate_file

MAGIC = b"CT4F\x00\x00\x00\x01"
_HEADER_LEN = struct.Struct("<I")
_MAX_COUNT = 2**63 - 1
_DTYPES = {"c64": np.dtype("<c8"), "c128": np.dtype("<c16")}
_SPATIAL = (-2, -1)


@functools.lru_cache(maxsize=None)
def fft_workers() -> int:
    """SMS_FFT_WORKERS, read once on first use."""
    return get_settings().fft_workers


class Domain(str, Enum):
    IMAGE = "image"
    KSPACE = "kspace"


@dataclass(frozen=True)
class ComplexTensor4:
    """Complex array over (slice, coil, ky, kx) with a domain tag.

    Values are treated as immutable after construction; every operation returns
    a new tensor.
    """

    data: np.ndarray
    domain: Domain

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise InvalidArgumentError(f"ComplexTensor4 needs 4 axes, got shape {data.shape}")
        if any(d <= 0 for d in data.shape):
            raise InvalidArgumentError(f"ComplexTensor4 dimensions must be positive, got {data.shape}")
        if data.dtype not in (np.complex64, np.complex128):
            data = data.astype(np.complex128)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "domain", Domain(self.domain))

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def dtype_tag(self) -> str:
        return "c64" if self.data.dtype == np.complex64 else "c128"

    def with_data(self, data: np.ndarray, domain: Optional[Domain] = None) -> "ComplexTensor4":
        return ComplexTensor4(data, self.domain if domain is None else domain)

    def astype(self, tag: str) -> "ComplexTensor4":
        if tag not in _DTYPES:
            raise InvalidArgumentError(f"Unknown dtype tag: {tag}")
        return ComplexTensor4(self.data.astype(_DTYPES[tag].newbyteorder("=")), self.domain)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))


Tensorish = Union[ComplexTensor4, np.ndarray]


def as_array(t: Tensorish, expect: Optional[Domain] = None, name: str = "input") -> np.ndarray:
    """Unwrap a tensor, enforcing its domain tag when one is expected."""
    if isinstance(t, ComplexTensor4):
        if expect is not None and t.domain != expect:
            raise InvalidArgumentError(f"{name} must be in the {expect.value} domain, got {t.domain.value}")
        return t.data
    data = np.asarray(t)
    if data.ndim < 4:
        raise InvalidArgumentError(f"{name} needs at least 4 axes (slice, coil, ky, kx), got shape {data.shape}")
    if not np.iscomplexobj(data):
        data = data.astype(np.complex128)
    return data


def rewrap(like: Tensorish, data: np.ndarray, domain: Domain) -> Tensorish:
    """Return ``data`` in the same container kind as ``like``."""
    if isinstance(like, ComplexTensor4):
        return ComplexTensor4(data, domain)
    return data


def _check_nonempty(data: np.ndarray) -> None:
    if data.size == 0 or any(d == 0 for d in data.shape):
        raise InvalidArgumentError(f"Cannot transform a tensor with a zero dimension: {data.shape}")


def fft2c(t: Tensorish) -> Tensorish:
    """Centered unitary 2D FFT over (ky, kx), image -> k-space."""
    data = as_array(t, Domain.IMAGE, "fft2c input")
    _check_nonempty(data)
    out = scipy.fft.fftshift(
        scipy.fft.fft2(scipy.fft.ifftshift(data, axes=_SPATIAL), axes=_SPATIAL, norm="ortho", workers=fft_workers()),
        axes=_SPATIAL,
    )
    return rewrap(t, out, Domain.KSPACE)


def ifft2c(t: Tensorish) -> Tensorish:
    """Centered unitary 2D inverse FFT over (ky, kx), k-space -> image."""
    data = as_array(t, Domain.KSPACE, "ifft2c input")
    _check_nonempty(data)
    out = scipy.fft.fftshift(
        scipy.fft.ifft2(scipy.fft.ifftshift(data, axes=_SPATIAL), axes=_SPATIAL, norm="ortho", workers=fft_workers()),
        axes=_SPATIAL,
    )
    return rewrap(t, out, Domain.IMAGE)


def inner(a: Tensorish, b: Tensorish) -> complex:
    """sum(conj(a) * b)."""
    a_data = a.data if isinstance(a, ComplexTensor4) else np.asarray(a)
    b_data = b.data if isinstance(b, ComplexTensor4) else np.asarray(b)
    if a_data.shape != b_data.shape:
        raise GeometryMismatchError(f"inner() dims differ: {a_data.shape} vs {b_data.shape}")
    return complex(np.vdot(a_data, b_data))


def batch_inner(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-batch inner products over the last four axes, kept broadcastable."""
    return np.sum(np.conj(a) * b, axis=(-4, -3, -2, -1), keepdims=True)


def write_tensor(t: ComplexTensor4, path: PathLike) -> Path:
    """Write ``t`` as CT4F (atomic temp-file + rename)."""
    header = json.dumps(
        {"dims": list(t.dims), "dtype": t.dtype_tag, "domain": t.domain.value},
        sort_keys=True,
    ).encode("utf-8")
    payload = np.ascontiguousarray(t.data, dtype=_DTYPES[t.dtype_tag]).tobytes(order="C")
    return atomic_write_bytes(path, MAGIC + _HEADER_LEN.pack(len(header)) + header + payload)


def _parse_header(raw: bytes) -> Tuple[Tuple[int, ...], str, Domain]:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InvalidHeaderError(f"CT4F header is not UTF-8 JSON: {e}")
    if not isinstance(header, dict) or set(header) != {"dims", "dtype", "domain"}:
        raise InvalidHeaderError(f"CT4F header must hold exactly dims/dtype/domain, got {header!r}")

    dims = header["dims"]
    if (
        not isinstance(dims, list)
        or len(dims) != 4
        or any(isinstance(d, bool) or not isinstance(d, int) or d <= 0 for d in dims)
    ):
        raise InvalidHeaderError(f"CT4F dims must be 4 positive integers, got {dims!r}")
    if header["dtype"] not in _DTYPES:
        raise InvalidHeaderError(f"Unknown CT4F dtype: {header['dtype']!r}")
    try:
        domain = Domain(header["domain"])
    except ValueError:
        raise InvalidHeaderError(f"Unknown CT4F domain: {header['domain']!r}")

    count = 1
    for d in dims:
        count *= d
    if count > _MAX_COUNT:
        raise InvalidHeaderError(f"CT4F dims {dims} overflow a 64-bit element count")
    return tuple(dims), header["dtype"], domain


def read_tensor(path: PathLike) -> ComplexTensor4:
    """Read a CT4F file written by ``write_tensor``; the round trip is bit-exact."""
    blob = validate_file(path).read_bytes()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path} is not a CT4F file")

    offset = len(MAGIC)
    if len(blob) < offset + _HEADER_LEN.size:
        raise TruncatedFileError(f"{path} ends inside the header length")
    (header_len,) = _HEADER_LEN.unpack_from(blob, offset)
    offset += _HEADER_LEN.size
    if len(blob) < offset + header_len:
        raise TruncatedFileError(f"{path} ends inside the header")
    dims, tag, domain = _parse_header(blob[offset : offset + header_len])
    offset += header_len

    count = int(np.prod(dims, dtype=object))
    expected = count * _DTYPES[tag].itemsize
    available = len(blob) - offset
    if expected > available:
        raise TruncatedFileError(f"{path} declares {expected} payload bytes but holds {available}")
    if expected < available:
        raise PayloadSizeError(f"{path} holds {available} payload bytes, header declares {expected}")

    data = np.frombuffer(blob, dtype=_DTYPES[tag], count=count, offset=offset).reshape(dims)
    logger.debug(f"Read CT4F {path}: dims={dims} dtype={tag} domain={domain.value}")
    return ComplexTensor4(data.astype(_DTYPES[tag].newbyteorder("=")), domain)
