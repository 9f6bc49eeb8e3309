"""Dense rank-4 feature maps, channel matrices and the CCT1 tensor container."""

import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b'CCT1'
_HEADER = struct.Struct('<4sB4I')
_DTYPES = {4: np.dtype('<f4'), 8: np.dtype('<f8')}

Dims4 = Tuple[int, int, int, int]
PathLike = Union[str, Path]


class CcaError(Exception):
    """Base class for toolkit errors."""


class ShapeError(CcaError, ValueError):
    """Operands have incompatible shapes or an index is out of range."""


class NonFiniteError(CcaError, ValueError):
    """An array holds NaN or Inf where finite values are required."""


class TensorFormatError(CcaError):
    """A CCT1 stream is malformed."""


def resolve_dtype(precision: int) -> np.dtype:
    """Map a precision in bits (32/64) or bytes (4/8) to a numpy dtype."""
    if precision in (32, 4):
        return np.dtype(np.float32)
    if precision in (64, 8):
        return np.dtype(np.float64)
    raise ValueError(f"Unsupported precision {precision}; use 32 or 64")


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.flags.writeable = False
    return array


def _require_finite(array: np.ndarray, what: str) -> None:
    if not np.isfinite(array).all():
        raise NonFiniteError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class FeatureMap4D:
    """Immutable (C, T, H, W) real array, W innermost."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ShapeError(f"FeatureMap4D needs 4 dims, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"All dims must be >= 1, got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        _require_finite(data, 'FeatureMap4D')
        object.__setattr__(self, 'data', _frozen(data))

    @classmethod
    def zeros(cls, dims: Dims4, precision: int = 32) -> 'FeatureMap4D':
        return cls(np.zeros(dims, dtype=resolve_dtype(precision)))

    @classmethod
    def random(cls, dims: Dims4, rng: np.random.Generator, precision: int = 32,
               scale: float = 1.0) -> 'FeatureMap4D':
        """Standard-normal entries times ``scale``."""
        values = rng.standard_normal(dims) * scale
        return cls(values.astype(resolve_dtype(precision)))

    @property
    def dims(self) -> Dims4:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> Tuple[int, int, int]:
        """Spatiotemporal extents (T, H, W)."""
        return self.data.shape[1:]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> int:
        return self.data.dtype.itemsize * 8

    def flat(self) -> np.ndarray:
        """(C, N) view with positions in row-major (t, h, w) order."""
        return self.data.reshape(self.channels, -1)

    def astype(self, precision: int) -> 'FeatureMap4D':
        return FeatureMap4D(self.data.astype(resolve_dtype(precision)))


@dataclass(frozen=True)
class Matrix:
    """Immutable row-major real matrix; carrier for 1x1x1 convolution weights."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ShapeError(f"Matrix needs a positive 2D shape, got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        _require_finite(data, 'Matrix')
        object.__setattr__(self, 'data', _frozen(data))

    @classmethod
    def uniform(cls, rows: int, cols: int, bound: float, rng: np.random.Generator,
                precision: int = 64) -> 'Matrix':
        values = rng.uniform(-bound, bound, size=(rows, cols))
        return cls(values.astype(resolve_dtype(precision)))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def astype(self, precision: int) -> 'Matrix':
        return Matrix(self.data.astype(resolve_dtype(precision)))


def _check_same_dims(a: FeatureMap4D, b: FeatureMap4D) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"Shape mismatch: {a.dims} vs {b.dims}")


def channel_project(x: FeatureMap4D, weight: Matrix) -> FeatureMap4D:
    """1x1x1 convolution without bias: out[:, u] = W @ x[:, u]."""
    if weight.cols != x.channels:
        raise ShapeError(
            f"Cannot project feature map of shape {x.dims} with matrix of shape {weight.shape}"
        )
    w = weight.data.astype(x.dtype, copy=False)
    out = (w @ x.flat()).reshape((weight.rows,) + x.grid)
    return FeatureMap4D(out)


def axpy(alpha: float, a: FeatureMap4D, b: FeatureMap4D) -> FeatureMap4D:
    """alpha * a + b, elementwise."""
    _check_same_dims(a, b)
    return FeatureMap4D(a.data.dtype.type(alpha) * a.data + b.data)


def max_abs_diff(a: FeatureMap4D, b: FeatureMap4D) -> float:
    _check_same_dims(a, b)
    if a.data.size == 0:
        return 0.0
    diff = np.abs(a.data.astype(np.float64) - b.data.astype(np.float64))
    return float(diff.max())


# CCT1 container

def write_tensor(stream: BinaryIO, x: FeatureMap4D) -> None:
    """Write one CCT1 block: magic, precision byte, four u32 dims, payload."""
    width = x.dtype.itemsize
    stream.write(_HEADER.pack(MAGIC, width, *x.dims))
    stream.write(x.data.astype(_DTYPES[width], copy=False).tobytes(order='C'))


def _remaining(stream: BinaryIO) -> Optional[int]:
    """Bytes left after the current position, or None for unseekable streams."""
    if not stream.seekable():
        return None
    position = stream.tell()
    end = stream.seek(0, io.SEEK_END)
    stream.seek(position)
    return end - position


def read_tensor(stream: BinaryIO) -> FeatureMap4D:
    """Read one CCT1 block from the current stream position."""
    header = stream.read(_HEADER.size)
    if len(header) < _HEADER.size:
        raise TensorFormatError(f"Truncated header: got {len(header)} of {_HEADER.size} bytes")
    magic, width, c, t, h, w = _HEADER.unpack(header)
    if magic != MAGIC:
        raise TensorFormatError(f"Bad magic bytes {magic!r}, expected {MAGIC!r}")
    if width not in _DTYPES:
        raise TensorFormatError(f"Bad precision flag {width}, expected 4 or 8")
    dims = (c, t, h, w)
    if min(dims) < 1:
        raise TensorFormatError(f"Invalid dims {dims}")
    expected = c * t * h * w * width
    available = _remaining(stream)
    if available is not None and available < expected:
        raise TensorFormatError(f"Truncated payload: header declares {expected} bytes, {available} remain")
    payload = stream.read(expected)
    if len(payload) < expected:
        raise TensorFormatError(f"Truncated payload: got {len(payload)} of {expected} bytes")
    data = np.frombuffer(payload, dtype=_DTYPES[width]).reshape(dims)
    try:
        return FeatureMap4D(data.astype(data.dtype.newbyteorder('='), copy=True))
    except NonFiniteError as e:
        raise TensorFormatError(f"Payload holds non-finite values: {e}") from e


def save_tensor(path: PathLike, x: FeatureMap4D) -> None:
    with open(path, 'wb') as f:
        write_tensor(f, x)
    logger.debug(f"Wrote tensor {x.dims} ({x.precision}-bit) to {path}")


def load_tensor(path: PathLike) -> FeatureMap4D:
    with open(path, 'rb') as f:
        x = read_tensor(f)
        if f.read(1):
            raise TensorFormatError(f"Trailing bytes after tensor payload in {path}")
    logger.debug(f"Read tensor {x.dims} ({x.precision}-bit) from {path}")
    return x


def tensor_roundtrip(x: FeatureMap4D, path: PathLike) -> FeatureMap4D:
    """Write ``x`` to ``path`` and read it back."""
    save_tensor(path, x)
    return load_tensor(path)


def matrix_to_tensor(m: Matrix) -> FeatureMap4D:
    return FeatureMap4D(m.data.reshape(m.rows, m.cols, 1, 1))


def tensor_to_matrix(x: FeatureMap4D) -> Matrix:
    c, t, h, w = x.dims
    if h != 1 or w != 1:
        raise TensorFormatError(f"Tensor of dims {x.dims} does not hold a matrix")
    return Matrix(x.data.reshape(c, t))
