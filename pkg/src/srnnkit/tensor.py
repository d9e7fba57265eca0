"""Dense H x W x C activation maps and the structural ops the 2D recurrent layers use.

Data is stored row-major (height, then width, then channels) so that a row
(fixed ``j``, varying ``k``) is the contiguous scan unit of a row-wise RNN.
Arrays held by :class:`ImageTensor` and :class:`SeqTensor` are made read-only
on construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_PRECISIONS = {"single": np.float32, "double": np.float64}

TEXT_MAGIC = "IMGT-TEXT"
BINARY_MAGIC = b"IMGTBIN1"


class ShapeError(ValueError):
    """Raised when tensor or parameter shapes do not line up."""


class TensorFormatError(ValueError):
    """Base class for IMGT parse failures."""


class HeaderError(TensorFormatError):
    pass


class ElementCountError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


def precision_of(dtype) -> str:
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        return "single"
    if dtype == np.float64:
        return "double"
    raise TypeError(f"unsupported element type {dtype}")


def dtype_of(precision: str):
    try:
        return _PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"precision must be 'single' or 'double', got {precision!r}") from None


def _frozen(data, ndim: int, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
    arr = np.array(arr, dtype=dtype, order="C", copy=True)
    if arr.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if min(arr.shape, default=1) < 1:
        raise ShapeError(f"all dimensions must be positive, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """An immutable ``H x W x C`` feature map.

    ``data`` is a read-only C-contiguous float32 or float64 array; its dtype is
    the precision tag.
    """

    data: np.ndarray

    def __init__(self, data, precision: str | None = None):
        dtype = None if precision is None else dtype_of(precision)
        object.__setattr__(self, "data", _frozen(data, 3, dtype))

    @classmethod
    def zeros(cls, height: int, width: int, channels: int, precision: str = "double") -> ImageTensor:
        return cls(np.zeros((height, width, channels), dtype=dtype_of(precision)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def precision(self) -> str:
        return precision_of(self.data.dtype)

    def astype(self, precision: str) -> ImageTensor:
        return ImageTensor(self.data, precision)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __getitem__(self, idx):
        return self.data[idx]

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.data.dtype == other.data.dtype and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"ImageTensor({self.height}x{self.width}x{self.channels}, {self.precision})"


@dataclass(frozen=True, eq=False)
class SeqTensor:
    """An immutable ``L x C`` sequence of feature vectors."""

    data: np.ndarray

    def __init__(self, data, precision: str | None = None):
        dtype = None if precision is None else dtype_of(precision)
        object.__setattr__(self, "data", _frozen(data, 2, dtype))

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def precision(self) -> str:
        return precision_of(self.data.dtype)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, SeqTensor):
            return NotImplemented
        return self.data.dtype == other.data.dtype and np.array_equal(self.data, other.data)


# Array-level versions operate on the last three axes so batched (N, H, W, C)
# arrays go through the same code path as single images.

def transpose_array(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.swapaxes(x, -3, -2))


def flip_array(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., ::-1, :])


def transpose_hw(x: ImageTensor) -> ImageTensor:
    """Swap height and width: ``out[j, k, c] == x[k, j, c]``."""
    return ImageTensor(transpose_array(x.data))


def flip_w(x: ImageTensor) -> ImageTensor:
    """Reverse the column order of every row: ``out[j, k, c] == x[j, W-1-k, c]``."""
    return ImageTensor(flip_array(x.data))


def save_tensor(x: ImageTensor, path, encoding: str = "binary") -> None:
    """Write ``x`` in IMGT format.

    The binary encoding stores float32, so it is bit-exact only for
    single-precision tensors. The text encoding uses shortest round-trip
    decimal repr and preserves doubles exactly.
    """
    path = Path(path)
    h, w, c = x.shape
    if encoding == "binary":
        payload = np.ascontiguousarray(x.data, dtype="<f4").tobytes()
        path.write_bytes(BINARY_MAGIC + struct.pack("<III", h, w, c) + payload)
    elif encoding == "text":
        lines = [f"{TEXT_MAGIC} {h} {w} {c}"]
        for row in x.data.reshape(h * w, c):
            lines.append(" ".join(repr(float(v)) for v in row))
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown encoding {encoding!r}")


def load_tensor(path) -> ImageTensor:
    """Read an IMGT file, picking the encoding from its magic bytes."""
    raw = Path(path).read_bytes()
    if raw.startswith(BINARY_MAGIC):
        return _parse_binary(raw)
    if raw.startswith(TEXT_MAGIC.encode()):
        return _parse_text(raw.decode("ascii", errors="replace"))
    raise HeaderError("byte 0: missing IMGT magic (expected 'IMGTBIN1' or 'IMGT-TEXT')")


def _parse_binary(raw: bytes) -> ImageTensor:
    off = len(BINARY_MAGIC)
    if len(raw) < off + 12:
        raise HeaderError(f"byte {off}: truncated header, need 12 bytes of dimensions")
    h, w, c = struct.unpack_from("<III", raw, off)
    if min(h, w, c) == 0:
        raise HeaderError(f"byte {off}: dimensions must be positive, got {h}x{w}x{c}")
    off += 12
    expected = h * w * c
    payload = raw[off:]
    if len(payload) % 4:
        raise ElementCountError(f"byte {len(raw)}: payload length {len(payload)} is not a multiple of 4")
    got = len(payload) // 4
    if got != expected:
        raise ElementCountError(
            f"byte {off}: header advertises {h}x{w}x{c}={expected} values, payload holds {got}"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise NonFiniteError(f"byte {off + 4 * int(bad[0])}: non-finite value")
    return ImageTensor(data.reshape(h, w, c))


def _parse_text(text: str) -> ImageTensor:
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) != 4 or head[0] != TEXT_MAGIC:
        raise HeaderError(f"line 1: expected '{TEXT_MAGIC} H W C', got {lines[0]!r}")
    try:
        h, w, c = (int(t) for t in head[1:])
    except ValueError:
        raise HeaderError(f"line 1: non-integer dimension in {lines[0]!r}") from None
    if min(h, w, c) <= 0:
        raise HeaderError(f"line 1: dimensions must be positive, got {h}x{w}x{c}")
    values = []
    for lineno, line in enumerate(lines[1:], start=2):
        for tok in line.split():
            try:
                v = float(tok)
            except ValueError:
                raise TensorFormatError(f"line {lineno}: cannot parse {tok!r} as a number") from None
            if not np.isfinite(v):
                raise NonFiniteError(f"line {lineno}: non-finite value {tok!r}")
            values.append(v)
    if len(values) != h * w * c:
        raise ElementCountError(
            f"line {len(lines)}: header advertises {h}x{w}x{c}={h * w * c} values, found {len(values)}"
        )
    return ImageTensor(np.array(values, dtype=np.float64).reshape(h, w, c))
