"""Rank-4 tensor primitives.

Every activation, image and gradient in the package is a ``numpy.ndarray``
of rank 4 stored channels-last (``n, h, w, c``). NCHW only appears at
import/export boundaries via :func:`permute_layout`.
"""

from __future__ import annotations

import enum
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import FormatError, ShapeError

F16_MAX = float(np.finfo(np.float16).max)  # 65504.0


class Layout(str, enum.Enum):
    NCHW = "NCHW"
    NHWC = "NHWC"


class DType(enum.IntEnum):
    """Dtype codes used by the ``.t4`` and ``LDNW`` file formats."""

    F32 = 0
    F16 = 1

    @property
    def numpy(self) -> np.dtype:
        return np.dtype(np.float32 if self is DType.F32 else np.float16)

    @classmethod
    def of(cls, dtype) -> "DType":
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.F32
        if dtype == np.float16:
            return cls.F16
        raise FormatError(f"no file dtype code for {dtype}")


def as_tensor4(x, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, h, w, c), got shape {x.shape}")
    return x


def permute_layout(x: np.ndarray, src: Layout | str, dst: Layout | str) -> np.ndarray:
    """Reorder a rank-4 tensor between NCHW and NHWC.

    The result is a fresh C-contiguous array, so its flat buffer is the
    row-major storage order of the target layout.
    """
    src, dst = Layout(src), Layout(dst)
    if src == dst:
        raise ShapeError(f"source and target layout are both {src.value}")
    x = as_tensor4(x)
    axes = (0, 2, 3, 1) if src is Layout.NCHW else (0, 3, 1, 2)
    return np.ascontiguousarray(x.transpose(axes))


def nchw_to_nhwc(x: np.ndarray, dims: tuple[int, int, int, int]) -> np.ndarray:
    """Interpret a flat NCHW buffer with declared ``dims`` and return NHWC."""
    flat = np.asarray(x).reshape(-1)
    if flat.size != int(np.prod(dims)):
        raise ShapeError(f"buffer of {flat.size} values does not match NCHW dims {dims}")
    return permute_layout(flat.reshape(dims), Layout.NCHW, Layout.NHWC)


def f16_saturation_count(x: np.ndarray) -> int:
    """Number of finite values whose magnitude exceeds the binary16 maximum."""
    x = np.asarray(x)
    return int(np.count_nonzero(np.isfinite(x) & (np.abs(x) > F16_MAX)))


def cast(x: np.ndarray, dtype, *, return_saturation: bool = False):
    """Cast between float32 and float16.

    Narrowing uses IEEE round-to-nearest-even. Finite values beyond the
    float16 range saturate to +/-65504 instead of overflowing to infinity.
    Widening is exact.
    """
    x = np.asarray(x)
    dtype = np.dtype(dtype)
    saturated = 0
    if dtype == np.float16 and x.dtype != np.float16:
        saturated = f16_saturation_count(x)
        # infinities and NaN pass through unchanged; only finite overflow saturates
        src = np.where(np.isfinite(x), np.clip(x, -F16_MAX, F16_MAX), x) if saturated else x
        out = src.astype(np.float16)
    else:
        out = x.astype(dtype)
    if return_saturation:
        return out, saturated
    return out


def round_f16(x: np.ndarray) -> np.ndarray:
    """Round to the nearest float16 value but keep ``x``'s dtype."""
    return cast(x, np.float16).astype(x.dtype)


def pad(x: np.ndarray, top: int, bottom: int, left: int, right: int, mode: str = "zero") -> np.ndarray:
    """Pad the two spatial axes.

    ``reflect`` mirrors without repeating the edge pixel, so every amount
    must be smaller than the corresponding extent.
    """
    x = as_tensor4(x)
    amounts = (top, bottom, left, right)
    if min(amounts) < 0:
        raise ShapeError(f"negative pad amount in {amounts}")
    widths = ((0, 0), (top, bottom), (left, right), (0, 0))
    if mode == "zero":
        return np.pad(x, widths, mode="constant")
    if mode == "reflect":
        h, w = x.shape[1:3]
        if max(top, bottom) >= h or max(left, right) >= w:
            raise ShapeError(f"reflect pad {amounts} needs amounts below extents ({h}, {w})")
        return np.pad(x, widths, mode="reflect")
    raise ValueError(f"unknown pad mode {mode!r}")


def crop(x: np.ndarray, y0: int, x0: int, h: int, w: int) -> np.ndarray:
    x = as_tensor4(x)
    H, W = x.shape[1:3]
    if y0 < 0 or x0 < 0 or h < 0 or w < 0 or y0 + h > H or x0 + w > W:
        raise ShapeError(f"window origin ({y0}, {x0}) size ({h}, {w}) exceeds extents ({H}, {W})")
    return x[:, y0 : y0 + h, x0 : x0 + w, :].copy()


def crop_border(x: np.ndarray, border: int = 1) -> np.ndarray:
    x = as_tensor4(x)
    H, W = x.shape[1:3]
    return crop(x, border, border, H - 2 * border, W - 2 * border)


# --- ".t4" raw tensor fixtures -------------------------------------------------

_T4_MAGIC = b"T4RW"
_T4_HEADER = struct.Struct("<4sB4I")


def write_t4(path_or_file, x: np.ndarray) -> None:
    x = as_tensor4(x)
    code = DType.of(x.dtype)
    payload = np.ascontiguousarray(x, dtype=code.numpy.newbyteorder("<")).tobytes()
    header = _T4_HEADER.pack(_T4_MAGIC, int(code), *x.shape)
    if isinstance(path_or_file, (str, Path)):
        Path(path_or_file).write_bytes(header + payload)
    else:
        path_or_file.write(header + payload)


def read_t4(path_or_file: str | Path | BinaryIO) -> np.ndarray:
    if isinstance(path_or_file, (str, Path)):
        raw = Path(path_or_file).read_bytes()
    else:
        raw = path_or_file.read()
    if len(raw) < _T4_HEADER.size:
        raise FormatError("truncated .t4 header")
    magic, code, *dims = _T4_HEADER.unpack_from(raw)
    if magic != _T4_MAGIC:
        raise FormatError(f"bad .t4 magic {magic!r}")
    try:
        dtype = DType(code).numpy.newbyteorder("<")
    except ValueError:
        raise FormatError(f"unknown .t4 dtype code {code}") from None
    count = int(np.prod(dims))
    body = raw[_T4_HEADER.size :]
    if len(body) != count * dtype.itemsize:
        raise FormatError(f"payload holds {len(body)} bytes, dims {tuple(dims)} need {count * dtype.itemsize}")
    return np.frombuffer(body, dtype=dtype).astype(dtype.newbyteorder("=")).reshape(dims)
