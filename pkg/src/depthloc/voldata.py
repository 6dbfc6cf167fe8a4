"""Grid data model and binary I/O for volumes, mask stacks, and depth images.

Axis convention: X runs left-right, Y runs posterior to anterior (a camera
facing the anterior surface looks along -Y), Z runs inferior to superior.
The coronal plane is X-Z, so every 2D grid here is indexed ``[x, z]`` with
width W along X and height H along Z.

File formats (all little-endian):

``.dvol``
    magic ``DVOL``, version u8 (=1), dtype u8 (0 = float32, 1 = uint8),
    dims 3*u32 (X, Y, Z), spacing 3*f32 mm, then the raw payload.
``.dmsk``
    magic ``DMSK``, version u8 (=1), n_channels u8, dims 2*u32 (W, H),
    spacing 2*f32 mm, then per channel a u16 name length, the UTF-8 name,
    and W*H uint8 values.
``.ddep``
    magic ``DDEP``, version u8 (=1), dims 2*u32 (W, H), spacing 2*f32 mm,
    then W*H float32 values.

Payloads are stored X-fastest: the voxel (x, y, z) sits at flat index
``x + X*(y + Y*z)`` and the pixel (x, z) at ``x + W*z``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

#: Canonical organ order used by every mask stack and report in the package.
ORGAN_NAMES = (
    "hips",
    "femurs",
    "vertebra",
    "heart",
    "lungs",
    "kidneys",
    "liver",
    "pancreas",
    "spleen",
    "stomach",
    "urinary_bladder",
)

_VERSION = 1
_DTYPE_F32 = 0
_DTYPE_U8 = 1


class FileFormatError(ValueError):
    """A file does not conform to one of the binary formats above."""


class BadMagicError(FileFormatError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class UnknownDtypeError(FileFormatError):
    pass


class TruncatedPayloadError(FileFormatError):
    """The file ended early or carries trailing bytes."""


class GridInvariantError(ValueError):
    """A grid object violates one of its construction invariants."""


def _check_dims(dims, rank):
    dims = tuple(int(d) for d in dims)
    if len(dims) != rank or any(d < 1 for d in dims):
        raise GridInvariantError(f"dims must be {rank} positive integers, got {dims}")
    return dims


def _check_spacing(spacing, rank):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != rank or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise GridInvariantError(f"spacing must be {rank} positive floats, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """A scalar 3D grid with voxel spacing in millimetres.

    ``values`` is float32 with shape ``dims`` = (X, Y, Z).
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", _check_dims(self.dims, 3))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, 3))
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape != self.dims:
            raise GridInvariantError(
                f"values shape {values.shape} does not match dims {self.dims}"
            )
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class BinaryVolume:
    """A 3D mask holding only 0/1, same layout as :class:`Volume`."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", _check_dims(self.dims, 3))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, 3))
        values = np.asarray(self.values, dtype=np.uint8)
        if values.shape != self.dims:
            raise GridInvariantError(
                f"values shape {values.shape} does not match dims {self.dims}"
            )
        if values.size and values.max() > 1:
            raise GridInvariantError("binary volume holds values outside {0, 1}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class DepthImage:
    """A coronal depth image: ``values`` is float32 in [0, 1], shape (W, H)."""

    dims: tuple[int, int]
    spacing: tuple[float, float]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", _check_dims(self.dims, 2))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, 2))
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape != self.dims:
            raise GridInvariantError(
                f"values shape {values.shape} does not match dims {self.dims}"
            )
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise GridInvariantError("depth values must lie in [0, 1]")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class MaskStack:
    """Named 2D binary masks sharing one coronal grid.

    ``channels`` is uint8 with shape (C, W, H); channel c belongs to
    ``organ_names[c]``.
    """

    organ_names: tuple[str, ...]
    dims: tuple[int, int]
    spacing: tuple[float, float]
    channels: np.ndarray

    def __post_init__(self):
        names = tuple(str(n) for n in self.organ_names)
        if not names:
            raise GridInvariantError("mask stack needs at least one channel")
        if len(set(names)) != len(names):
            raise GridInvariantError("mask stack channel names must be unique")
        object.__setattr__(self, "organ_names", names)
        object.__setattr__(self, "dims", _check_dims(self.dims, 2))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, 2))
        channels = np.asarray(self.channels, dtype=np.uint8)
        if channels.shape != (len(names),) + self.dims:
            raise GridInvariantError(
                f"channels shape {channels.shape} does not match "
                f"({len(names)},) + {self.dims}"
            )
        if channels.size and channels.max() > 1:
            raise GridInvariantError("mask channels hold values outside {0, 1}")
        object.__setattr__(self, "channels", channels)


class _Reader:
    """Cursor over an in-memory file image with exact-length accounting."""

    def __init__(self, path):
        self.path = Path(path)
        self.buf = self.path.read_bytes()
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        raw = self.take(dt.itemsize * count)
        return np.frombuffer(raw, dtype=dt, count=count)

    def expect_magic(self, magic):
        got = self.take(4)
        if got != magic:
            raise BadMagicError(f"{self.path}: expected magic {magic!r}, got {got!r}")

    def expect_version(self):
        (version,) = self.unpack("<B")
        if version != _VERSION:
            raise VersionMismatchError(
                f"{self.path}: unsupported format version {version}"
            )

    def finish(self):
        if self.pos != len(self.buf):
            raise TruncatedPayloadError(
                f"{self.path}: {len(self.buf) - self.pos} unexpected trailing bytes"
            )


def _payload_3d(arr):
    # X-fastest flattening of an (X, Y, Z) array.
    return np.ascontiguousarray(arr.transpose(2, 1, 0)).tobytes()


def _payload_2d(arr):
    return np.ascontiguousarray(arr.T).tobytes()


def _reshape_3d(flat, dims):
    return flat.reshape(dims, order="F")


def _reshape_2d(flat, dims):
    return flat.reshape(dims, order="F")


def write_dvol_payload(path, values, spacing):
    """Write a raw uint8 or float32 (X, Y, Z) array as a .dvol file.

    This is the low-level writer behind :func:`write_volume`; uint8 payloads
    are not restricted to {0, 1}, which lets callers store coded label grids.
    """

    values = np.asarray(values)
    if values.ndim != 3:
        raise GridInvariantError("dvol payload must be a 3D array")
    if values.dtype == np.float32:
        code = _DTYPE_F32
    elif values.dtype == np.uint8:
        code = _DTYPE_U8
    else:
        raise GridInvariantError(f"dvol payload dtype {values.dtype} not supported")
    spacing = _check_spacing(spacing, 3)
    header = b"DVOL" + struct.pack(
        "<BB3I3f", _VERSION, code, *values.shape, *spacing
    )
    Path(path).write_bytes(header + _payload_3d(values))


def read_dvol_payload(path):
    """Read a .dvol file; returns ``(values, spacing)`` without {0,1} checks."""

    r = _Reader(path)
    r.expect_magic(b"DVOL")
    r.expect_version()
    (code,) = r.unpack("<B")
    if code == _DTYPE_F32:
        dtype = "<f4"
    elif code == _DTYPE_U8:
        dtype = "u1"
    else:
        raise UnknownDtypeError(f"{r.path}: unknown dtype code {code}")
    dims = r.unpack("<3I")
    spacing = r.unpack("<3f")
    n = dims[0] * dims[1] * dims[2]
    flat = r.array(dtype, n)
    r.finish()
    return _reshape_3d(flat, dims), spacing


def write_volume(path, volume):
    """Serialize a :class:`Volume` or :class:`BinaryVolume` to a .dvol file."""

    if isinstance(volume, Volume):
        values = volume.values
    elif isinstance(volume, BinaryVolume):
        values = volume.values
    else:
        raise TypeError(f"cannot serialize {type(volume).__name__} as a volume")
    write_dvol_payload(path, values, volume.spacing)


def read_volume(path):
    """Read a .dvol file into a :class:`Volume` (f32) or :class:`BinaryVolume` (u8)."""

    values, spacing = read_dvol_payload(path)
    if values.dtype == np.uint8:
        return BinaryVolume(values.shape, spacing, values)
    return Volume(values.shape, spacing, values)


def write_maskstack(path, stack):
    """Serialize a :class:`MaskStack` to a .dmsk file."""

    if not isinstance(stack, MaskStack):
        raise TypeError(f"cannot serialize {type(stack).__name__} as a mask stack")
    n = len(stack.organ_names)
    if n > 255:
        raise GridInvariantError("mask stack has too many channels for the format")
    parts = [
        b"DMSK",
        struct.pack("<BB2I2f", _VERSION, n, *stack.dims, *stack.spacing),
    ]
    for name, channel in zip(stack.organ_names, stack.channels):
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise GridInvariantError(f"channel name too long: {name!r}")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(_payload_2d(channel))
    Path(path).write_bytes(b"".join(parts))


def read_maskstack(path):
    r = _Reader(path)
    r.expect_magic(b"DMSK")
    r.expect_version()
    (n,) = r.unpack("<B")
    dims = r.unpack("<2I")
    spacing = r.unpack("<2f")
    names = []
    channels = np.empty((n,) + dims, dtype=np.uint8)
    for c in range(n):
        (name_len,) = r.unpack("<H")
        names.append(r.take(name_len).decode("utf-8"))
        flat = r.array("u1", dims[0] * dims[1])
        channels[c] = _reshape_2d(flat, dims)
    r.finish()
    return MaskStack(tuple(names), dims, spacing, channels)


def write_depth(path, depth):
    """Serialize a :class:`DepthImage` to a .ddep file."""

    if not isinstance(depth, DepthImage):
        raise TypeError(f"cannot serialize {type(depth).__name__} as a depth image")
    header = b"DDEP" + struct.pack("<B2I2f", _VERSION, *depth.dims, *depth.spacing)
    Path(path).write_bytes(header + _payload_2d(depth.values))


def read_depth(path):
    r = _Reader(path)
    r.expect_magic(b"DDEP")
    r.expect_version()
    dims = r.unpack("<2I")
    spacing = r.unpack("<2f")
    flat = r.array("<f4", dims[0] * dims[1])
    r.finish()
    return DepthImage(dims, spacing, _reshape_2d(flat, dims))
