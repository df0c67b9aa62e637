"""Dense 3D grids and the LVOL1 container format.

A grid is a flat array in x-fastest (row-major over z,y,x) order, so the
flat index of voxel (x, y, z) is ``x + nx*(y + ny*z)``.  Two payload types
share one container: f32 volumes (images, probabilities, weights) and u8
binary masks.  Everything downstream consumes these two types.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"LVOL1"


class VolumeFormatError(ValueError):
    """Raised when an LVOL1 file cannot be parsed; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Dims:
    """Voxel counts per axis."""

    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for axis, n in zip("xyz", (self.nx, self.ny, self.nz)):
            if not isinstance(n, (int, np.integer)) or n < 1:
                raise ValueError(f"dimension n{axis} must be a positive integer, got {n!r}")

    @property
    def count(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def shape3d(self) -> tuple[int, int, int]:
        """Numpy shape (nz, ny, nx) whose C order matches the flat layout."""
        return (self.nz, self.ny, self.nx)


def linear_index(dims: Dims, x: int, y: int, z: int) -> int:
    """Flat index of voxel (x, y, z); bijective over the grid."""
    for axis, c, n in (("x", x, dims.nx), ("y", y, dims.ny), ("z", z, dims.nz)):
        if not 0 <= c < n:
            raise IndexError(f"{axis} coordinate {c} out of range [0, {n})")
    return x + dims.nx * (y + dims.ny * z)


def _prepare(data, dims: Dims, dtype) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True).reshape(-1)
    if arr.size != dims.count:
        raise ValueError(f"data length {arr.size} != nx*ny*nz = {dims.count}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Volume:
    """f32 scalar grid: intensities, probabilities, or weight values."""

    dims: Dims
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _prepare(self.data, self.dims, np.float32)
        if not np.isfinite(arr).all():
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise ValueError(f"non-finite value at flat index {bad}")
        object.__setattr__(self, "data", arr)

    def as3d(self) -> np.ndarray:
        """Read-only (nz, ny, nx) view of the flat data."""
        return self.data.reshape(self.dims.shape3d)


@dataclass(frozen=True)
class Mask:
    """u8 binary grid; foreground voxels are 1."""

    dims: Dims
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _prepare(self.data, self.dims, np.uint8)
        if arr.size and arr.max() > 1:
            bad = int(np.flatnonzero(arr > 1)[0])
            raise ValueError(f"mask value {arr[bad]} at flat index {bad} is not in {{0,1}}")
        object.__setattr__(self, "data", arr)

    def as3d(self) -> np.ndarray:
        return self.data.reshape(self.dims.shape3d)

    @property
    def foreground_count(self) -> int:
        return int(self.data.sum())


_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def write_volume(path, grid: Volume | Mask) -> None:
    """Write a Volume or Mask in the LVOL1 format.

    Layout: magic "LVOL1" | header length (u32 LE) | UTF-8 JSON header
    {"dims":[nx,ny,nz],"dtype":"f32"|"u8","order":"x-fastest"} | raw
    little-endian payload.  Grid invariants are re-checked before any
    byte is written.
    """
    if isinstance(grid, Volume):
        dtype_tag = "f32"
    elif isinstance(grid, Mask):
        dtype_tag = "u8"
    else:
        raise TypeError(f"expected Volume or Mask, got {type(grid).__name__}")
    dims = grid.dims
    payload = np.ascontiguousarray(grid.data, dtype=_DTYPES[dtype_tag])
    if payload.size != dims.count:
        raise ValueError(f"payload length {payload.size} != dims product {dims.count}")
    if dtype_tag == "f32" and not np.isfinite(payload).all():
        raise ValueError("refusing to write non-finite values")
    header = json.dumps(
        {"dims": [dims.nx, dims.ny, dims.nz], "dtype": dtype_tag, "order": "x-fastest"},
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload.tobytes())


def read_volume(path) -> Volume | Mask:
    """Read an LVOL1 file; returns a Volume (f32) or Mask (u8) per its header.

    Round-trips bit-exactly with write_volume.  Malformed input raises
    VolumeFormatError with the byte offset of the problem.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise VolumeFormatError(f"bad magic {blob[:5]!r}, expected {MAGIC!r}", 0)
    if len(blob) < 9:
        raise VolumeFormatError("truncated header length field", 5)
    (hlen,) = struct.unpack_from("<I", blob, 5)
    if len(blob) < 9 + hlen:
        raise VolumeFormatError("truncated JSON header", 9)
    try:
        header = json.loads(blob[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"unparseable JSON header: {exc}", 9) from exc
    payload_off = 9 + hlen
    try:
        nx, ny, nz = (int(v) for v in header["dims"])
        dtype_tag = header["dtype"]
        order = header["order"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"bad header fields: {exc}", 9) from exc
    if order != "x-fastest":
        raise VolumeFormatError(f"unsupported order {order!r}", 9)
    if dtype_tag not in _DTYPES:
        raise VolumeFormatError(f"dtype mismatch: {dtype_tag!r} not in ('f32', 'u8')", 9)
    dims = Dims(nx, ny, nz)
    dtype = _DTYPES[dtype_tag]
    expected = dims.count * dtype.itemsize
    actual = len(blob) - payload_off
    if actual < expected:
        raise VolumeFormatError(
            f"truncated payload: expected {expected} bytes, found {actual}", payload_off
        )
    if actual > expected:
        raise VolumeFormatError(f"trailing garbage after {expected} payload bytes", payload_off + expected)
    arr = np.frombuffer(blob, dtype=dtype, count=dims.count, offset=payload_off)
    if dtype_tag == "f32":
        finite = np.isfinite(arr)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise VolumeFormatError(
                f"non-finite value at element {bad}", payload_off + 4 * bad
            )
        return Volume(dims, arr)
    if arr.size and arr.max() > 1:
        bad = int(np.flatnonzero(arr > 1)[0])
        raise VolumeFormatError(f"mask value {arr[bad]} not in {{0,1}}", payload_off + bad)
    return Mask(dims, arr)
