"""3D scalar volumes, binary masks and MetaImage-subset file I/O.

Arrays are indexed ``[x, y, z]`` with shape ``(nx, ny, nz)``; on disk the
elements are packed x-fastest, i.e. Fortran order of that array. Spacing is
in centimetres per voxel along each axis.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BoundsError,
    FormatError,
    InputFormatError,
    ParameterError,
    RangeError,
    ShapeError,
    TruncationError,
    UnsupportedTypeError,
)

__all__ = [
    "Volume",
    "BinaryMask",
    "VoxelRegion",
    "read_volume",
    "write_volume",
    "read_mask",
    "write_mask",
    "difference",
    "crop",
    "mask_volume_cm3",
]

# MetaImage element type -> (numpy little-endian dtype, short name)
ELEMENT_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
}
_SHORT_NAMES = {"uint8": "MET_UCHAR", "int16": "MET_SHORT", "float32": "MET_FLOAT"}


def _as_triple(values, kind, name):
    t = tuple(kind(v) for v in values)
    if len(t) != 3:
        raise ParameterError(f"{name} must have three components, got {len(t)}")
    return t


def _check_spacing(spacing):
    spacing = _as_triple(spacing, float, "spacing")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ParameterError(f"spacing must be strictly positive, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3D scalar field with physical voxel spacing (cm)."""

    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("volume data contains NaN or Inf")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    @property
    def h(self):
        """Smallest spacing component."""
        return min(self.spacing)

    def with_data(self, data):
        return Volume(data, self.spacing)

    def same_grid(self, other):
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing, rtol=1e-12, atol=0)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray
    spacing: tuple

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 3 or min(bits.shape) < 1:
            raise ShapeError(f"mask must be a non-empty 3D array, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return tuple(int(n) for n in self.bits.shape)

    @property
    def count(self):
        return int(np.count_nonzero(self.bits))

    def same_grid(self, other):
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing, rtol=1e-12, atol=0)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True)
class VoxelRegion:
    """Crop box, ``lo`` inclusive and ``hi`` exclusive."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", _as_triple(self.lo, int, "lo"))
        object.__setattr__(self, "hi", _as_triple(self.hi, int, "hi"))
        if any(a < 0 or a > b for a, b in zip(self.lo, self.hi)):
            raise BoundsError(f"invalid region lo={self.lo} hi={self.hi}")

    @property
    def slices(self):
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def check_within(self, dims):
        if any(b > n for b, n in zip(self.hi, dims)):
            raise BoundsError(f"region hi={self.hi} exceeds dims {tuple(dims)}")


# --- file I/O ----------------------------------------------------------------

_REQUIRED = ("NDims", "DimSize", "ElementSpacing", "ElementType", "ElementByteOrderMSB", "ElementDataFile")


def _parse_header(path):
    fields = {}
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"line {lineno}", f"expected 'KEY = VALUE', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            fields[key] = value
    for key in _REQUIRED:
        if key not in fields:
            raise FormatError(key, "required key missing")

    if fields["NDims"] != "3":
        raise FormatError("NDims", f"must be 3, got {fields['NDims']!r}")
    try:
        dims = tuple(int(v) for v in fields["DimSize"].split())
    except ValueError:
        raise FormatError("DimSize", f"not integers: {fields['DimSize']!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError("DimSize", f"need three positive integers, got {fields['DimSize']!r}")
    try:
        spacing = tuple(float(v) for v in fields["ElementSpacing"].split())
    except ValueError:
        raise FormatError("ElementSpacing", f"not reals: {fields['ElementSpacing']!r}") from None
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise FormatError("ElementSpacing", f"need three positive reals, got {fields['ElementSpacing']!r}")
    etype = fields["ElementType"]
    if etype not in ELEMENT_TYPES:
        raise UnsupportedTypeError(f"ElementType {etype!r} is not one of {sorted(ELEMENT_TYPES)}")
    msb = fields["ElementByteOrderMSB"].lower()
    if msb not in ("false", "true"):
        raise FormatError("ElementByteOrderMSB", f"expected True/False, got {fields['ElementByteOrderMSB']!r}")
    dtype = ELEMENT_TYPES[etype]
    if msb == "true":
        dtype = dtype.newbyteorder(">")
    raw = Path(path).parent / fields["ElementDataFile"]
    return dims, spacing, dtype, raw


def _read_raw(path):
    if not os.path.exists(path):
        raise InputFormatError(f"no such file: {path}")
    dims, spacing, dtype, raw = _parse_header(path)
    if not raw.exists():
        raise InputFormatError(f"data file not found: {raw}")
    n = dims[0] * dims[1] * dims[2]
    buf = raw.read_bytes()
    if len(buf) < n * dtype.itemsize:
        raise TruncationError(
            f"{raw}: expected {n} elements ({n * dtype.itemsize} bytes), found {len(buf)} bytes"
        )
    flat = np.frombuffer(buf, dtype=dtype, count=n)
    return flat.reshape(dims, order="F"), spacing


def read_volume(path) -> Volume:
    """Read a ``.mhd`` header and its raw data file.

    Integer element types are converted to float64 without rescaling.
    """
    arr, spacing = _read_raw(path)
    return Volume(arr.astype(np.float64), spacing)


def _header_text(dims, spacing, etype, raw_name):
    return (
        "ObjectType = Image\n"
        "NDims = 3\n"
        f"DimSize = {dims[0]} {dims[1]} {dims[2]}\n"
        f"ElementSpacing = {float(spacing[0])!r} {float(spacing[1])!r} {float(spacing[2])!r}\n"
        f"ElementType = {etype}\n"
        "ElementByteOrderMSB = False\n"
        f"ElementDataFile = {raw_name}\n"
    )


def _write_raw(arr, spacing, path, etype):
    path = Path(path)
    raw_path = path.with_suffix(".raw")
    raw_path.write_bytes(np.asarray(arr, dtype=ELEMENT_TYPES[etype]).tobytes(order="F"))
    path.write_text(_header_text(arr.shape, spacing, etype, raw_path.name))


def _encode(data, element_type):
    if element_type == "float32":
        out = data.astype(np.float32)
        bad = ~np.isfinite(out)
        if bad.any():
            idx = np.unravel_index(np.flatnonzero(bad.ravel(order="F"))[0], data.shape, order="F")
            raise RangeError(tuple(int(i) for i in idx), float(data[idx]), element_type)
        return out
    info = np.iinfo(element_type)
    rounded = np.rint(data)
    bad = (rounded < info.min) | (rounded > info.max)
    if bad.any():
        first = np.flatnonzero(bad.ravel(order="F"))[0]
        idx = tuple(int(i) for i in np.unravel_index(first, data.shape, order="F"))
        raise RangeError(idx, float(data[idx]), element_type)
    return rounded.astype(element_type)


def write_volume(v: Volume, path, element_type="float32"):
    """Write ``v`` as ``path`` (header) plus ``path`` with a ``.raw`` suffix.

    Integral element types round half to even before the range check. A
    float32 round trip is exact only for values representable in float32.
    """
    if element_type not in _SHORT_NAMES:
        raise UnsupportedTypeError(f"element type {element_type!r} not in {sorted(_SHORT_NAMES)}")
    _write_raw(_encode(v.data, element_type), v.spacing, path, _SHORT_NAMES[element_type])


def read_mask(path) -> BinaryMask:
    arr, spacing = _read_raw(path)
    return BinaryMask(arr != 0, spacing)


def write_mask(m: BinaryMask, path):
    _write_raw(np.where(m.bits, 255, 0).astype(np.uint8), m.spacing, path, "MET_UCHAR")


# --- element-wise operations -------------------------------------------------


def difference(post: Volume, pre: Volume) -> Volume:
    if post.dims != pre.dims or post.spacing != pre.spacing:
        raise ShapeError(
            f"grid mismatch: post {post.dims}@{post.spacing} vs pre {pre.dims}@{pre.spacing}"
        )
    return Volume(post.data - pre.data, post.spacing)


def crop(v, r: VoxelRegion):
    """Sub-volume (or sub-mask) of ``v`` over ``r``; spacing is preserved."""
    r.check_within(v.dims)
    if any(a == b for a, b in zip(r.lo, r.hi)):
        raise BoundsError(f"region lo={r.lo} hi={r.hi} is empty")
    if isinstance(v, BinaryMask):
        return BinaryMask(v.bits[r.slices], v.spacing)
    return Volume(v.data[r.slices], v.spacing)


def mask_volume_cm3(m: BinaryMask) -> float:
    sx, sy, sz = m.spacing
    return m.count * sx * sy * sz
