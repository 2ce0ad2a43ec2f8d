"""Voxel grids in Hounsfield units: construction, sampling, MetaImage I/O, calibration."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


class VolumeFormatError(ValueError):
    """Raised for unreadable or inconsistent volume files."""


@dataclass(frozen=True)
class Calibration:
    """Linear HU -> mg/cm^3 map. Identity by default (synthetic phantoms are
    authored directly in mg/cm^3)."""

    slope: float = 1.0
    intercept: float = 0.0

    def __post_init__(self):
        if self.slope <= 0:
            raise ValueError(f"calibration slope must be > 0, got {self.slope}")

    def bmd(self, hu):
        return self.slope * np.asarray(hu, dtype=np.float64) + self.intercept


def calibrate(value, cal: Calibration):
    """Map HU value(s) to density in mg/cm^3."""
    out = cal.bmd(value)
    return float(out) if np.isscalar(value) else out


@dataclass(frozen=True)
class VoxelVolume:
    """Immutable 3D scalar grid of int16 HU values.

    ``values`` is indexed [i, j, k] (x, y, z); the raw-file layout is
    x-fastest which corresponds to Fortran order of this array.
    World coordinate of voxel (i,j,k) = origin + (i*sx, j*sy, k*sz).
    """

    values: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"values must be a 3D array with all dims >= 1, got shape {v.shape}")
        if v.dtype != np.int16:
            raise ValueError(f"values must be int16 HU, got {v.dtype}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"all spacings must be > 0, got {self.spacing}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def index_to_world(self, idx):
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_index(self, point):
        p = np.asarray(point, dtype=np.float64)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)


def sample_trilinear(volume: VoxelVolume, point) -> float | np.ndarray:
    """Trilinear interpolation at world point(s); out-of-box coordinates clamp
    to the border voxel.

    ``point`` may be a single (3,) triple or an (N, 3) array.
    """
    p = np.atleast_2d(np.asarray(point, dtype=np.float64))
    idx = (p - np.asarray(volume.origin)) / np.asarray(volume.spacing)
    nx, ny, nz = volume.dims
    hi = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
    idx = np.clip(idx, 0.0, hi)

    # lower corner of the interpolation cell; degenerate axes stay at 0
    dims = np.array(volume.dims, dtype=np.intp)
    i0 = np.clip(np.floor(idx).astype(np.intp), 0, np.maximum(dims - 2, 0))
    f = idx - i0
    v = volume.values
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    c000 = v[x0, y0, z0].astype(np.float64)
    c100 = v[x1, y0, z0]
    c010 = v[x0, y1, z0]
    c110 = v[x1, y1, z0]
    c001 = v[x0, y0, z1]
    c101 = v[x1, y0, z1]
    c011 = v[x0, y1, z1]
    c111 = v[x1, y1, z1]

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    if np.asarray(point).ndim == 1:
        return float(out[0])
    return out


_HEADER_KEYS = ("ObjectType", "NDims", "DimSize", "ElementSpacing", "Offset",
                "ElementType", "ElementByteOrderMSB", "ElementDataFile")

_ELEMENT_TYPES = {"MET_SHORT": np.int16, "MET_UCHAR": np.uint8}


def save_volume(volume, path, element_type: str = "MET_SHORT") -> None:
    """Write a MetaImage-subset header/raw pair.

    ``path`` names the header file; the raw file sits next to it with the
    same stem and a .raw suffix. Label masks are written with
    element_type="MET_UCHAR".
    """
    path = os.fspath(path)
    stem = os.path.splitext(os.path.basename(path))[0]
    rawname = stem + ".raw"
    nx, ny, nz = volume.dims
    sx, sy, sz = volume.spacing
    ox, oy, oz = volume.origin
    dtype = _ELEMENT_TYPES[element_type]
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        f"DimSize = {nx} {ny} {nz}",
        f"ElementSpacing = {sx:.17g} {sy:.17g} {sz:.17g}",
        f"Offset = {ox:.17g} {oy:.17g} {oz:.17g}",
        f"ElementType = {element_type}",
        "ElementByteOrderMSB = False",
        f"ElementDataFile = {rawname}",
    ]
    raw = np.asarray(volume.values).astype(np.dtype(dtype).newbyteorder("<"))
    tmp_hdr = path + ".tmp"
    rawpath = os.path.join(os.path.dirname(path) or ".", rawname)
    tmp_raw = rawpath + ".tmp"
    with open(tmp_hdr, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(tmp_raw, "wb") as fr:
        # x-fastest layout: Fortran order of the [i,j,k]-indexed array
        fr.write(raw.tobytes(order="F"))
    os.replace(tmp_hdr, path)
    os.replace(tmp_raw, rawpath)


def _parse_header(path):
    fields = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise VolumeFormatError(f"malformed header line: {line!r}")
            key, _, val = line.partition("=")
            fields[key.strip()] = val.strip()
    return fields


def load_volume(path):
    """Read a MetaImage-subset header/raw pair written by save_volume.

    Returns a VoxelVolume for MET_SHORT data, or a (uint8 array, spacing,
    origin) for MET_UCHAR label masks via load_mask().
    """
    arr, spacing, origin, etype = _load_raw(path)
    if etype != "MET_SHORT":
        raise VolumeFormatError(f"unsupported element type for a volume: {etype}")
    return VoxelVolume(arr, spacing, origin)


def load_mask(path):
    """Read a MET_UCHAR label mask; returns (labels array, spacing, origin)."""
    arr, spacing, origin, etype = _load_raw(path)
    if etype != "MET_UCHAR":
        raise VolumeFormatError(f"expected MET_UCHAR mask, got {etype}")
    return arr, spacing, origin


def _load_raw(path):
    path = os.fspath(path)
    fields = _parse_header(path)
    for key in _HEADER_KEYS:
        if key not in fields:
            raise VolumeFormatError(f"missing header key {key}")
    if fields["ObjectType"] != "Image" or fields["NDims"] != "3":
        raise VolumeFormatError("only 3D Image objects are supported")
    if fields["ElementByteOrderMSB"] != "False":
        raise VolumeFormatError("only little-endian data is supported")
    etype = fields["ElementType"]
    if etype not in _ELEMENT_TYPES:
        raise VolumeFormatError(f"unsupported element type {etype}")
    dims = tuple(int(t) for t in fields["DimSize"].split())
    spacing = tuple(float(t) for t in fields["ElementSpacing"].split())
    origin = tuple(float(t) for t in fields["Offset"].split())
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise VolumeFormatError("DimSize/ElementSpacing/Offset must have 3 entries")
    if any(s <= 0 for s in spacing):
        raise VolumeFormatError(f"non-positive spacing: {spacing}")
    if any(d < 1 for d in dims):
        raise VolumeFormatError(f"non-positive dims: {dims}")
    rawpath = os.path.join(os.path.dirname(path) or ".", fields["ElementDataFile"])
    if not os.path.exists(rawpath):
        raise VolumeFormatError(f"missing raw file {rawpath}")
    dtype = np.dtype(_ELEMENT_TYPES[etype]).newbyteorder("<")
    count = dims[0] * dims[1] * dims[2]
    data = np.fromfile(rawpath, dtype=dtype)
    if data.size < count:
        raise VolumeFormatError(
            f"short raw file {rawpath}: {data.size * dtype.itemsize} bytes, "
            f"{count * dtype.itemsize} required")
    if data.size > count:
        raise VolumeFormatError(f"raw file {rawpath} larger than declared dims")
    arr = data.reshape(dims, order="F").astype(_ELEMENT_TYPES[etype])
    return arr, spacing, origin, etype


def save_mask(labels, spacing, origin, path):
    """Write a uint8 label mask in the volgrid format (MET_UCHAR)."""
    vol = _MaskShim(np.asarray(labels, dtype=np.uint8), spacing, origin)
    save_volume(vol, path, element_type="MET_UCHAR")


class _MaskShim:
    # duck-typed carrier so save_volume can serialize uint8 masks
    def __init__(self, values, spacing, origin):
        self.values = values
        self.spacing = tuple(spacing)
        self.origin = tuple(origin)

    @property
    def dims(self):
        return self.values.shape
