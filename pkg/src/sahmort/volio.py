"""NIfTI-1 volume I/O and resampling.

Single-file little-endian NIfTI-1 (.nii / .nii.gz) is the only carrier format.
Big-endian files are byte-swapped on read; output is always little-endian.
NIfTI-2 and detached .hdr/.img pairs are rejected with a distinct error.
"""

from __future__ import annotations

import enum
import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

HEADER_SIZE = 348
SINGLE_VOX_OFFSET = 352

# datatype code -> numpy dtype (little-endian), restricted to what we ingest
_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}
_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"
_NIFTI2_SIZEOF = 540

_HDR_FMT = (
    "i"  # sizeof_hdr
    "10s"  # data_type (unused)
    "18s"  # db_name (unused)
    "i"  # extents
    "h"  # session_error
    "c"  # regular
    "B"  # dim_info
    "8h"  # dim
    "3f"  # intent_p1..p3
    "h"  # intent_code
    "h"  # datatype
    "h"  # bitpix
    "h"  # slice_start
    "8f"  # pixdim
    "f"  # vox_offset
    "f"  # scl_slope
    "f"  # scl_inter
    "h"  # slice_end
    "b"  # slice_code
    "b"  # xyzt_units
    "f"  # cal_max
    "f"  # cal_min
    "f"  # slice_duration
    "f"  # toffset
    "i"  # glmax
    "i"  # glmin
    "80s"  # descrip
    "24s"  # aux_file
    "h"  # qform_code
    "h"  # sform_code
    "6f"  # quatern_b,c,d qoffset_x,y,z
    "4f"  # srow_x
    "4f"  # srow_y
    "4f"  # srow_z
    "16s"  # intent_name
    "4s"  # magic
)


class VolioError(Exception):
    """Base for volume I/O failures."""


class BadMagic(VolioError):
    """Input is not a NIfTI-1 stream."""


class UnsupportedFormat(VolioError):
    """Recognizably NIfTI but not single-file NIfTI-1 (pair or NIfTI-2)."""


class UnsupportedDatatype(VolioError):
    pass


class Truncated(VolioError):
    """Payload shorter than the header promises."""


class NonFinite(VolioError):
    """NaN or Inf voxels present and permissive mode is off."""


class SingularAffine(VolioError):
    pass


class Unit(enum.Enum):
    HU = "HU"
    NONNEG = "NonNegative"
    NORMALIZED = "Normalized"


@dataclass(frozen=True)
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    qform_code: int
    sform_code: int
    quatern: tuple[float, float, float]
    qoffset: tuple[float, float, float]
    srow_x: tuple[float, float, float, float]
    srow_y: tuple[float, float, float, float]
    srow_z: tuple[float, float, float, float]
    magic: bytes

    def validate(self) -> None:
        if self.sizeof_hdr != HEADER_SIZE:
            raise BadMagic(f"sizeof_hdr {self.sizeof_hdr} != {HEADER_SIZE}")
        if self.magic == _MAGIC_PAIR:
            raise UnsupportedFormat("detached .hdr/.img pairs are not supported")
        if self.magic != _MAGIC_SINGLE:
            raise BadMagic(f"bad magic {self.magic!r}")
        ndim = self.dim[0]
        if ndim not in (2, 3):
            raise UnsupportedFormat(f"dim[0]={ndim}, only 2D/3D images supported")
        for d in range(1, ndim + 1):
            if self.dim[d] < 1:
                raise BadMagic(f"dim[{d}]={self.dim[d]} < 1")
        if self.datatype not in _DTYPES:
            raise UnsupportedDatatype(f"datatype code {self.datatype}")
        if self.vox_offset < SINGLE_VOX_OFFSET:
            raise BadMagic(f"vox_offset {self.vox_offset} < {SINGLE_VOX_OFFSET}")


@dataclass(frozen=True)
class Volume:
    """3D (or 2D) scalar grid with a voxel-index -> world-mm affine.

    data is float32 indexed [x, y, z]; the affine maps homogeneous voxel
    indices to world millimetres. Instances are immutable; the data buffer
    is marked read-only so volumes can be shared across threads.
    """

    data: np.ndarray
    affine: np.ndarray
    unit: Unit = Unit.HU
    header: NiftiHeader | None = field(default=None, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        affine = np.asarray(self.affine, dtype=np.float64)
        if data.ndim not in (2, 3):
            raise VolioError(f"volume rank {data.ndim}, expected 2 or 3")
        if data.ndim == 2:
            data = data[:, :, None]
        if affine.shape != (4, 4):
            raise VolioError(f"affine shape {affine.shape}, expected (4, 4)")
        if not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
            raise VolioError(f"affine bottom row {affine[3]} != (0,0,0,1)")
        if abs(np.linalg.det(affine[:3, :3])) <= 1e-9:
            raise SingularAffine("affine upper-left 3x3 is not invertible")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def voxel_sizes(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def with_data(self, data: np.ndarray, unit: Unit | None = None) -> "Volume":
        return Volume(data, self.affine, unit if unit is not None else self.unit)


def _quaternion_affine(hdr: NiftiHeader) -> np.ndarray:
    b, c, d = hdr.quatern
    a2 = 1.0 - (b * b + c * c + d * d)
    a = float(np.sqrt(max(a2, 0.0)))
    R = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if hdr.pixdim[0] < 0 else 1.0
    scales = np.array([hdr.pixdim[1], hdr.pixdim[2], hdr.pixdim[3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = R * scales
    aff[:3, 3] = hdr.qoffset
    return aff


def _header_affine(hdr: NiftiHeader) -> np.ndarray:
    if hdr.sform_code > 0:
        aff = np.eye(4)
        aff[0] = hdr.srow_x
        aff[1] = hdr.srow_y
        aff[2] = hdr.srow_z
        return aff
    if hdr.qform_code > 0:
        return _quaternion_affine(hdr)
    aff = np.diag([hdr.pixdim[1] or 1.0, hdr.pixdim[2] or 1.0, hdr.pixdim[3] or 1.0, 1.0])
    return aff


def parse_header(raw: bytes) -> NiftiHeader:
    """Decode a 348-byte header, byte-swapping if written big-endian."""
    if len(raw) < HEADER_SIZE:
        raise Truncated(f"header needs {HEADER_SIZE} bytes, got {len(raw)}")
    for bo in ("<", ">"):
        sizeof_hdr = struct.unpack(bo + "i", raw[:4])[0]
        if sizeof_hdr == HEADER_SIZE:
            f = struct.unpack(bo + _HDR_FMT, raw[:HEADER_SIZE])
            return NiftiHeader(
                sizeof_hdr=f[0],
                dim=tuple(f[7:15]),
                datatype=f[19],
                bitpix=f[20],
                pixdim=tuple(f[22:30]),
                vox_offset=f[30],
                scl_slope=f[31],
                scl_inter=f[32],
                qform_code=f[44],
                sform_code=f[45],
                quatern=tuple(f[46:49]),
                qoffset=tuple(f[49:52]),
                srow_x=tuple(f[52:56]),
                srow_y=tuple(f[56:60]),
                srow_z=tuple(f[60:64]),
                magic=f[65],
            )
        if sizeof_hdr == _NIFTI2_SIZEOF:
            raise UnsupportedFormat("NIfTI-2 is not supported")
    raise BadMagic("sizeof_hdr is 348 in neither byte order")


def _is_big_endian(raw: bytes) -> bool:
    return struct.unpack(">i", raw[:4])[0] == HEADER_SIZE


def read_nifti(data: bytes, permissive: bool = False, unit: Unit = Unit.HU) -> Volume:
    """Parse a single-file NIfTI-1 byte stream into a Volume.

    Values are scaled raw*scl_slope + scl_inter when scl_slope != 0. The
    affine comes from the sform when sform_code > 0, else the qform, else
    diagonal pixdim. NaN/Inf voxels raise NonFinite unless permissive.
    """
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    hdr = parse_header(data)
    hdr.validate()
    swap = _is_big_endian(data)

    ndim = hdr.dim[0]
    shape = tuple(hdr.dim[1 : ndim + 1])
    n_vox = int(np.prod(shape))
    dtype = _DTYPES[hdr.datatype]
    if swap:
        dtype = dtype.newbyteorder(">")
    offset = int(hdr.vox_offset)
    need = offset + n_vox * dtype.itemsize
    if len(data) < need:
        raise Truncated(f"need {need} bytes, got {len(data)}")
    raw = np.frombuffer(data, dtype=dtype, count=n_vox, offset=offset)
    values = raw.astype(np.float64)
    if hdr.scl_slope != 0.0 and not (hdr.scl_slope == 1.0 and hdr.scl_inter == 0.0):
        values = values * np.float64(hdr.scl_slope) + np.float64(hdr.scl_inter)
    if not np.all(np.isfinite(values)):
        if not permissive:
            raise NonFinite("volume contains NaN or Inf voxels")
        values = np.nan_to_num(values, nan=0.0, posinf=0.0, neginf=0.0)
    arr = values.reshape(shape, order="F").astype(np.float32)
    if ndim == 2:
        arr = arr[:, :, None]
    return Volume(arr, _header_affine(hdr), unit=unit, header=hdr)


def write_nifti(v: Volume) -> bytes:
    """Serialize a Volume as single-file little-endian NIfTI-1, float32 payload.

    sform_code=1 with srows from the affine, vox_offset=352, magic "n+1".
    """
    data = np.asarray(v.data, dtype="<f4")
    nx, ny, nz = data.shape
    dim = (3, nx, ny, nz, 1, 1, 1, 1)
    vsz = v.voxel_sizes()
    pixdim = (1.0, float(vsz[0]), float(vsz[1]), float(vsz[2]), 0.0, 0.0, 0.0, 0.0)
    aff = v.affine.astype(np.float32)
    hdr = struct.pack(
        "<" + _HDR_FMT,
        HEADER_SIZE,
        b"", b"",
        0, 0, b"r", 0,
        *dim,
        0.0, 0.0, 0.0,  # intent_p
        0,  # intent_code
        16,  # datatype float32
        32,  # bitpix
        0,  # slice_start
        *pixdim,
        float(SINGLE_VOX_OFFSET),
        1.0,  # scl_slope
        0.0,  # scl_inter
        0, 0, 0,
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"", b"",
        0,  # qform_code
        1,  # sform_code
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *aff[0], *aff[1], *aff[2],
        b"",
        _MAGIC_SINGLE,
    )
    pad = b"\x00" * (SINGLE_VOX_OFFSET - HEADER_SIZE)
    return hdr + pad + data.tobytes(order="F")


def read_nifti_file(path, permissive: bool = False, unit: Unit = Unit.HU) -> Volume:
    with open(path, "rb") as fh:
        return read_nifti(fh.read(), permissive=permissive, unit=unit)


def write_nifti_file(v: Volume, path) -> None:
    payload = write_nifti(v)
    if str(path).endswith(".gz"):
        # fixed mtime keeps outputs byte-identical across runs
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as fh:
        fh.write(payload)


def trilinear_sample(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample data (float, [x,y,z]) at fractional voxel coords (3, n).

    Out-of-bounds samples return 0; interior samples interpolate the 8
    surrounding voxel centers.
    """
    nx, ny, nz = data.shape
    x, y, z = coords
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    z0 = np.floor(z).astype(np.int64)
    fx, fy, fz = x - x0, y - y0, z - z0
    out = np.zeros(x.shape, dtype=np.float64)

    # a sample is valid when its full 8-neighbour cell support is in bounds;
    # edge-touching coords (x == nx-1) are handled by the clip below
    valid = (x >= 0) & (x <= nx - 1) & (y >= 0) & (y <= ny - 1) & (z >= 0) & (z <= nz - 1)
    if not np.any(valid):
        return out
    x0v = np.clip(x0[valid], 0, nx - 2) if nx > 1 else np.zeros(np.count_nonzero(valid), np.int64)
    y0v = np.clip(y0[valid], 0, ny - 2) if ny > 1 else np.zeros(np.count_nonzero(valid), np.int64)
    z0v = np.clip(z0[valid], 0, nz - 2) if nz > 1 else np.zeros(np.count_nonzero(valid), np.int64)
    fxv = x[valid] - x0v
    fyv = y[valid] - y0v
    fzv = z[valid] - z0v
    x1 = np.minimum(x0v + 1, nx - 1)
    y1 = np.minimum(y0v + 1, ny - 1)
    z1 = np.minimum(z0v + 1, nz - 1)
    d = data.astype(np.float64, copy=False)
    c000 = d[x0v, y0v, z0v]
    c100 = d[x1, y0v, z0v]
    c010 = d[x0v, y1, z0v]
    c110 = d[x1, y1, z0v]
    c001 = d[x0v, y0v, z1]
    c101 = d[x1, y0v, z1]
    c011 = d[x0v, y1, z1]
    c111 = d[x1, y1, z1]
    c00 = c000 * (1 - fxv) + c100 * fxv
    c10 = c010 * (1 - fxv) + c110 * fxv
    c01 = c001 * (1 - fxv) + c101 * fxv
    c11 = c011 * (1 - fxv) + c111 * fxv
    c0 = c00 * (1 - fyv) + c10 * fyv
    c1 = c01 * (1 - fyv) + c11 * fyv
    out[valid] = c0 * (1 - fzv) + c1 * fzv
    return out


def nearest_sample(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    nx, ny, nz = data.shape
    idx = np.rint(coords).astype(np.int64)
    valid = (
        (idx[0] >= 0) & (idx[0] < nx)
        & (idx[1] >= 0) & (idx[1] < ny)
        & (idx[2] >= 0) & (idx[2] < nz)
    )
    out = np.zeros(coords.shape[1], dtype=np.float64)
    out[valid] = data[idx[0][valid], idx[1][valid], idx[2][valid]]
    return out


def grid_coords(shape: tuple[int, int, int]) -> np.ndarray:
    """Homogeneous voxel-index grid, shape (4, prod(shape))."""
    ii, jj, kk = np.meshgrid(
        np.arange(shape[0]), np.arange(shape[1]), np.arange(shape[2]), indexing="ij"
    )
    n = ii.size
    return np.stack([ii.ravel(), jj.ravel(), kk.ravel(), np.ones(n)]).astype(np.float64)


def resample(
    v: Volume,
    target_affine: np.ndarray,
    target_shape: tuple[int, int, int],
    interp: str = "trilinear",
) -> Volume:
    """Resample v onto the grid defined by target_affine/target_shape.

    Each target voxel center maps through target_affine to world mm and then
    through inverse(v.affine) into source voxel coordinates. Out-of-bounds
    samples are 0.
    """
    target_affine = np.asarray(target_affine, dtype=np.float64)
    if any(s <= 0 for s in target_shape):
        raise VolioError(f"target shape {target_shape} must be positive")
    if abs(np.linalg.det(target_affine[:3, :3])) <= 1e-9:
        raise SingularAffine("target affine is singular")
    src = np.linalg.inv(v.affine) @ target_affine @ grid_coords(tuple(target_shape))
    if interp == "trilinear":
        vals = trilinear_sample(v.data, src[:3])
    elif interp == "nearest":
        vals = nearest_sample(v.data, src[:3])
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    out = vals.reshape(target_shape).astype(np.float32)
    return Volume(out, target_affine, unit=v.unit)
