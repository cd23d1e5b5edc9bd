"""NIfTI-1 subset I/O and resampling for 3D scalar volumes.

Scope: single-file NIfTI-1 (.nii / .nii.gz), little-endian, datatypes
uint8 / int16 / float32, 3D only. Files are reoriented to RAS at load time
(+x right, +y anterior, +z superior; axial slices are constant-z planes)
using the dominant axes of the affine; the applied permutation/flips are
recorded on the volume.

All internal computation is float64; written payloads are float32.
Volumes are immutable: arrays are set read-only and every operation
returns a new object, so everything here is safe to call concurrently.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    CorruptFileError,
    FormatError,
    GeometryMismatchError,
    UnsupportedDataTypeError,
)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"

# NIfTI-1 datatype code -> (numpy dtype, bitpix)
_DATATYPES = {2: ("<u1", 8), 4: ("<i2", 16), 16: ("<f4", 32)}
_FLOAT32_CODE = 16


def _check_geometry(data: np.ndarray, spacing, affine: np.ndarray):
    if data.ndim != 3 or min(data.shape) < 1:
        raise ValueError(f"expected 3D data, got shape {data.shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive values, got {spacing}")
    if affine.shape != (4, 4):
        raise ValueError("affine must be 4x4")
    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise ValueError("affine is singular")


@dataclass(frozen=True)
class Volume3D:
    """A scalar voxel grid with spacing and a voxel-index -> world-mm affine.

    ``data`` is indexed ``[x, y, z]``; world coordinates follow RAS.
    ``reorientation`` records the (axis permutation, flips) applied when the
    volume was loaded from a non-RAS file, or ``None``.
    """

    data: np.ndarray
    spacing: tuple
    affine: np.ndarray
    intensity_units: str = "arbitrary"
    reorientation: tuple | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        affine = np.asarray(self.affine, dtype=np.float64)
        spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(data, spacing, affine)
        data.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return replace(self, data=data)


@dataclass(frozen=True)
class BinaryMask:
    """Boolean voxel set sharing the geometry of the volume it annotates."""

    data: np.ndarray
    spacing: tuple
    affine: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data))
        if data.dtype != np.bool_:
            if not np.isin(data, (0, 1)).all():
                raise ValueError("mask data must be boolean or 0/1")
            data = data.astype(bool)
        affine = np.asarray(self.affine, dtype=np.float64)
        spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(data, spacing, affine)
        data.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())

    def with_data(self, data: np.ndarray) -> "BinaryMask":
        return replace(self, data=data)

    @classmethod
    def like(cls, vol, data) -> "BinaryMask":
        return cls(data=data, spacing=vol.spacing, affine=vol.affine)


def same_geometry(a, b, atol=1e-6) -> bool:
    return (
        a.dims == b.dims
        and np.allclose(a.spacing, b.spacing, atol=atol)
        and np.allclose(a.affine, b.affine, atol=atol)
    )


def require_same_geometry(a, b, what="operands"):
    if not same_geometry(a, b):
        raise GeometryMismatchError(f"{what} do not share dims/spacing/affine")


# ---------------------------------------------------------------------------
# NIfTI-1 parsing


def _quaternion_affine(b, c, d, qoffset, pixdim, qfac):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    scale = np.diag([pixdim[0], pixdim[1], pixdim[2] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot @ scale
    affine[:3, 3] = qoffset
    return affine


def _dominant_axes(affine):
    """Assign each voxel axis to its dominant world axis (greedy, strongest
    columns first); returns None if the affine is already RAS-aligned."""
    R = affine[:3, :3]
    assign = {}
    remaining = {0, 1, 2}
    for j in sorted(range(3), key=lambda j: -np.max(np.abs(R[:, j]))):
        i = max(remaining, key=lambda i: abs(R[i, j]))
        assign[j] = i
        remaining.discard(i)
    perm = tuple(next(j for j in range(3) if assign[j] == i) for i in range(3))
    flips = tuple(bool(R[i, perm[i]] < 0) for i in range(3))
    if perm == (0, 1, 2) and not any(flips):
        return None
    return perm, flips


def _reorient_to_ras(data, spacing, affine):
    axes = _dominant_axes(affine)
    if axes is None:
        return data, spacing, affine, None
    perm, flips = axes
    new_data = np.transpose(data, axes=perm)
    for i, f in enumerate(flips):
        if f:
            new_data = np.flip(new_data, axis=i)
    # voxel_old = M3 @ voxel_new + t
    M = np.zeros((4, 4))
    M[3, 3] = 1.0
    for i in range(3):
        j = perm[i]
        if flips[i]:
            M[j, i] = -1.0
            M[j, 3] = data.shape[j] - 1
        else:
            M[j, i] = 1.0
    new_affine = affine @ M
    new_spacing = tuple(spacing[perm[i]] for i in range(3))
    return np.ascontiguousarray(new_data), new_spacing, new_affine, (perm, flips)


def read_nifti(raw: bytes) -> Volume3D:
    """Parse a NIfTI-1 single file (optionally gzip-compressed).

    The affine comes from the sform when ``sform_code > 0``, else the qform,
    else ``diag(spacing)``. ``scl_slope``/``scl_inter`` are applied when the
    slope is nonzero. The volume is reoriented to RAS.
    """
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise CorruptFileError(f"gzip stream is corrupt: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise CorruptFileError(
            f"file is {len(raw)} bytes, shorter than the {HEADER_SIZE}-byte header"
        )

    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise FormatError("big-endian NIfTI-1 is not supported")
        raise FormatError(f"sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}")
    magic = raw[344:348]
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r} (single-file NIfTI-1)")

    dim = struct.unpack_from("<8h", raw, 40)
    datatype, _bitpix = struct.unpack_from("<2h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)
    quatern = struct.unpack_from("<6f", raw, 256)
    srow = np.array(struct.unpack_from("<12f", raw, 280), dtype=np.float64).reshape(3, 4)

    ndim = dim[0]
    if ndim < 3 or any(d > 1 for d in dim[4 : 1 + max(ndim, 3)]):
        raise FormatError(f"only 3D volumes are supported, header dim={dim[: ndim + 1]}")
    nx, ny, nz = (max(int(d), 1) for d in dim[1:4])

    if datatype not in _DATATYPES:
        raise UnsupportedDataTypeError(
            f"datatype code {datatype} not in supported set {sorted(_DATATYPES)}"
        )
    dtype, bitpix = _DATATYPES[datatype]

    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    if any(s <= 0 for s in spacing):
        raise FormatError(f"non-positive pixdim {pixdim[1:4]}")

    if sform_code > 0:
        affine = np.eye(4)
        affine[:3, :] = srow
    elif qform_code > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        affine = _quaternion_affine(
            quatern[0], quatern[1], quatern[2], quatern[3:6], spacing, qfac
        )
    else:
        affine = np.diag(list(spacing) + [1.0])

    offset = int(round(vox_offset)) or VOX_OFFSET
    if offset < HEADER_SIZE:
        raise FormatError(f"vox_offset {offset} overlaps the header")
    nbytes = nx * ny * nz * (bitpix // 8)
    payload = raw[offset : offset + nbytes]
    if len(payload) < nbytes:
        raise CorruptFileError(
            f"data section truncated: need {nbytes} bytes, have {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz), order="F")
    data = arr.astype(np.float64)
    if scl_slope != 0.0 and (scl_slope, scl_inter) != (1.0, 0.0):
        data = data * float(scl_slope) + float(scl_inter)

    data, spacing, affine, reorient = _reorient_to_ras(data, spacing, affine)
    return Volume3D(
        data=data, spacing=spacing, affine=affine, reorientation=reorient
    )


def write_nifti(vol: Volume3D) -> bytes:
    """Serialize as uncompressed NIfTI-1: float32 little-endian payload,
    sform from the affine, magic "n+1\\0", vox_offset 352."""
    nx, ny, nz = vol.dims
    if max(nx, ny, nz) > np.iinfo(np.int16).max:
        raise ValueError(f"dims {vol.dims} overflow the NIfTI-1 int16 dim fields")

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _FLOAT32_CODE, 32)
    struct.pack_into(
        "<8f", hdr, 76, 1.0, vol.spacing[0], vol.spacing[1], vol.spacing[2], 0, 0, 0, 0
    )
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<b", hdr, 123, 2)  # xyzt_units: millimeters
    descrip = b"refaudit"
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code=0, sform_code=1
    struct.pack_into("<12f", hdr, 280, *vol.affine[:3, :].ravel())
    hdr[344:348] = MAGIC

    payload = vol.data.astype("<f4").ravel(order="F").tobytes()
    return bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def read_nifti_file(path) -> Volume3D:
    return read_nifti(Path(path).read_bytes())


def write_nifti_file(vol: Volume3D, path) -> None:
    """Write to ``path``; gzip-compressed when the suffix is .gz (mtime pinned
    to 0 so identical volumes give byte-identical files)."""
    path = Path(path)
    raw = write_nifti(vol)
    if path.suffix == ".gz":
        raw = gzip.compress(raw, mtime=0)
    path.write_bytes(raw)


def read_mask_file(path) -> BinaryMask:
    """Load a NIfTI mask (uint8 payload expected); nonzero voxels are True."""
    vol = read_nifti_file(path)
    return BinaryMask(data=vol.data != 0, spacing=vol.spacing, affine=vol.affine)


def write_mask_file(mask: BinaryMask, path) -> None:
    vol = Volume3D(
        data=mask.data.astype(np.float64), spacing=mask.spacing, affine=mask.affine
    )
    write_nifti_file(vol, path)


# ---------------------------------------------------------------------------
# Resampling


def _factor3(factor):
    if np.isscalar(factor):
        factor = (factor, factor, factor)
    factor = tuple(int(f) for f in factor)
    if len(factor) != 3 or any(f < 1 for f in factor):
        raise ValueError(f"factor must be positive integers per axis, got {factor}")
    return factor


def downsample(vol: Volume3D, factor) -> Volume3D:
    """Block-mean pooling by integer factors.

    Dims not divisible by the factor are padded by edge replication before
    pooling. Spacing is multiplied by the factor and the affine translation
    adjusted so block centers keep their original world positions.
    """
    fx, fy, fz = _factor3(factor)
    if (fx, fy, fz) == (1, 1, 1):
        return vol
    data = vol.data
    pads = [(-d) % f for d, f in zip(data.shape, (fx, fy, fz))]
    if any(pads):
        data = np.pad(data, [(0, p) for p in pads], mode="edge")
    nx, ny, nz = (s // f for s, f in zip(data.shape, (fx, fy, fz)))
    pooled = data.reshape(nx, fx, ny, fy, nz, fz).mean(axis=(1, 3, 5))

    f = np.array([fx, fy, fz], dtype=np.float64)
    affine = vol.affine.copy()
    affine[:3, :3] = vol.affine[:3, :3] * f
    affine[:3, 3] = vol.affine[:3, 3] + vol.affine[:3, :3] @ ((f - 1) / 2.0)
    spacing = tuple(s * fi for s, fi in zip(vol.spacing, (fx, fy, fz)))
    return Volume3D(
        data=pooled,
        spacing=spacing,
        affine=affine,
        intensity_units=vol.intensity_units,
        reorientation=vol.reorientation,
    )


def _trilinear_at(src: np.ndarray, coords):
    """Trilinear interpolation of ``src`` at fractional index coordinates
    (3, ...) with edge clamping."""
    out_shape = coords[0].shape
    vals = np.zeros(out_shape, dtype=np.float64)
    idx0, frac = [], []
    for axis in range(3):
        c = np.clip(coords[axis], 0.0, src.shape[axis] - 1.0)
        i0 = np.floor(c).astype(np.intp)
        i0 = np.minimum(i0, src.shape[axis] - 1)
        idx0.append(i0)
        frac.append(c - i0)
    for corner in range(8):
        w = np.ones(out_shape, dtype=np.float64)
        ix = []
        for axis in range(3):
            if corner >> axis & 1:
                ix.append(np.minimum(idx0[axis] + 1, src.shape[axis] - 1))
                w = w * frac[axis]
            else:
                ix.append(idx0[axis])
                w = w * (1.0 - frac[axis])
        vals += w * src[ix[0], ix[1], ix[2]]
    return vals


def upsample_trilinear(vol: Volume3D, factor) -> Volume3D:
    """Trilinear interpolation onto a grid refined by integer factors; target
    voxel centers are evaluated in source index space with edge clamping."""
    fx, fy, fz = _factor3(factor)
    if (fx, fy, fz) == (1, 1, 1):
        return vol
    dims = tuple(d * f for d, f in zip(vol.dims, (fx, fy, fz)))
    # target voxel j has source index (j + 0.5) / f - 0.5
    axes = [
        (np.arange(dims[i]) + 0.5) / f - 0.5 for i, f in enumerate((fx, fy, fz))
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    data = _trilinear_at(vol.data, coords)

    f = np.array([fx, fy, fz], dtype=np.float64)
    affine = vol.affine.copy()
    affine[:3, :3] = vol.affine[:3, :3] / f
    affine[:3, 3] = vol.affine[:3, 3] + vol.affine[:3, :3] @ (0.5 / f - 0.5)
    spacing = tuple(s / fi for s, fi in zip(vol.spacing, (fx, fy, fz)))
    return Volume3D(
        data=data,
        spacing=spacing,
        affine=affine,
        intensity_units=vol.intensity_units,
        reorientation=vol.reorientation,
    )
