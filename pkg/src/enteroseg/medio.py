"""Volume ingestion and 2-d slice plumbing.

Reads single-file NIfTI-1 volumes (optionally gzipped) straight off the
binary header table: endianness from sizeof_hdr, uint8/int16/float32 voxel
buffers, scl_slope/scl_inter intensity scaling, x-fastest voxel order.
Slicing follows the coronal convention used throughout: voxel (x, y, z)
lands on slice index y at pixel (column x, row z).

Masks travel as 8-bit indexed-color PNG with a fixed 11-entry palette where
the class index is the palette index; image slices as 8-bit grayscale PNG.
"""

from __future__ import annotations

import gzip
import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

__all__ = [
    "ORGAN_NAMES", "N_CLASSES", "CORONAL_AXIS", "PALETTE",
    "NiftiVolume", "GrayscaleSlice", "LabelMask",
    "NiftiError", "BadMagic", "UnsupportedDatatype", "TruncatedData", "BadDims",
    "parse_nifti", "volume_to_slices", "normalize_slice", "resize",
    "encode_mask_png", "decode_mask_png", "encode_slice_png", "decode_slice_png",
]

# Fixed class order: index 0 is background, 1..10 the segmented organs.
ORGAN_NAMES = (
    "background",
    "stomach",
    "duodenum",
    "small_intestine",
    "appendix",
    "cecum",
    "ascending_colon",
    "transverse_colon",
    "descending_colon",
    "sigmoid_colon",
    "rectum",
)
N_CLASSES = len(ORGAN_NAMES)
CORONAL_AXIS = 1

# One RGB entry per class, palette index == class index.
PALETTE = (
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
)


class NiftiError(ValueError):
    pass


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


class BadDims(NiftiError):
    pass


_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_HEADER_SIZE = 348


@dataclass
class NiftiVolume:
    """Scaled float voxels of a single-file NIfTI-1 volume.

    ``voxels`` is indexed [x, y, z]; dims/pixdim follow the same axis order.
    """
    dims: tuple[int, int, int]
    pixdim: tuple[float, float, float]
    datatype: str
    scl_slope: float
    scl_inter: float
    voxels: np.ndarray


@dataclass
class GrayscaleSlice:
    """One 2-d float image; ``pixels`` is [height, width] row-major."""
    pixels: np.ndarray
    normalized: bool = False
    provenance: tuple = ()

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class LabelMask:
    """One 2-d integer class map aligned with a GrayscaleSlice."""
    labels: np.ndarray
    provenance: tuple = ()

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def parse_nifti(data: bytes) -> NiftiVolume:
    """Parse a single-file NIfTI-1 byte string (gzip detected by prefix)."""
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    if len(data) < _HEADER_SIZE:
        raise TruncatedData(f"header needs {_HEADER_SIZE} bytes, got {len(data)}")

    (sizeof_hdr_le,) = struct.unpack_from("<i", data, 0)
    if sizeof_hdr_le == _HEADER_SIZE:
        bo = "<"
    else:
        (sizeof_hdr_be,) = struct.unpack_from(">i", data, 0)
        if sizeof_hdr_be != _HEADER_SIZE:
            raise BadMagic(f"sizeof_hdr is {sizeof_hdr_le} in either byte order, "
                           f"expected {_HEADER_SIZE}")
        bo = ">"

    magic = data[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"bad NIfTI magic {magic!r}")
    if magic == b"ni1\x00":
        raise BadMagic("two-file NIfTI (.hdr/.img) is not supported")

    dim = struct.unpack_from(f"{bo}8h", data, 40)
    datatype_code, _bitpix = struct.unpack_from(f"{bo}2h", data, 70)
    pixdim = struct.unpack_from(f"{bo}8f", data, 76)
    (vox_offset,) = struct.unpack_from(f"{bo}f", data, 108)
    scl_slope, scl_inter = struct.unpack_from(f"{bo}2f", data, 112)

    ndim = dim[0]
    if ndim < 1 or ndim > 4:
        raise BadDims(f"dim[0]={ndim} out of the supported 1..4 range")
    extents = [dim[i] if i <= ndim else 1 for i in range(1, 4)]
    for e in extents:
        if e < 1 or e > 4096:
            raise BadDims(f"volume extent {e} outside [1, 4096] in dims {extents}")
    if ndim == 4 and dim[4] not in (0, 1):
        raise BadDims(f"4-d volumes with {dim[4]} timepoints are not supported")

    if datatype_code not in _DTYPES:
        raise UnsupportedDatatype(f"datatype code {datatype_code} not in "
                                  f"{sorted(_DTYPES)} (uint8/int16/float32)")
    dtype = np.dtype(_DTYPES[datatype_code]).newbyteorder(bo)

    nx, ny, nz = extents
    nvox = nx * ny * nz
    offset = int(vox_offset)
    if offset < _HEADER_SIZE:
        offset = 352
    need = offset + nvox * dtype.itemsize
    if len(data) < need:
        raise TruncatedData(f"data section truncated: need {need} bytes, "
                            f"have {len(data)}")
    raw = np.frombuffer(data, dtype=dtype, count=nvox, offset=offset)

    slope = scl_slope if scl_slope != 0.0 else 1.0
    voxels = raw.astype(np.float32) * np.float32(slope) + np.float32(scl_inter)
    if not np.isfinite(voxels).all():
        raise NiftiError("non-finite voxel values after scaling")
    # x-fastest buffer: index = x + nx*(y + ny*z)
    voxels = voxels.reshape(nz, ny, nx).transpose(2, 1, 0)

    return NiftiVolume(
        dims=(nx, ny, nz),
        pixdim=(float(pixdim[1]), float(pixdim[2]), float(pixdim[3])),
        datatype=np.dtype(_DTYPES[datatype_code]).name,
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        voxels=np.ascontiguousarray(voxels),
    )


def volume_to_slices(vol: NiftiVolume, axis: int = CORONAL_AXIS,
                     patient: str = "") -> list[GrayscaleSlice]:
    """Cut a volume into 2-d slices along ``axis`` (default coronal/y).

    For the coronal axis, slice s holds voxel (x, s, z) at row z, column x;
    restacking the slices in order is lossless.
    """
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    n = vol.dims[axis]
    out = []
    for s in range(n):
        plane = np.take(vol.voxels, s, axis=axis)
        # remaining axes in (x, z)-like order; rows = later axis, cols = earlier
        pixels = np.ascontiguousarray(plane.T.astype(np.float32))
        out.append(GrayscaleSlice(pixels=pixels, normalized=False,
                                  provenance=(patient, s, axis)))
    return out


def normalize_slice(s: GrayscaleSlice) -> GrayscaleSlice:
    """Zero-mean, unit-variance; a constant slice maps to all zeros."""
    p = s.pixels.astype(np.float32)
    std = float(p.std())
    mean = float(p.mean())
    out = (p - mean) / max(std, 1e-8)
    return replace(s, pixels=out.astype(np.float32), normalized=True)


def _bilinear_axis_matrix(src: int, dst: int) -> np.ndarray:
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for a in range(dst):
        t = (a + 0.5) * scale - 0.5
        t = min(max(t, 0.0), src - 1.0)
        i0 = int(np.floor(t))
        i1 = min(i0 + 1, src - 1)
        f = t - i0
        m[a, i0] += 1.0 - f
        m[a, i1] += f
    return m


def _nearest_index(src: int, dst: int) -> np.ndarray:
    scale = src / dst
    idx = np.floor((np.arange(dst) + 0.5) * scale).astype(np.int64)
    return np.clip(idx, 0, src - 1)


def resize(obj, target: tuple[int, int], interp: str | None = None):
    """Resize a slice or mask to ``target`` = (width, height).

    Interp defaults to bilinear for GrayscaleSlice and nearest for LabelMask;
    bilinear on a LabelMask is rejected. Resizing to the own size returns an
    identical pixel buffer.
    """
    tw, th = int(target[0]), int(target[1])
    if tw < 1 or th < 1:
        raise ValueError(f"target size must be positive, got {(tw, th)}")
    if isinstance(obj, LabelMask):
        if interp not in (None, "nearest"):
            raise ValueError("label masks must be resized with nearest neighbor")
        if (obj.width, obj.height) == (tw, th):
            return replace(obj, labels=obj.labels.copy())
        ri = _nearest_index(obj.height, th)
        ci = _nearest_index(obj.width, tw)
        return replace(obj, labels=obj.labels[np.ix_(ri, ci)].copy())
    if isinstance(obj, GrayscaleSlice):
        if interp is None:
            interp = "bilinear"
        if (obj.width, obj.height) == (tw, th):
            return replace(obj, pixels=obj.pixels.copy())
        if interp == "nearest":
            ri = _nearest_index(obj.height, th)
            ci = _nearest_index(obj.width, tw)
            return replace(obj, pixels=obj.pixels[np.ix_(ri, ci)].copy())
        if interp != "bilinear":
            raise ValueError(f"unknown interpolation {interp!r}")
        mr = _bilinear_axis_matrix(obj.height, th)
        mc = _bilinear_axis_matrix(obj.width, tw)
        out = mr @ obj.pixels.astype(np.float64) @ mc.T
        return replace(obj, pixels=out.astype(np.float32))
    raise TypeError(f"cannot resize {type(obj).__name__}")


def _flat_palette() -> list[int]:
    flat = []
    for rgb in PALETTE:
        flat.extend(rgb)
    flat.extend([0] * (768 - len(flat)))
    return flat


def encode_mask_png(mask: LabelMask) -> bytes:
    labels = np.asarray(mask.labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= N_CLASSES:
        raise ValueError(f"mask labels outside 0..{N_CLASSES - 1}")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(_flat_palette())
    buf = io.BytesIO()
    img.save(buf, format="PNG", bits=8)
    return buf.getvalue()


def decode_mask_png(data: bytes) -> LabelMask:
    img = Image.open(io.BytesIO(data))
    if img.mode != "P":
        raise ValueError(f"expected an indexed-color PNG, got mode {img.mode!r}")
    labels = np.asarray(img, dtype=np.uint8)
    if labels.max(initial=0) >= N_CLASSES:
        raise ValueError(f"palette index {int(labels.max())} exceeds "
                         f"{N_CLASSES - 1}")
    return LabelMask(labels=labels.copy())


def encode_slice_png(s: GrayscaleSlice) -> bytes:
    """8-bit grayscale, intensity min-max scaled onto 0..255."""
    p = s.pixels.astype(np.float64)
    lo, hi = float(p.min()), float(p.max())
    if hi > lo:
        q = np.round((p - lo) / (hi - lo) * 255.0)
    else:
        q = np.zeros_like(p)
    img = Image.fromarray(q.astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def decode_slice_png(data: bytes) -> GrayscaleSlice:
    img = Image.open(io.BytesIO(data))
    if img.mode != "L":
        raise ValueError(f"expected an 8-bit grayscale PNG, got mode {img.mode!r}")
    return GrayscaleSlice(pixels=np.asarray(img, dtype=np.float32))
