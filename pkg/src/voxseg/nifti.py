"""Minimal NIfTI-1 single-file I/O (.nii / .nii.gz).

Covers exactly what BraTS-style data needs: little-endian files, datatypes
uint8 / int16 / float32, spacing from pixdim, no extensions. The header is
packed by hand from the 348-byte layout; offsets follow the published
struct. Data on disk is x-fastest (Fortran order), while Volume memory is
[C, D, H, W] = [C, z, y, x], so axes are reversed on both paths.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .volume import MODALITIES, Case, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352.0  # header + 4 empty extension bytes
MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy dtype (little-endian only).
DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32}
CODE_FOR_DTYPE = {np.dtype(v): k for k, v in DTYPE_CODES.items()}


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def write_nifti(volume: Volume, path, dtype=None) -> None:
    """Write a Volume as a single-file NIfTI-1 image. 1-channel volumes are
    written 3D; multi-channel volumes 4D with channels as the 4th dim."""
    if dtype is None:
        dtype = np.uint8 if volume.kind == "label_map" else np.float32
    dtype = np.dtype(dtype)
    if dtype not in CODE_FOR_DTYPE:
        raise FormatError(f"unsupported NIfTI dtype {dtype}")

    # [C, z, y, x] -> x-fastest on disk.
    data = volume.data.astype(dtype)
    if volume.channels == 1:
        ndim, chan = 3, 1
        disk = data[0].transpose(2, 1, 0)
    else:
        ndim, chan = 4, volume.channels
        disk = data.transpose(3, 2, 1, 0)

    dim = [ndim, disk.shape[0], disk.shape[1], disk.shape[2], chan, 1, 1, 1]
    sz, sy, sx = volume.spacing
    pixdim = [1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0]

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)  # sizeof_hdr
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, CODE_FOR_DTYPE[dtype])  # datatype
    struct.pack_into("<h", header, 72, dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, VOX_OFFSET)  # vox_offset
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    header[344:348] = MAGIC

    with _open(path, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00" * 4)  # empty extension indicator
        f.write(np.asfortranarray(disk).tobytes(order="F"))


def read_nifti(path, kind: str = "image") -> Volume:
    """Read a single-file NIfTI-1 image into a Volume (always float32).

    Pass kind="label_map" when reading a segmentation so the values get
    validated against the allowed label set."""
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated NIfTI header ({len(raw)} bytes)")
    if raw[344:348] != MAGIC:
        raise FormatError(f"{path}: bad NIfTI magic {raw[344:348]!r} (want {MAGIC!r})")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise FormatError(
            f"{path}: sizeof_hdr is {sizeof_hdr}, not {HEADER_SIZE} (big-endian files unsupported)"
        )
    dim = struct.unpack_from("<8h", raw, 40)
    (datatype,) = struct.unpack_from("<h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<2f", raw, 112)

    if datatype not in DTYPE_CODES:
        raise FormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    if dim[0] == 3:
        nx, ny, nz, chan = dim[1], dim[2], dim[3], 1
    elif dim[0] == 4:
        nx, ny, nz, chan = dim[1], dim[2], dim[3], dim[4]
    else:
        raise FormatError(f"{path}: only 3D/4D images supported, dim[0]={dim[0]}")

    dtype = np.dtype(DTYPE_CODES[datatype])
    count = nx * ny * nz * chan
    start = int(vox_offset)
    if start < HEADER_SIZE or len(raw) - start < count * dtype.itemsize:
        raise FormatError(
            f"{path}: truncated data section, need {count * dtype.itemsize} bytes "
            f"at offset {start}, have {len(raw) - start}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    disk = flat.reshape((nx, ny, nz, chan), order="F")
    data = disk.transpose(3, 2, 1, 0).astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * slope + inter

    spacing = tuple(p if p > 0 else 1.0 for p in (pixdim[3], pixdim[2], pixdim[1]))
    return Volume(data, spacing=spacing, kind=kind)


def _find_modality(case_dir: Path, cid: str, suffix: str) -> Path | None:
    for ext in (".nii.gz", ".nii"):
        p = case_dir / f"{cid}_{suffix}{ext}"
        if p.exists():
            return p
    return None


def read_brats_case(case_dir) -> Case:
    """Read a BraTS-style directory {id}/{id}_{t1,t1ce,t2,flair[,seg]}.nii[.gz]
    into a 4-channel Case with the fixed T1, T1c, T2, FLAIR channel order."""
    case_dir = Path(case_dir)
    cid = case_dir.name
    channels = []
    for suffix in MODALITIES:
        path = _find_modality(case_dir, cid, suffix)
        if path is None:
            raise DataError(f"{case_dir}: missing modality file {cid}_{suffix}.nii[.gz]")
        vol = read_nifti(path)
        if vol.channels != 1:
            raise DataError(f"{path}: modality files must be single-channel")
        channels.append(vol)
    base = channels[0]
    for vol in channels[1:]:
        if vol.extents != base.extents or vol.spacing != base.spacing:
            raise DataError(f"{case_dir}: modalities disagree on extents or spacing")
    image = Volume(
        np.concatenate([v.data for v in channels], axis=0), spacing=base.spacing, kind="image"
    )
    label = None
    seg = _find_modality(case_dir, cid, "seg")
    if seg is not None:
        label = read_nifti(seg, kind="label_map")
    return Case(id=cid, image=image, label=label)
