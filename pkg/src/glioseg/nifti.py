"""
Single-file NIfTI-1 reader/writer (little-endian, uint8/int16/float32) and
the two-file named tensor store used for network weights.
"""

from __future__ import annotations

import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Iterator, Tuple, Union

import numpy as np

from .volume import SegmentationMap, Volume3D

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
MAX_DIM = 32767

DATATYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
DTYPE_CODES = {np.dtype("uint8"): 2, np.dtype("int16"): 4, np.dtype("float32"): 16}

# qform_code .. srow_z: kept verbatim, never interpreted
_ORIENT = slice(252, 328)


class NiftiError(ValueError):
    pass


class WeightStoreError(ValueError):
    pass


def _parse_header(hdr: bytes) -> dict:
    if len(hdr) < HEADER_SIZE:
        raise NiftiError(f"not a NIfTI-1 file: header has {len(hdr)} bytes, expected {HEADER_SIZE}")
    if hdr[344:348] != MAGIC:
        raise NiftiError("not a NIfTI-1 file")
    (sizeof_hdr,) = struct.unpack_from("<i", hdr, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiError(f"unsupported header size {sizeof_hdr} (big-endian files are not supported)")
    dim = struct.unpack_from("<8h", hdr, 40)
    datatype, bitpix = struct.unpack_from("<hh", hdr, 70)
    pixdim = struct.unpack_from("<8f", hdr, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from("<3f", hdr, 108)
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise NiftiError(f"only 3D volumes are supported, got dim={dim}")
    if min(dim[1:4]) < 1:
        raise NiftiError(f"invalid extents {dim[1:4]}")
    if datatype not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {datatype}")
    return dict(
        dim=dim,
        datatype=datatype,
        pixdim=pixdim,
        vox_offset=int(vox_offset),
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        orientation=bytes(hdr[_ORIENT]),
    )


def read_volume(path: Union[str, os.PathLike], as_labels: bool = False):
    """Read a ``.nii`` file into a :class:`Volume3D` (or :class:`SegmentationMap`).

    Voxel order in the file is x-fastest, which is exactly C order for a
    ``(z, y, x)`` array, so the payload is reshaped without transposition.
    """
    raw = Path(path).read_bytes()
    info = _parse_header(raw[:HEADER_SIZE])
    nx, ny, nz = info["dim"][1:4]
    dtype = DATATYPES[info["datatype"]]
    expected = nx * ny * nz * dtype.itemsize
    offset = max(info["vox_offset"], HEADER_SIZE)
    actual = len(raw) - offset
    if actual < expected:
        raise NiftiError(f"truncated payload: expected {expected} bytes, found {max(actual, 0)}")
    data = np.frombuffer(raw, dtype=dtype, count=nx * ny * nz, offset=offset).reshape(nz, ny, nx)
    slope, inter = info["scl_slope"], info["scl_inter"]
    if slope != 0 and not (slope == 1 and inter == 0) and np.isfinite(slope):
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)
    else:
        data = data.astype(dtype.newbyteorder("="))
    px = info["pixdim"]
    spacing = (float(px[3]), float(px[2]), float(px[1]))
    if as_labels:
        return SegmentationMap(data, spacing, info["orientation"])
    return Volume3D(data, spacing, info["orientation"])


def read_labels(path) -> SegmentationMap:
    return read_volume(path, as_labels=True)


def _choose_dtype(data: np.ndarray, labels: bool) -> np.dtype:
    if labels:
        return np.dtype("uint8")
    if data.dtype in DTYPE_CODES:
        return data.dtype
    if np.issubdtype(data.dtype, np.integer) and data.size and data.min() >= -32768 and data.max() <= 32767:
        return np.dtype("int16")
    return np.dtype("float32")


def encode_volume(vol: Union[Volume3D, SegmentationMap]) -> bytes:
    labels = isinstance(vol, SegmentationMap)
    data = vol.labels if labels else vol.data
    nz, ny, nx = data.shape
    if max(data.shape) > MAX_DIM:
        raise NiftiError(f"dims {data.shape} exceed the 16-bit header limit {MAX_DIM}")
    dtype = _choose_dtype(data, labels)
    code = DTYPE_CODES[dtype]
    sz, sy, sx = vol.spacing

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    if vol.orientation is not None and len(vol.orientation) == _ORIENT.stop - _ORIENT.start:
        hdr[_ORIENT] = vol.orientation
    hdr[344:348] = MAGIC
    payload = np.ascontiguousarray(data, dtype=dtype.newbyteorder("<")).tobytes()
    return bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def write_volume(vol: Union[Volume3D, SegmentationMap], path) -> None:
    Path(path).write_bytes(encode_volume(vol))


# ---------------------------------------------------------------------------
# weight store
# ---------------------------------------------------------------------------

MANIFEST_HEADER = "# glioseg-weights v1"


class WeightStore:
    """Ordered name -> float32 tensor mapping.

    Lookups of unknown names raise ``KeyError`` listing the name.
    """

    def __init__(self, tensors=None):
        self._tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if not name or any(c.isspace() for c in name):
            raise WeightStoreError(f"invalid tensor name {name!r}")
        if name in self._tensors:
            raise WeightStoreError(f"duplicate tensor name {name!r}")
        self._tensors[name] = np.array(value, dtype=np.float32)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"tensor {name!r} not in weight store") from None

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)


def _store_paths(path) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".manifest", ".blob"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".manifest"), path.with_name(path.name + ".blob")


def write_weights(store: WeightStore, path) -> Tuple[Path, Path]:
    manifest_path, blob_path = _store_paths(path)
    lines = [MANIFEST_HEADER]
    chunks = []
    offset = 0
    for name, value in store.items():
        payload = np.ascontiguousarray(value, dtype="<f4").tobytes()
        shape = ",".join(str(s) for s in value.shape) or "-"
        lines.append(f"{name} float32 {shape} {offset} {zlib.crc32(payload):08x}")
        chunks.append(payload)
        offset += len(payload)
    manifest_path.write_text("\n".join(lines) + "\n")
    blob_path.write_bytes(b"".join(chunks))
    return manifest_path, blob_path


def read_weights(path) -> WeightStore:
    manifest_path, blob_path = _store_paths(path)
    try:
        text = manifest_path.read_text()
        blob = blob_path.read_bytes()
    except FileNotFoundError as exc:
        raise WeightStoreError(f"weight store incomplete: {exc.filename} not found") from None
    lines = text.splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise WeightStoreError(f"{manifest_path}: missing manifest header {MANIFEST_HEADER!r}")
    store = WeightStore()
    expected_offset = 0
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise WeightStoreError(f"{manifest_path}:{lineno}: expected 5 fields, got {len(parts)}")
        name, dtype, shape_txt, offset_txt, checksum = parts
        if dtype != "float32":
            raise WeightStoreError(f"{manifest_path}:{lineno}: unsupported dtype {dtype}")
        shape = () if shape_txt == "-" else tuple(int(s) for s in shape_txt.split(","))
        offset = int(offset_txt)
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset != expected_offset:
            raise WeightStoreError(
                f"{manifest_path}:{lineno}: tensor {name!r} offset {offset} does not match "
                f"expected {expected_offset} from preceding shapes"
            )
        if offset + nbytes > len(blob):
            raise WeightStoreError(f"tensor {name!r} shape {shape} overruns blob of {len(blob)} bytes")
        payload = blob[offset : offset + nbytes]
        if f"{zlib.crc32(payload):08x}" != checksum:
            raise WeightStoreError(f"checksum mismatch for tensor {name!r}")
        if name in store:
            raise WeightStoreError(f"duplicate tensor name {name!r}")
        store.add(name, np.frombuffer(payload, dtype="<f4").reshape(shape))
        expected_offset = offset + nbytes
    if expected_offset != len(blob):
        raise WeightStoreError(f"blob has {len(blob)} bytes, manifest accounts for {expected_offset}")
    return store
