"""File formats: float-map container, PNG label/image maps, array archives.

Float maps use a little-endian binary container:

    bytes 0-1   magic ``b"FM"``
    bytes 2-3   dtype code, uint16 (0 = float32, 1 = int64)
    bytes 4-7   H, uint32
    bytes 8-11  W, uint32
    bytes 12-15 C, uint32
    bytes 16-   row-major (H, W, C) array data

Images are 8-bit single-channel PNG; label maps are 16-bit single-channel
PNG (0 = stuff, positive ids = instances). Archives (checkpoints and other
named-array bundles) are ZIP files holding a JSON manifest plus one
flattened float-map container per array; entries carry a fixed timestamp so
identical content yields identical bytes.
"""

import json
import struct
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image

_MAGIC = b"FM"
_HEADER = struct.Struct("<2sHIII")
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
_CODE_OF_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.int64): 1}

# fixed zip entry date so archives are byte-reproducible
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_float_map(path, array):
    """Write a (H, W) or (H, W, C) array as a float-map container file."""
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected 2D or 3D array, got shape {arr.shape}")
    if arr.dtype not in _CODE_OF_DTYPE:
        arr = arr.astype(np.float32)
    code = _CODE_OF_DTYPE[arr.dtype]
    h, w, c = arr.shape
    payload = _HEADER.pack(_MAGIC, code, h, w, c) + np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(payload)


def read_float_map(path):
    """Read a float-map container file; returns an (H, W, C) array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, code, h, w, c = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if code not in _DTYPE_CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    expected = h * w * c * dtype.itemsize
    data = raw[_HEADER.size:]
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} data bytes, found {len(data)}")
    return np.frombuffer(data, dtype=dtype).reshape(h, w, c).copy()


def write_image_png(path, image01):
    """Write a float image in [0, 1] as 8-bit grayscale PNG."""
    arr = np.asarray(image01, dtype=np.float64)
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(path)


def read_image_png(path):
    """Read an 8-bit grayscale PNG as float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr.astype(np.float32) / np.float32(255.0)


def write_label_png(path, ids):
    """Write an integer label map (values < 2**16) as 16-bit PNG."""
    arr = np.asarray(ids)
    if arr.min() < 0 or arr.max() >= 2 ** 16:
        raise ValueError(f"label ids out of uint16 range: [{arr.min()}, {arr.max()}]")
    Image.fromarray(arr.astype("<u2"), mode="I;16").save(path)


def read_label_png(path):
    """Read a 16-bit PNG label map as an int32 array."""
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.int64)
    return arr.astype(np.int32)


def write_array_archive(path, arrays, meta):
    """Write named arrays plus a JSON meta dict as a reproducible ZIP.

    ``arrays`` maps name -> ndarray (any shape; float32 or int64). Shapes
    are recorded in the manifest; payloads are stored flattened.
    """
    manifest = {"meta": meta, "tensors": {}}
    blobs = []
    for i, (name, arr) in enumerate(arrays.items()):
        arr = np.asarray(arr)
        if arr.dtype not in _CODE_OF_DTYPE:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        entry = f"tensors/{i:05d}.fmap"
        manifest["tensors"][name] = {
            "entry": entry,
            "shape": [int(s) for s in arr.shape],
            "dtype": str(arr.dtype),
        }
        flat = arr.reshape(-1, 1, 1) if arr.size else arr.reshape(0, 1, 1)
        code = _CODE_OF_DTYPE[arr.dtype]
        payload = _HEADER.pack(_MAGIC, code, flat.shape[0], 1, 1)
        payload += np.ascontiguousarray(flat).tobytes()
        blobs.append((entry, payload))

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_EPOCH)
        zf.writestr(info, json.dumps(manifest, indent=1, sort_keys=True))
        for entry, payload in blobs:
            info = zipfile.ZipInfo(entry, date_time=_ZIP_EPOCH)
            zf.writestr(info, payload)


def read_array_archive(path):
    """Read an archive written by :func:`write_array_archive`.

    Returns (arrays, meta) with arrays restored to their original shapes.
    """
    arrays = {}
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name, rec in manifest["tensors"].items():
            raw = zf.read(rec["entry"])
            magic, code, h, w, c = _HEADER.unpack_from(raw)
            if magic != _MAGIC or code not in _DTYPE_CODES:
                raise ValueError(f"{path}:{rec['entry']}: bad tensor header")
            dtype = _DTYPE_CODES[code]
            flat = np.frombuffer(raw[_HEADER.size:], dtype=dtype)
            arrays[name] = flat.reshape(rec["shape"]).copy()
    return arrays, manifest["meta"]
