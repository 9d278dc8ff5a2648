"""Binary image/measurement files and PNG previews.

File layout::

    bytes 0-7    magic  b"PATRECON"
    bytes 8-11   format version (uint32, little endian)
    bytes 12-15  length of the JSON metadata block in bytes (uint32, LE)
    JSON block   utf-8 metadata: kind, shape, spacing/dt, units, provenance
    payload      row-major little-endian float64 values

PNG previews are for viewing only and are never read back for computation.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import DimensionError, PatError
from .grid import Image, ImageGrid, Measurements

MAGIC = b"PATRECON"
VERSION = 1
_HEADER = struct.Struct("<8sII")

UNITS = {"length": "mm", "time": "us", "pressure": "Pa", "speed": "mm/us"}


class FileFormatError(PatError, OSError):
    """A file does not follow the binary layout."""


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(array: np.ndarray, metadata: dict) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f8")
    meta = dict(metadata)
    meta["shape"] = list(array.shape)
    meta.setdefault("units", UNITS)
    block = json.dumps(meta, sort_keys=True, default=_json_default).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(block)) + block + array.tobytes()


def decode(payload: bytes) -> tuple[np.ndarray, dict]:
    if len(payload) < _HEADER.size:
        raise FileFormatError("file too short for header")
    magic, version, n = _HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise FileFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FileFormatError(f"unsupported format version {version}")
    start = _HEADER.size
    try:
        meta = json.loads(payload[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"corrupt metadata block: {exc}") from exc
    shape = tuple(meta.get("shape", ()))
    body = payload[start + n:]
    count = int(np.prod(shape)) if shape else 0
    if len(body) != 8 * count:
        raise FileFormatError(f"payload holds {len(body)} bytes, shape {shape} needs {8 * count}")
    arr = np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)
    return arr, meta


def write_array(path, array: np.ndarray, metadata: dict) -> None:
    atomic_write_bytes(path, encode(array, metadata))


def read_array(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    return decode(path.read_bytes())


def write_image(path, image: Image, metadata: dict | None = None) -> None:
    meta = {"kind": "image", "spacing": [image.grid.dx, image.grid.dy]}
    meta.update(metadata or {})
    write_array(path, image.data, meta)


def read_image(path) -> tuple[Image, dict]:
    arr, meta = read_array(path)
    if arr.ndim != 2:
        raise FileFormatError(f"expected a 2-D image, got shape {arr.shape}")
    dx, dy = meta.get("spacing", [0.1, 0.1])
    return Image(ImageGrid(arr.shape[0], arr.shape[1], dx, dy), arr), meta


def write_measurements(path, meas: Measurements, metadata: dict | None = None) -> None:
    meta = {"kind": "measurements", "dt": meas.dt}
    meta.update(meas.metadata)
    meta.update(metadata or {})
    write_array(path, meas.data, meta)


def read_measurements(path) -> Measurements:
    arr, meta = read_array(path)
    if meta.get("kind") != "measurements":
        raise FileFormatError(f"{path} does not hold measurements")
    if arr.ndim != 2:
        raise DimensionError(f"measurement payload must be 2-D, got {arr.shape}")
    return Measurements(arr, float(meta["dt"]), metadata=meta)


def png_bytes(array: np.ndarray) -> tuple[bytes, dict]:
    """8-bit grayscale PNG of ``array`` linearly scaled min->0, max->255.

    Returns the encoded bytes and the scale that was applied.
    """
    from io import BytesIO

    from PIL import Image as PILImage

    a = np.asarray(array, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    span = hi - lo
    scaled = np.zeros_like(a) if span == 0 else (a - lo) / span * 255.0
    # rows of the PNG are y, columns x
    img = PILImage.fromarray(np.round(scaled).astype(np.uint8).T[::-1], mode="L")
    buf = BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue(), {"png_min": lo, "png_max": hi}


def write_png(path, array: np.ndarray) -> dict:
    payload, scale = png_bytes(array)
    atomic_write_bytes(path, payload)
    return scale


def read_png_grayscale(path) -> np.ndarray:
    """Load an 8/16-bit grayscale PNG as a float array in [0, 1], ``[ix, iy]`` order."""
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            a = np.asarray(im, dtype=np.float64)
            scale = 65535.0
        else:
            a = np.asarray(im.convert("L"), dtype=np.float64)
            scale = 255.0
    return (a / scale)[::-1].T.copy()


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
