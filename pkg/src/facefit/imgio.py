"""Image and map file I/O: 8-bit PNG, PFM float maps, SHM1 light maps.

PNG bytes map linearly to [0, 1] (no gamma handling anywhere in the
toolkit).  PFM is the standard portable float map: float32, scale -1.0
(little-endian), rows stored bottom-up.  SHM1 is this package's float64
container for 27-channel spherical-harmonics maps.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

_SHM_MAGIC = b"SHM1"


class FileFormatError(ValueError):
    """Malformed image/map file."""


# -- PNG ------------------------------------------------------------------------


def save_png(path, image: np.ndarray) -> None:
    """Write a (3, H, W) or (1, H, W)/(H, W) array in [0, 1] as 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Read a PNG as float64 in [0, 1], channel-first (3, H, W)."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        data = np.asarray(rgb, dtype=np.float64) / 255.0
    return data.transpose(2, 0, 1)


# -- PFM ------------------------------------------------------------------------


def save_pfm(path, data: np.ndarray) -> None:
    """Write (H, W) as grayscale 'Pf' or (3, H, W) as color 'PF' float map."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        tag, planes = b"Pf", arr[:, :, None]
    elif arr.ndim == 3 and arr.shape[0] == 3:
        tag, planes = b"PF", arr.transpose(1, 2, 0)
    else:
        raise ValueError(f"cannot write shape {arr.shape} as PFM")
    h, w = planes.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(planes).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    """Read a PFM file as float64, channel-first ((1, H, W) or (3, H, W))."""
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise FileFormatError(f"not a PFM file: header {tag!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FileFormatError("malformed PFM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        channels = 3 if tag == b"PF" else 1
        count = w * h * channels
        raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise FileFormatError("truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w, channels)
    data = np.flipud(data).astype(np.float64)
    return data.transpose(2, 0, 1)


# -- SHM1 (27-channel light maps) -------------------------------------------------


def save_light_map(path, light_map: np.ndarray) -> None:
    """Write a (27, H, W) float64 SH coefficient map (channel-major planes)."""
    arr = np.asarray(light_map, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 27:
        raise ValueError(f"expected (27, H, W), got {arr.shape}")
    with open(path, "wb") as f:
        f.write(_SHM_MAGIC)
        f.write(struct.pack("<3I", arr.shape[1], arr.shape[2], 27))
        f.write(arr.astype("<f8").tobytes())


def load_light_map(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _SHM_MAGIC:
        raise FileFormatError("bad magic, expected SHM1")
    if len(blob) < 16:
        raise FileFormatError("truncated SHM1 header")
    h, w, c = struct.unpack("<3I", blob[4:16])
    if c != 27:
        raise FileFormatError(f"SHM1 channel count must be 27, got {c}")
    count = c * h * w
    if len(blob) != 16 + 8 * count:
        raise FileFormatError("truncated SHM1 payload")
    return np.frombuffer(blob[16:], dtype="<f8").reshape(c, h, w).astype(np.float64)
