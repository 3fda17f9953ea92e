"""Hyperspectral cube container, binary file format, and mosaic handling.

A cube is ``(bands, height, width)`` float32 with one wavelength per
band. The on-disk container is a 16-byte magic/version block, a
length-prefixed JSON header, and a raw band-sequential little-endian
float32 payload. Loading is strict: each way a file can be malformed
maps to a distinct exception type carrying a stable ``code`` string.

Snapshot mosaic sensors interleave bands spatially in fixed square
tiles; :func:`demosaic` splits an ``n x n`` mosaic frame into ``n**2``
band planes at ``1/n`` resolution (2048x1088 with 4x4 tiles becomes
16 x 272 x 512).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Cube",
    "CubeFormatError",
    "MagicError",
    "HeaderError",
    "PayloadError",
    "WavelengthError",
    "DEFAULT_WAVELENGTHS_NM",
    "save_cube",
    "load_cube",
    "demosaic",
    "mosaic",
    "normalize01",
]

MAGIC = b"HYKYCUBE" + bytes(7) + b"\x01"

# 16 bands spanning the visible-to-red range of the 4x4 snapshot sensor
DEFAULT_WAVELENGTHS_NM = tuple(float(v) for v in np.linspace(460.0, 600.0, 16))


class CubeFormatError(ValueError):
    """Base class for cube container violations; ``code`` identifies the stage."""

    code = "bad-cube"


class MagicError(CubeFormatError):
    code = "bad-magic"


class HeaderError(CubeFormatError):
    code = "bad-header"


class PayloadError(CubeFormatError):
    code = "bad-payload"


class WavelengthError(CubeFormatError):
    code = "bad-wavelengths"


@dataclass
class Cube:
    """Band-major hyperspectral image with per-band centre wavelengths."""

    data: np.ndarray
    wavelengths_nm: tuple[float, ...] = field(default=DEFAULT_WAVELENGTHS_NM)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"cube data must be (bands, height, width), got {arr.shape}")
        self.data = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(self.data).all():
            raise ValueError("cube values must be finite")
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"cube values must lie in [0,1], got range [{lo:g},{hi:g}]")
        self.wavelengths_nm = tuple(float(v) for v in self.wavelengths_nm)
        if len(self.wavelengths_nm) != self.data.shape[0]:
            raise WavelengthError(
                f"{len(self.wavelengths_nm)} wavelengths for {self.data.shape[0]} bands"
            )
        if not all(np.isfinite(self.wavelengths_nm)):
            raise WavelengthError("wavelengths must be finite")
        if any(b <= a for a, b in zip(self.wavelengths_nm, self.wavelengths_nm[1:])):
            raise WavelengthError("wavelengths must be strictly increasing")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def save_cube(path, cube: Cube) -> None:
    header = {
        "bands": cube.bands,
        "height": cube.height,
        "width": cube.width,
        "dtype": "f32le",
        "wavelengths_nm": list(cube.wavelengths_nm),
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(cube.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())


def load_cube(path) -> Cube:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise MagicError("not a cube file: bad magic/version block")
    off = len(MAGIC)
    if len(raw) < off + 4:
        raise HeaderError("truncated before header length")
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + hlen:
        raise HeaderError("header length exceeds file size")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}") from exc
    off += hlen
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")
    for key in ("bands", "height", "width", "dtype", "wavelengths_nm"):
        if key not in header:
            raise HeaderError(f"header missing {key!r}")
    if header["dtype"] != "f32le":
        raise HeaderError(f"unsupported dtype {header['dtype']!r}")
    try:
        bands, height, width = (int(header[k]) for k in ("bands", "height", "width"))
    except (TypeError, ValueError) as exc:
        raise HeaderError("dimensions must be integers") from exc
    if bands < 1 or height < 1 or width < 1:
        raise HeaderError(f"non-positive dimensions ({bands},{height},{width})")
    wl = header["wavelengths_nm"]
    if not isinstance(wl, list) or len(wl) != bands:
        raise WavelengthError(f"expected {bands} wavelengths, got {len(wl) if isinstance(wl, list) else type(wl).__name__}")
    try:
        wl = tuple(float(v) for v in wl)
    except (TypeError, ValueError) as exc:
        raise WavelengthError("wavelengths must be numbers") from exc
    if not all(np.isfinite(wl)):
        raise WavelengthError("wavelengths must be finite")
    if any(b <= a for a, b in zip(wl, wl[1:])):
        raise WavelengthError("wavelengths must be strictly increasing")

    want = bands * height * width * 4
    got = len(raw) - off
    if got != want:
        raise PayloadError(f"payload is {got} bytes, expected {want}")
    data = np.frombuffer(raw, dtype="<f4", offset=off).reshape(bands, height, width)
    if not np.isfinite(data).all():
        raise PayloadError("payload contains non-finite samples")
    if data.min() < 0.0 or data.max() > 1.0:
        raise PayloadError("payload values outside [0,1]")
    return Cube(data=data.copy(), wavelengths_nm=wl)


def demosaic(frame: np.ndarray, pattern: int = 4,
             wavelengths_nm: tuple[float, ...] | None = None) -> Cube:
    """Split an ``n x n``-tiled mosaic frame into a band-major cube.

    Band index runs row-major over the tile: the plane for band ``b``
    is ``frame[b // n :: n, b % n :: n]``. Frame extents must be exact
    multiples of the tile size.
    """
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ValueError(f"mosaic frame must be 2-D, got shape {frame.shape}")
    if np.issubdtype(frame.dtype, np.integer):
        frame = frame / float(np.iinfo(frame.dtype).max)
    n = int(pattern)
    h, w = frame.shape
    if h % n or w % n:
        raise ValueError(f"frame {h}x{w} is not a multiple of the {n}x{n} tile")
    planes = np.stack([frame[b // n :: n, b % n :: n] for b in range(n * n)])
    if wavelengths_nm is None:
        wavelengths_nm = (
            DEFAULT_WAVELENGTHS_NM
            if n * n == 16
            else tuple(float(v) for v in np.linspace(460.0, 600.0, n * n))
        )
    return Cube(data=planes.astype(np.float32), wavelengths_nm=wavelengths_nm)


def mosaic(cube: Cube, pattern: int = 4) -> np.ndarray:
    """Inverse of :func:`demosaic`: interleave band planes into one frame."""
    n = int(pattern)
    if cube.bands != n * n:
        raise ValueError(f"{cube.bands} bands cannot tile a {n}x{n} pattern")
    h, w = cube.height, cube.width
    frame = np.zeros((h * n, w * n), dtype=np.float32)
    for b in range(n * n):
        frame[b // n :: n, b % n :: n] = cube.data[b]
    return frame


def normalize01(data: np.ndarray) -> np.ndarray:
    """Min-max rescale a whole cube to [0, 1]; constant cubes map to zeros."""
    data = np.asarray(data, dtype=np.float32)
    lo = float(data.min())
    hi = float(data.max())
    if hi - lo <= 0:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)
