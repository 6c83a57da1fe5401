"""Image, disparity and manifest files.

PNG/PPM colour images go through Pillow.  Ground-truth disparity comes as
16-bit PGM (value/256, 0 = invalid) or PFM (raw floats, nonpositive =
invalid).  PFM is written little-endian (negative scale) with rows stored
bottom-up, as the format prescribes.
"""

from __future__ import annotations

import re
import sys
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataIOError


def read_image(path) -> np.ndarray:
    """8-bit PNG/PPM -> float32 ``[H, W, 3]`` in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataIOError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    """``[H, W, 3]`` or ``[H, W]`` float in [0, 1] (or uint8) -> PNG/PPM by suffix."""
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(arr).save(Path(path))


def resize_bilinear(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of ``[H, W, ...]`` with half-pixel centres, no antialiasing."""
    h, w = image.shape[:2]
    if (w, h) == (width, height):
        return image.copy()

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.minimum(np.floor(pos).astype(int), max(n_in - 2, 0))
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (pos - i0).astype(np.float32)

    y0, y1, ay = axis(height, h)
    x0, x1, ax = axis(width, w)
    extra = (1,) * (image.ndim - 2)
    ay = ay.reshape(-1, 1, *extra)
    ax = ax.reshape(1, -1, *extra)
    top = image[y0][:, x0] * (1 - ax) + image[y0][:, x1] * ax
    bot = image[y1][:, x0] * (1 - ax) + image[y1][:, x1] * ax
    return (top * (1 - ay) + bot * ay).astype(image.dtype, copy=False)


# ---------------------------------------------------------------------------
# PFM

def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        tag, h, w = b"Pf", *data.shape
    elif data.ndim == 3 and data.shape[2] == 3:
        tag, h, w = b"PF", *data.shape[:2]
    else:
        raise ConfigError(f"PFM needs [H,W] or [H,W,3] data, got {data.shape}")
    with open(path, "wb") as fh:
        fh.write(tag + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).astype("<f4").tobytes())


def _read_token(fh) -> bytes:
    line = fh.readline()
    while line.startswith(b"#"):
        line = fh.readline()
    return line.strip()


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"PFM not found: {path}")
    with open(path, "rb") as fh:
        tag = _read_token(fh)
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise DataIOError(f"{path}: bad PFM header {tag!r}")
        dims = re.fullmatch(rb"(\d+)\s+(\d+)", _read_token(fh))
        if dims is None:
            raise DataIOError(f"{path}: bad PFM dimensions")
        w, h = int(dims.group(1)), int(dims.group(2))
        try:
            scale = float(_read_token(fh))
        except ValueError as exc:
            raise DataIOError(f"{path}: bad PFM scale") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        buf = fh.read()
    count = w * h * channels
    if len(buf) < 4 * count:
        raise DataIOError(f"{path}: truncated PFM data")
    arr = np.frombuffer(buf, dtype=dtype, count=count).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.ascontiguousarray(np.flipud(arr.reshape(shape)))


# ---------------------------------------------------------------------------
# 16-bit PGM

def write_pgm16(path, raw: np.ndarray) -> None:
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ConfigError(f"PGM needs 2-D data, got {raw.shape}")
    if raw.min() < 0 or raw.max() > 65535:
        raise ConfigError("PGM16 values must lie in [0, 65535]")
    h, w = raw.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(raw.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"PGM not found: {path}")
    data = path.read_bytes()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise DataIOError(f"{path}: malformed PGM header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval < 256 or maxval > 65535:
        raise DataIOError(f"{path}: expected 16-bit PGM, maxval={maxval}")
    body = data[m.end():]
    if len(body) < 2 * w * h:
        raise DataIOError(f"{path}: truncated PGM data")
    return np.frombuffer(body, dtype=">u2", count=w * h).reshape(h, w).astype(np.uint16)


# ---------------------------------------------------------------------------
# ground-truth disparity

def load_gt_disparity(path, fmt: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Disparity ``[H, W]`` float32 plus validity mask."""
    path = Path(path)
    fmt = fmt or ("pfm" if path.suffix.lower() == ".pfm" else "pgm16")
    if fmt == "pgm16":
        raw = read_pgm16(path)
        return raw.astype(np.float32) / 256.0, raw > 0
    if fmt == "pfm":
        d = read_pfm(path)
        if d.ndim != 2:
            raise DataIOError(f"{path}: disparity PFM must be single-channel")
        valid = np.isfinite(d) & (d > 0)
        return np.where(valid, d, 0.0).astype(np.float32), valid
    raise ConfigError(f"unknown disparity format {fmt!r}")


def save_gt_disparity(path, disparity: np.ndarray, mask: np.ndarray | None = None, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("pfm" if path.suffix.lower() == ".pfm" else "pgm16")
    d = np.asarray(disparity, dtype=np.float64)
    if mask is None:
        mask = d > 0
    if fmt == "pgm16":
        raw = np.clip(np.round(d * 256.0), 1, 65535)
        write_pgm16(path, np.where(mask, raw, 0).astype(np.uint16))
    elif fmt == "pfm":
        write_pfm(path, np.where(mask, d, 0.0).astype(np.float32))
    else:
        raise ConfigError(f"unknown disparity format {fmt!r}")


# ---------------------------------------------------------------------------
# manifests

def read_manifest(path) -> list[tuple[Path, Path, Path | None]]:
    """``left right [gt]`` per line; relative paths resolve against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"manifest not found: {path}")
    root = path.parent
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise DataIOError(f"{path}:{lineno}: expected 'left right [gt]', got {line!r}")
        paths = [p if Path(p).is_absolute() else root / p for p in map(Path, parts)]
        rows.append((paths[0], paths[1], paths[2] if len(paths) == 3 else None))
    if not rows:
        raise DataIOError(f"manifest {path} lists no pairs")
    return rows


def write_manifest(path, rows) -> None:
    lines = [" ".join(str(p) for p in row if p is not None) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)
