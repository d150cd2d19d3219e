"""
File formats: a mode-2 subset of MRC for image stacks, CSV tables for CTF
parameters and group assignments, JSON run reports, PNG montages and
``key = value`` configuration files.
"""

import csv
import json
import logging
import os
import struct
from pathlib import Path

import numpy as np

from .ctf import CtfParams
from .imaging import ImageStack

logger = logging.getLogger(__name__)

HEADER_BYTES = 1024
REPORT_SCHEMA = "cwf-run-report/1"
CTF_COLUMNS = ["group_id", "defocus_um", "voltage_kv", "cs_mm", "amplitude_contrast", "b_factor_A2"]


class FormatError(ValueError):
    """Raised for malformed or unsupported files."""


class UnsupportedModeError(FormatError):
    pass


class CorruptFileError(FormatError):
    pass


class EmptyStackError(FormatError):
    pass


def _byte_order(header):
    stamp = header[212:214]
    if stamp == b"\x11\x11":
        return ">"
    if stamp in (b"\x44\x44", b"\x44\x41"):
        return "<"
    # files without a stamp are read little-endian unless that gives an absurd mode
    mode_le = struct.unpack("<i", header[12:16])[0]
    return "<" if 0 <= mode_le < 256 else ">"


def _decode(path):
    """Validated ``(float32 payload (nz, ny, nx), pixel size)`` of a mode-2 file."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_BYTES:
        raise CorruptFileError(f"{path}: header is {len(raw)} bytes, expected {HEADER_BYTES}")
    header = raw[:HEADER_BYTES]
    bo = _byte_order(header)
    nx, ny, nz, mode = struct.unpack(bo + "4i", header[:16])
    if mode != 2:
        raise UnsupportedModeError(f"{path}: MRC mode {mode} is not supported (only mode 2, float32)")
    if nz == 0:
        raise EmptyStackError(f"{path}: stack has nz = 0 images")
    if nx <= 0 or ny <= 0 or nz < 0:
        raise CorruptFileError(f"{path}: invalid dimensions {nx} x {ny} x {nz}")
    next_ext = struct.unpack(bo + "i", header[92:96])[0]
    start = HEADER_BYTES + max(next_ext, 0)
    need = nx * ny * nz * 4
    have = len(raw) - start
    if have < need:
        raise CorruptFileError(f"{path}: payload has {have} bytes, header requires {need}")
    data = np.frombuffer(raw, dtype=bo + "f4", count=nx * ny * nz, offset=start).reshape(nz, ny, nx)
    cella_x = struct.unpack(bo + "f", header[40:44])[0]
    return data.astype("<f4"), (cella_x / nx if cella_x > 0 else 1.0)


def read_stack(path):
    """
    Read a mode-2 MRC stack.

    :raises UnsupportedModeError: for any mode other than 2.
    :raises CorruptFileError: for short headers or payloads.
    :raises EmptyStackError: for ``nz = 0``.
    """
    data, pixel = _decode(path)
    return ImageStack(data.astype(np.float64), pixel)


def read_stack_raw(path):
    """Stack payload as float32 exactly as stored, in native byte order, with any ``nx x ny``."""
    return _decode(path)[0]


def write_stack(stack, path, pixel_size=None):
    """Write a stack as little-endian mode-2 MRC (values rounded to float32)."""
    data = stack.data if isinstance(stack, ImageStack) else np.asarray(stack)
    if data.ndim == 2:
        data = data[None]
    px = pixel_size if pixel_size is not None else getattr(stack, "pixel_size", 1.0)
    nz, ny, nx = data.shape
    arr = np.ascontiguousarray(data, dtype="<f4")
    header = bytearray(HEADER_BYTES)
    struct.pack_into("<4i", header, 0, nx, ny, nz, 2)
    struct.pack_into("<3i", header, 28, nx, ny, nz)
    struct.pack_into("<3f", header, 40, nx * px, ny * px, nz * px)
    struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", header, 64, 1, 2, 3)
    if arr.size:
        struct.pack_into("<3f", header, 76, float(arr.min()), float(arr.max()), float(arr.mean()))
    header[208:212] = b"MAP "
    header[212:216] = b"\x44\x44\x00\x00"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def write_ctf_table(params, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CTF_COLUMNS)
        for g, p in enumerate(params):
            w.writerow([g, repr(p.defocus), repr(p.voltage), repr(p.spherical_aberration),
                        repr(p.amplitude_contrast), repr(p.b_factor)])


def read_ctf_table(path, pixel_size=1.0):
    """Per-group :class:`CtfParams` from a CSV table with dense group ids from 0."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CTF_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            g = int(row["group_id"])
            if g in rows:
                raise FormatError(f"{path}: duplicate group id {g}")
            rows[g] = CtfParams(
                float(row["defocus_um"]), float(row["voltage_kv"]), float(row["cs_mm"]),
                float(row["amplitude_contrast"]), float(row["b_factor_A2"]), pixel_size,
            )
    if sorted(rows) != list(range(len(rows))):
        raise FormatError(f"{path}: group ids must be dense from 0, got {sorted(rows)}")
    return [rows[g] for g in range(len(rows))]


def write_assignments(group_id, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_index", "group_id"])
        for i, g in enumerate(np.asarray(group_id)):
            w.writerow([i, int(g)])


def read_assignments(path, n=None):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        pairs = sorted((int(r["image_index"]), int(r["group_id"])) for r in reader)
    idx = [p[0] for p in pairs]
    if idx != list(range(len(idx))):
        raise FormatError(f"{path}: image indices must cover 0..n-1 exactly once")
    if n is not None and len(idx) != n:
        raise FormatError(f"{path}: {len(idx)} assignments for {n} images")
    return np.array([p[1] for p in pairs], dtype=np.int64)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def write_report(report, path):
    body = {"schema": REPORT_SCHEMA}
    body.update(report)
    Path(path).write_text(json.dumps(to_jsonable(body), indent=2, sort_keys=True))


def read_report(path):
    body = json.loads(Path(path).read_text())
    if body.get("schema") != REPORT_SCHEMA:
        raise FormatError(f"{path}: unknown report schema {body.get('schema')!r}")
    return body


def write_montage(columns, path, rows=8, pad=2):
    """
    Save an 8-bit grayscale PNG grid: one column per stack, one row per image.
    Each tile is scaled independently to its own min-max range.
    """
    from PIL import Image

    cols = [np.asarray(c.data if isinstance(c, ImageStack) else c) for c in columns]
    rows = min(rows, min(c.shape[0] for c in cols))
    L = cols[0].shape[-1]
    H = rows * (L + pad) + pad
    Wd = len(cols) * (L + pad) + pad
    canvas = np.full((H, Wd), 255, dtype=np.uint8)
    for j, c in enumerate(cols):
        for i in range(rows):
            tile = c[i].astype(np.float64)
            lo, hi = tile.min(), tile.max()
            tile = (tile - lo) / (hi - lo) if hi > lo else np.zeros_like(tile)
            y, x = pad + i * (L + pad), pad + j * (L + pad)
            canvas[y : y + L, x : x + L] = np.round(255 * tile).astype(np.uint8)
    Image.fromarray(canvas, mode="L").save(path)


def read_config(path):
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def env_config(prefix="CWF_"):
    """Config values from environment variables ``<prefix>KEY``."""
    return {k[len(prefix):].lower(): v for k, v in os.environ.items() if k.startswith(prefix)}
