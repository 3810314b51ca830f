"""Checkpoints (named snapshot buffers plus a manifest) and binary PGM frames."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import ParseError, ShapeError
from .tensor import load_snapshot, save_snapshot

MANIFEST = "manifest.txt"
_NAME_OK = re.compile(r"^[A-Za-z0-9_.\-]+$")


def _as5(shape) -> tuple:
    if len(shape) > 5:
        raise ShapeError(f"cannot store a {len(shape)}-D buffer in a snapshot")
    return (1,) * (5 - len(shape)) + tuple(shape)


def save_checkpoint(named_buffers, directory) -> None:
    """One snapshot per buffer, in order, plus ``manifest.txt`` with a
    ``name d0,d1,...`` line per buffer. Buffers of rank < 5 are padded with
    leading unit axes."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, value) in enumerate(named_buffers):
        if not _NAME_OK.match(name):
            raise ParseError(f"bad buffer name {name!r}")
        value = np.asarray(getattr(value, "value", value))
        save_snapshot(d / f"{i:03d}_{name}.snap", value.reshape(_as5(value.shape)))
        lines.append(f"{name} {','.join(str(s) for s in value.shape)}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")


def load_checkpoint(directory) -> list[tuple[str, np.ndarray]]:
    d = Path(directory)
    out = []
    for i, line in enumerate((d / MANIFEST).read_text().splitlines()):
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"manifest line {i + 1}: expected 'name shape'")
        name, dims = parts
        shape = tuple(int(s) for s in dims.split(",")) if dims else ()
        out.append((name, load_snapshot(d / f"{i:03d}_{name}.snap").reshape(shape)))
    return out


def load_into(params, directory) -> None:
    """Copy checkpoint buffers into ``named_params`` of a model of the same layout."""
    stored = load_checkpoint(directory)
    params = list(params)
    if [n for n, _ in stored] != [n for n, _ in params]:
        raise ShapeError("checkpoint layout does not match the model")
    for (_, value), (_, p) in zip(stored, params):
        if value.shape != p.value.shape:
            raise ShapeError(f"shape mismatch {value.shape} vs {p.value.shape}")
        p.value[...] = value


def normalize_frame(frame: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Min-max map to 0..255 bytes; a flat frame maps to zeros."""
    frame = np.asarray(frame, dtype=np.float64)
    lo = float(frame.min()) if lo is None else lo
    hi = float(frame.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(frame.shape, dtype=np.uint8)
    scaled = np.rint((np.clip(frame, lo, hi) - lo) * (255.0 / (hi - lo)))
    return scaled.astype(np.uint8)


def write_pgm(path, frame: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """Binary P5, maxval 255. ``frame`` is (H, W); rows run along H."""
    if frame.ndim != 2:
        raise ShapeError(f"PGM frames are 2-D, got {frame.shape}")
    h, w = frame.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(normalize_frame(frame, lo, hi).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ParseError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    body = raw[pos + 1:]
    if len(body) != w * h:
        raise ParseError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
