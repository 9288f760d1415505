"""File formats: the ADDM tensor container, PGM images, CSV tables, run manifests.

Container layout (all integers little-endian)::

    b"ADDM" | u32 version | u32 config_len | config (UTF-8 "key=value" lines)
    | u32 tensor_count | per tensor:
        u32 name_len | name (UTF-8) | u32 dtype (0=f32, 1=f64) | u32 rank
        | rank x u64 dims | raw payload
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"ADDM"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    pass


def encode_container(tensors: Mapping[str, np.ndarray], config: Mapping[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg_lines = "".join(f"{k}={v}\n" for k, v in (config or {}).items())
    for k, v in (config or {}).items():
        if "\n" in str(v) or "=" in str(k):
            raise FormatError(f"config entry {k!r} cannot be encoded")
    cfg = cfg_lines.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def decode_container(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("not an ADDM container (bad magic)")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} (this build reads {VERSION})")
    pos = 8
    (cfg_len,) = struct.unpack_from("<I", view, pos)
    pos += 4
    config = {}
    for line in bytes(view[pos:pos + cfg_len]).decode("utf-8").splitlines():
        if line:
            k, v = line.split("=", 1)
            config[k] = v
    pos += cfg_len
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<II", view, pos)
        pos += 8
        if code not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        dims = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(view):
            raise FormatError(f"tensor {name!r}: truncated payload")
        arr = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        pos += nbytes
        tensors[name] = arr
    if pos != len(view):
        raise FormatError("trailing bytes after tensor table")
    return tensors, config


def save_container(path: str | Path, tensors: Mapping[str, np.ndarray], config: Mapping[str, str] | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_container(tensors, config))
    os.replace(tmp, path)


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode_container(Path(path).read_bytes())


# -- images ----------------------------------------------------------------------------

def emit_pgm(mel: np.ndarray, path: str | Path) -> None:
    """8-bit binary PGM; low mel bin at the bottom row, frames left to right.

    Values are scaled linearly from [min, max] to [0, 255]; a constant mel maps
    to all zeros.  The header comment records the min/max used.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or not np.isfinite(mel).all():
        raise ValueError("emit_pgm needs a finite 2-D mel (bins x frames)")
    lo, hi = float(mel.min()), float(mel.max())
    if hi > lo:
        pix = np.rint((mel - lo) / (hi - lo) * 255.0)
    else:
        pix = np.zeros_like(mel)
    img = pix[::-1].astype(np.uint8)
    rows, cols = img.shape
    header = f"P5\n# min={lo!r} max={hi!r}\n{cols} {rows}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def read_pgm(path: str | Path) -> tuple[np.ndarray, dict[str, float]]:
    """Parse a P5 file written by :func:`emit_pgm`; returns (pixels as written, header scaling)."""
    data = Path(path).read_bytes()
    fields, comments, pos = [], {}, 0
    while len(fields) < 4:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("ascii").strip()
        pos = end + 1
        if line.startswith("#"):
            for tok in line[1:].split():
                k, v = tok.split("=")
                comments[k] = float(v)
            continue
        fields.extend(line.split())
    if fields[0] != "P5":
        raise FormatError("not a binary PGM")
    cols, rows, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pix = np.frombuffer(data[pos:pos + rows * cols], dtype=np.uint8).reshape(rows, cols)
    if maxval != 255:
        raise FormatError("expected 8-bit PGM")
    return pix, comments


# -- tables and manifests -----------------------------------------------------------------

def write_csv(path: str | Path, rows: Iterable[Mapping], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r[k]) for k in columns})


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str | Path, name: str = "run_manifest.txt") -> Path:
    """``hash  path`` line for every file under ``out_dir`` (sorted, excluding itself and locks)."""
    out_dir = Path(out_dir)
    target = out_dir / name
    lines = []
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p != target and p.suffix != ".lock":
            lines.append(f"{sha256_file(p)}  {p.relative_to(out_dir).as_posix()}")
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return target
