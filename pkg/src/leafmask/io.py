"""File formats: the LMT tensor container, box CSV, 16-bit label rasters and
JSON configs.

LMT record layout (all integers little-endian)::

    b"LMT1" | u8 dtype (0=f32, 1=f64) | u8 rank (1..4) | rank x u32 dims
    | payload (row-major, little-endian) | u32 name length | UTF-8 name

A file is any number of records back to back.
"""

import csv
import io as _io
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .assembly import Box
from .errors import FormatError, InvalidBoxError

MAGIC = b"LMT1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode_lmt(tensors):
    """Serialise ``{name: array}`` (or ``[(name, array), ...]``) to bytes."""
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    seen = set()
    buf = bytearray()
    for name, arr in items:
        if name in seen:
            raise FormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype not in _CODE_OF:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if not 1 <= arr.ndim <= 4:
            raise FormatError(f"tensor {name!r}: rank must be 1..4, got {arr.ndim}")
        code = _CODE_OF[arr.dtype]
        buf += MAGIC + struct.pack("<BB", code, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded)) + encoded
    return bytes(buf)


def decode_lmt(data):
    """Parse LMT bytes into an insertion-ordered ``{name: array}``."""
    out = {}
    pos = 0
    index = 0
    n = len(data)

    def need(count, what):
        if pos + count > n:
            raise FormatError(f"record {index}: truncated {what}", offset=pos)

    while pos < n:
        need(4, "magic")
        if data[pos : pos + 4] != MAGIC:
            raise FormatError(f"record {index}: bad magic {bytes(data[pos:pos + 4])!r}", offset=pos)
        pos += 4
        need(2, "header")
        code, rank = struct.unpack_from("<BB", data, pos)
        if code not in _CODES:
            raise FormatError(f"record {index}: unknown element type {code}", offset=pos)
        if not 1 <= rank <= 4:
            raise FormatError(f"record {index}: rank must be 1..4, got {rank}", offset=pos + 1)
        pos += 2
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        if 0 in dims:
            raise FormatError(f"record {index}: zero extent in {dims}", offset=pos)
        pos += 4 * rank
        dtype = _CODES[code]
        nbytes = int(np.prod(dims)) * dtype.itemsize
        need(nbytes, f"payload ({nbytes} bytes expected, {n - pos} available)")
        arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=pos).reshape(dims)
        pos += nbytes
        need(4, "name length")
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need(name_len, "name")
        try:
            name = bytes(data[pos : pos + name_len]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"record {index}: name is not valid UTF-8", offset=pos) from None
        if name in out:
            raise FormatError(f"record {index}: duplicate tensor name {name!r}", offset=pos)
        pos += name_len
        out[name] = arr.astype(dtype.newbyteorder("="))
        index += 1
    return out


def write_lmt(path, tensors):
    Path(path).write_bytes(encode_lmt(tensors))


def read_lmt(path):
    return decode_lmt(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

BOX_HEADER = ["x1", "y1", "x2", "y2", "score"]


def read_boxes(path):
    text = Path(path).read_text()
    rows = list(csv.reader(_io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != BOX_HEADER:
        raise FormatError(f"box CSV must start with header {','.join(BOX_HEADER)}")
    boxes = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 5:
            raise FormatError(f"box CSV line {line_no}: expected 5 fields, got {len(row)}")
        try:
            values = [float(c) for c in row]
        except ValueError:
            raise FormatError(f"box CSV line {line_no}: non-numeric field") from None
        try:
            boxes.append(Box(*values))
        except InvalidBoxError as exc:
            raise FormatError(f"box CSV line {line_no}: {exc}") from None
    return boxes


def write_boxes(path, boxes):
    lines = [",".join(BOX_HEADER)]
    for b in boxes:
        lines.append(",".join(repr(float(v)) for v in (b.x1, b.y1, b.x2, b.y2, b.score)))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# label rasters: 16-bit PNG or binary PGM (P5, maxval 65535, big-endian samples)
# ---------------------------------------------------------------------------


def _as_labels(labels):
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise FormatError(f"label image must be 2-D, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 65535):
        raise FormatError("label ids must lie in 0..65535")
    return arr.astype(np.uint16)


def write_pgm(path, labels):
    arr = _as_labels(labels)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(">u2").tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", offset=pos)
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})", offset=0)
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(data) - pos < need:
        raise FormatError(f"PGM raster truncated: {need} bytes expected", offset=pos)
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)


def write_labels(path, labels):
    """Write a label raster; ``.pgm`` selects PGM, anything else 16-bit PNG."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, labels)
        return
    arr = _as_labels(labels)
    Image.fromarray(arr).save(path, format="PNG")  # uint16 maps to mode I;16


def read_labels(path):
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I;16B", "I;16L", "I", "L", "1"):
            raise FormatError(f"{path}: unsupported raster mode {img.mode}")
        return np.array(img).astype(np.int64)


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})", offset=exc.pos) from None
