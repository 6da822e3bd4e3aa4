"""FP8T tensor files and the CSV tensor format.

Binary layout (all multi-byte integers big-endian)::

    offset  size  field
    0       4     magic b"FP8T"
    4       1     version (1)
    5       1     rank R
    6       1     dtype tag: 1 = FP8 (1,5,2) codes, 2 = FP16 codes, 3 = FP32 values
    7       1     rounding tag: 0 = none, 1 = rne, 2 = stochastic, 3 = truncate
    8       4     overflow count (u32)
    12      4     underflow count (u32)
    16      4*R   dimensions (u32 each)
    16+4R   ...   payload: one byte per FP8 code, or big-endian u16 / binary32

The payload length must equal ``prod(dims) * itemsize`` exactly; anything
else is rejected.

CSV tensors are comma-separated numbers, one matrix row per line. An
optional first line ``# shape: d0,d1,...`` restores arbitrary rank; without
it the shape is ``(rows, cols)``, collapsed to 1-D for a single row.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from fp8train.formats import FP8, FP16, RoundingMode
from fp8train.tensor import QuantizedTensor

__all__ = [
    "MAGIC",
    "VERSION",
    "TensorFormatError",
    "to_bytes",
    "from_bytes",
    "write_tensor",
    "read_tensor",
    "read_csv_tensor",
    "write_csv_tensor",
    "load_any",
]

MAGIC = b"FP8T"
VERSION = 1
_HEADER = struct.Struct(">4sBBBBII")

_DTYPE_TAGS = {1: (FP8, np.dtype(">u1")), 2: (FP16, np.dtype(">u2")), 3: (None, np.dtype(">f4"))}
_MODE_TAGS = {
    0: None,
    1: RoundingMode.NEAREST_EVEN,
    2: RoundingMode.STOCHASTIC,
    3: RoundingMode.TRUNCATE,
}


class TensorFormatError(ValueError):
    """Raised for unreadable or malformed tensor files."""


def to_bytes(t: QuantizedTensor | np.ndarray) -> bytes:
    if isinstance(t, QuantizedTensor):
        tag = {FP8: 1, FP16: 2}.get(t.fmt)
        if tag is None:
            raise ValueError(f"cannot serialize {t.fmt.name} codes")
        mode_tag = {v: k for k, v in _MODE_TAGS.items()}[t.mode_used]
        payload = np.ascontiguousarray(t.codes).astype(_DTYPE_TAGS[tag][1]).tobytes()
        shape, over, under = t.shape, t.overflow_count, t.underflow_count
    else:
        arr = np.asarray(t, dtype=np.float32)
        tag, mode_tag, over, under = 3, 0, 0, 0
        payload = np.ascontiguousarray(arr).astype(">f4").tobytes()
        shape = arr.shape
    if len(shape) > 255:
        raise ValueError("rank exceeds 255")
    header = _HEADER.pack(MAGIC, VERSION, len(shape), tag, mode_tag, over, under)
    dims = struct.pack(f">{len(shape)}I", *shape)
    return header + dims + payload


def from_bytes(data: bytes) -> QuantizedTensor | np.ndarray:
    if len(data) < _HEADER.size:
        raise TensorFormatError(f"truncated header: {len(data)} bytes, need {_HEADER.size}")
    magic, version, rank, tag, mode_tag, over, under = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if tag not in _DTYPE_TAGS:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    if mode_tag not in _MODE_TAGS:
        raise TensorFormatError(f"unknown rounding tag {mode_tag}")
    off = _HEADER.size + 4 * rank
    if len(data) < off:
        raise TensorFormatError("truncated dimension list")
    shape = struct.unpack_from(f">{rank}I", data, _HEADER.size)
    fmt, dt = _DTYPE_TAGS[tag]
    need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(data) - off != need:
        raise TensorFormatError(
            f"payload is {len(data) - off} bytes, shape {shape} needs {need}"
        )
    arr = np.frombuffer(data, dtype=dt, count=need // dt.itemsize, offset=off).reshape(shape)
    if fmt is None:
        return arr.astype(np.float32)
    mode = _MODE_TAGS[mode_tag] or RoundingMode.NEAREST_EVEN
    return QuantizedTensor(
        codes=arr.astype(fmt.code_dtype),
        fmt=fmt,
        mode_used=mode,
        overflow_count=over,
        underflow_count=under,
    )


def write_tensor(path, t: QuantizedTensor | np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(t))


def read_tensor(path) -> QuantizedTensor | np.ndarray:
    return from_bytes(Path(path).read_bytes())


def read_csv_tensor(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    shape = None
    if lines and lines[0].lstrip().startswith("#"):
        head = lines.pop(0).lstrip("# \t")
        if head.lower().startswith("shape:"):
            try:
                shape = tuple(int(d) for d in head[6:].split(",") if d.strip())
            except ValueError as exc:
                raise TensorFormatError(f"bad shape line: {head!r}") from exc
    rows = []
    for lineno, line in enumerate(lines, start=2 if shape is not None else 1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise TensorFormatError(f"line {lineno}: not a number list: {line[:40]!r}") from exc
    if not rows:
        raise TensorFormatError("CSV tensor has no data rows")
    flat = np.array([v for r in rows for v in r], dtype=np.float32)
    if shape is None:
        if len({len(r) for r in rows}) != 1:
            raise TensorFormatError("ragged CSV rows")
        shape = (len(rows), len(rows[0])) if len(rows) > 1 else (len(rows[0]),)
    if int(np.prod(shape)) != flat.size:
        raise TensorFormatError(f"shape {shape} does not match {flat.size} values")
    return flat.reshape(shape)


def write_csv_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    mat = arr.reshape(-1, arr.shape[-1]) if arr.ndim else arr.reshape(1, 1)
    out = [f"# shape: {','.join(str(d) for d in arr.shape)}"]
    out += [",".join(repr(float(v)) for v in row) for row in mat]
    Path(path).write_text("\n".join(out) + "\n")


def load_any(path) -> QuantizedTensor | np.ndarray:
    """Read FP8T binary if the magic matches, otherwise parse as CSV."""
    p = Path(path)
    with p.open("rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return read_tensor(p)
    try:
        return read_csv_tensor(p)
    except UnicodeDecodeError as exc:
        raise TensorFormatError("neither an FP8T file nor UTF-8 CSV") from exc
