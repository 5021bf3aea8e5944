"""On-disk interchange: NPY v1.0 token matrices, JSON reports, CSV tables.

The NPY codec is written out here rather than delegated to ``np.save`` so
that corrupt or non-finite files fail with a precise diagnostic. Output is
byte-identical to what NumPy itself writes for the same array.
"""

from __future__ import annotations

import ast
import csv
import json
import os
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IoFailure, MalformedHeader, NonFiniteValue, ShapeMismatch

MAGIC = b"\x93NUMPY"
ALIGN = 64
GROWTH_AXIS_MAX_DIGITS = 21
_HEADER_LEN_FORMAT = {1: "<H", 2: "<I", 3: "<I"}
_FLOAT_DESCRS = {"<f4", "<f8", ">f4", ">f8"}


def _npy_header(dtype: np.dtype, shape: tuple[int, ...]) -> bytes:
    fields = {"descr": dtype.str, "fortran_order": False, "shape": tuple(shape)}
    text = "{" + "".join(f"'{k}': {fields[k]!r}, " for k in sorted(fields)) + "}"
    if shape:
        text += " " * (GROWTH_AXIS_MAX_DIGITS - len(repr(shape[0])))
    body = text.encode("latin1")
    hlen = len(body) + 1
    pad = ALIGN - ((len(MAGIC) + 2 + 2 + hlen) % ALIGN)
    if hlen + pad > 0xFFFF:
        raise IoFailure("array header too long for NPY version 1.0")
    return MAGIC + bytes([1, 0]) + struct.pack("<H", hlen + pad) + body + b" " * pad + b"\n"


def encode_npy(x, dtype="float64") -> bytes:
    dt = np.dtype(dtype).newbyteorder("<")
    if dt.kind != "f" or dt.itemsize not in (4, 8):
        raise IoFailure(f"only 32- or 64-bit float payloads are written, got {dtype}")
    arr = np.ascontiguousarray(np.asarray(x), dtype=dt)
    if arr.ndim not in (2, 3):
        raise ShapeMismatch(f"expected a 2-D matrix or 3-D stack, got shape {arr.shape}")
    return _npy_header(arr.dtype, arr.shape) + arr.tobytes(order="C")


def save_matrix(x, path, dtype="float64") -> Path:
    """Write ``x`` (N x D, or L x N x D) as little-endian C-order NPY v1.0."""
    path = Path(path)
    data = encode_npy(x, dtype)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def _parse_header(buf: bytes, where: str) -> tuple[np.dtype, tuple[int, ...], int]:
    if len(buf) < 10 or buf[:6] != MAGIC:
        raise MalformedHeader(f"{where}: missing NPY magic string")
    major = buf[6]
    if major not in _HEADER_LEN_FORMAT:
        raise MalformedHeader(f"{where}: unsupported NPY version {major}.{buf[7]}")
    fmt = _HEADER_LEN_FORMAT[major]
    prefix = 8 + struct.calcsize(fmt)
    if len(buf) < prefix:
        raise MalformedHeader(f"{where}: truncated header length field")
    (hlen,) = struct.unpack(fmt, buf[8:prefix])
    if len(buf) < prefix + hlen:
        raise MalformedHeader(f"{where}: header declares {hlen} bytes, file is truncated")
    encoding = "utf8" if major == 3 else "latin1"
    try:
        header = ast.literal_eval(buf[prefix : prefix + hlen].decode(encoding))
    except (ValueError, SyntaxError, UnicodeDecodeError) as exc:
        raise MalformedHeader(f"{where}: unreadable header dictionary ({exc})") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise MalformedHeader(f"{where}: header must hold exactly descr, fortran_order, shape")
    descr, fortran, shape = header["descr"], header["fortran_order"], header["shape"]
    if descr not in _FLOAT_DESCRS:
        raise MalformedHeader(f"{where}: dtype {descr!r} is not a 32- or 64-bit float")
    if not isinstance(fortran, bool):
        raise MalformedHeader(f"{where}: fortran_order must be a bool")
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise MalformedHeader(f"{where}: shape must be a tuple of non-negative ints")
    if fortran and len(shape) > 1:
        raise MalformedHeader(f"{where}: Fortran-ordered payloads are not accepted")
    return np.dtype(descr), shape, prefix + hlen


def decode_npy(buf: bytes, where: str = "<bytes>") -> np.ndarray:
    dtype, shape, offset = _parse_header(buf, where)
    if len(shape) not in (2, 3):
        raise ShapeMismatch(f"{where}: expected 2-D (N, D) or 3-D (L, N, D), got shape {shape}")
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = len(buf) - offset
    if payload != expected:
        raise ShapeMismatch(f"{where}: shape {shape} needs {expected} payload bytes, found {payload}")
    arr = np.frombuffer(buf, dtype=dtype, offset=offset).reshape(shape)
    bad = ~np.isfinite(arr)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        names = ("row", "column") if arr.ndim == 2 else ("layer", "row", "column")
        detail = ", ".join(f"{n} {i}" for n, i in zip(names, pos))
        raise NonFiniteValue(f"{where}: non-finite value at {detail}")
    return arr.astype(dtype.newbyteorder("="), copy=True)


def load_matrix(path) -> np.ndarray | list[np.ndarray]:
    """Read an NPY token matrix; 3-D stacks come back as a list of per-layer matrices."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    arr = decode_npy(buf, str(path))
    if arr.ndim == 3:
        return [arr[i] for i in range(arr.shape[0])]
    return arr


def list_matrix_files(path) -> list[Path]:
    """A single file, or every ``*.npy`` in a directory in lexicographic order."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix == ".npy")
        if not files:
            raise IoFailure(f"no .npy files in {path}")
        return files
    if not path.exists():
        raise IoFailure(f"{path} does not exist")
    return [path]


def _plain(obj):
    if hasattr(obj, "to_dict"):
        return _plain(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, os.PathLike):
        return os.fspath(obj)
    return obj


def dumps_report(report) -> str:
    """Canonical JSON: sorted keys, shortest round-trip floats, trailing newline."""
    return json.dumps(_plain(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(report, path) -> Path:
    path = Path(path)
    try:
        text = dumps_report(report)
    except ValueError as exc:
        raise IoFailure(f"report for {path} holds a non-finite number") from exc
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read report {path}: {exc}") from exc


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """RFC-4180 CSV (CRLF line ends) with a header row; floats use repr."""
    path = Path(path)

    def cell(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        if isinstance(v, np.integer):
            return int(v)
        return v

    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([cell(v) for v in row])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path
