"""Binary matrix files, tensor bundles, embedding archives and text lists.

Matrix block layout (all little-endian)::

    b"GEMX"  version:u8=1  rows:u64  cols:u64  rows*cols float64, row-major

A bundle is one UTF-8 header line of space-separated ``key=value`` pairs
followed by one matrix block per tensor named in the ``tensors`` key.
"""

import os
import struct
import tempfile
from contextlib import contextmanager

import numpy as np

from .errors import FormatError, InputError

MAGIC = b"GEMX"
VERSION = 1
HEADER_SIZE = len(MAGIC) + 1 + 8 + 8
# refuse anything claiming more than 2**40 values; guards rows*cols overflow
MAX_VALUES = 1 << 40


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to a temp file in the target directory, rename on success."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8"})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InputError(f"only 2-D matrices can be encoded, got shape {m.shape}")
    rows, cols = m.shape
    head = MAGIC + struct.pack("<BQQ", VERSION, rows, cols)
    return head + np.ascontiguousarray(m, dtype="<f8").tobytes()


def decode_matrix(buf, offset=0):
    """Decode one matrix block starting at ``offset``; return (matrix, end_offset)."""
    if len(buf) - offset < HEADER_SIZE:
        raise FormatError("truncated matrix header", offset)
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad magic bytes", offset)
    version, rows, cols = struct.unpack_from("<BQQ", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset + 4)
    if rows and cols > MAX_VALUES // rows:
        raise FormatError(f"dimension overflow ({rows} x {cols})", offset + 5)
    start = offset + HEADER_SIZE
    n = rows * cols
    available = (len(buf) - start) // 8
    if available < n:
        raise FormatError(
            f"truncated payload: expected {n} values, found {available}",
            start + 8 * available,
        )
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=start)
    return data.astype(np.float64).reshape(rows, cols), start + 8 * n


def save_matrix(path, m):
    data = encode_matrix(m)
    with atomic_write(path) as fh:
        fh.write(data)


def load_matrix(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    m, end = decode_matrix(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", end)
    return m


def _format_header(header):
    parts = []
    for key, value in header.items():
        value = str(value)
        if not key or any(c in key for c in " =\n") or any(c in value for c in " \n"):
            raise InputError(f"header entry {key!r}={value!r} contains a separator")
        parts.append(f"{key}={value}")
    return (" ".join(parts) + "\n").encode("utf-8")


def parse_header_line(line):
    header = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ValueError(f"header token {token!r} is not key=value")
        header[key] = value
    return header


def save_bundle(path, header, tensors):
    """Write a header dict and an ordered mapping of named arrays (1-D or 2-D)."""
    header = dict(header)
    names = list(tensors)
    header["tensors"] = ",".join(names)
    header["ndims"] = ",".join(str(np.ndim(tensors[k])) for k in names)
    chunks = [_format_header(header)]
    for name in names:
        t = np.asarray(tensors[name], dtype=np.float64)
        chunks.append(encode_matrix(t.reshape(1, -1) if t.ndim == 1 else t))
    with atomic_write(path) as fh:
        fh.write(b"".join(chunks))


def load_bundle(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    nl = buf.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line", 0)
    try:
        header = parse_header_line(buf[:nl].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"bad header line: {exc}", 0) from exc
    names = [n for n in header.pop("tensors", "").split(",") if n]
    ndims = [int(d) for d in header.pop("ndims", "").split(",") if d]
    if len(ndims) != len(names):
        raise FormatError("tensors/ndims header mismatch", 0)
    offset = nl + 1
    tensors = {}
    for name, nd in zip(names, ndims):
        m, offset = decode_matrix(buf, offset)
        tensors[name] = m.reshape(-1) if nd == 1 else m
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes", offset)
    return header, tensors


def ids_path(archive_path):
    return os.fspath(archive_path) + ".ids"


def save_archive(path, ids, matrix):
    """Embedding archive: matrix file plus a ``.ids`` sidecar, one id per row."""
    ids = list(ids)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise InputError(f"{len(ids)} ids for a matrix of shape {matrix.shape}")
    save_matrix(path, matrix)
    write_lines(ids_path(path), ids)


def load_archive(path):
    matrix = load_matrix(path)
    ids = read_lines(ids_path(path))
    if len(ids) != matrix.shape[0]:
        raise InputError(f"{path}: {len(ids)} ids for {matrix.shape[0]} rows")
    return ids, matrix


def write_lines(path, lines):
    with atomic_write(path, "w") as fh:
        for line in lines:
            fh.write(f"{line}\n")


def read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]
