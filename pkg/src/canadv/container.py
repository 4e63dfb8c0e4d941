"""Binary container shared by datasets, adversarial datasets and checkpoints.

Layout (all integers little-endian)::

    MAGIC            8 bytes   b"CANADV\\x00\\x01"
    header_length    8 bytes   unsigned
    header           header_length bytes of UTF-8 JSON (sorted keys, compact)
    payload          raw array bytes, concatenated in header order

The header carries a ``kind`` string, a ``format_version`` integer, arbitrary
metadata, and an ``arrays`` list describing each stored array
(name, dtype string such as ``<f8``, shape, byte offset into the payload).
Writing the same content twice yields identical bytes: no timestamps are
embedded and JSON keys are sorted.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import IO, Any, Mapping

import numpy as np

MAGIC = b"CANADV\x00\x01"

_ALLOWED_DTYPES = {"<f8", "<i8", "|u1"}


class ContainerError(ValueError):
    """Base class for malformed or incompatible container files."""


class FormatVersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


def _dump_header(header: Mapping[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(kind: str, version: int, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == np.uint8:
            arr = arr.astype("|u1", copy=False)
        elif arr.dtype.kind == "f":
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8", copy=False)
        else:
            raise ContainerError(f"unsupported dtype {arr.dtype} for array {name!r}")
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"kind": kind, "format_version": version, "meta": dict(meta), "arrays": entries}
    head = _dump_header(header)
    return b"".join([MAGIC, struct.pack("<Q", len(head)), head, *chunks])


def decode(blob: bytes, kind: str, version: int) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Inverse of :func:`encode`; validates kind, version and byte counts."""
    if len(blob) < 16:
        raise TruncatedError("file shorter than the fixed preamble")
    if blob[:8] != MAGIC:
        raise ContainerError("bad magic; not a canadv container")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise TruncatedError("header cut short")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from exc
    if header.get("kind") != kind:
        raise ContainerError(f"expected a {kind!r} container, found {header.get('kind')!r}")
    if header.get("format_version") != version:
        raise FormatVersionError(
            f"{kind} format_version {header.get('format_version')!r} is not supported (expected {version})"
        )
    payload = memoryview(blob)[16 + hlen :]
    arrays: dict[str, np.ndarray] = {}
    end = 0
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        if dtype.str not in _ALLOWED_DTYPES:
            raise ContainerError(f"unsupported dtype {entry['dtype']!r}")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        start = int(entry["offset"])
        end = start + nbytes
        if end > len(payload):
            raise TruncatedError(f"array {entry['name']!r} truncated ({len(payload)} of {end} payload bytes)")
        arrays[entry["name"]] = np.frombuffer(payload[start:end], dtype=dtype).reshape(shape).copy()
    if end != len(payload):
        raise ContainerError(f"{len(payload) - end} trailing bytes after last array")
    return header["meta"], arrays


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


# read once at import, before any worker threads exist
_FILE_MODE = 0o666 & ~_umask()


def write_atomic(path: str | os.PathLike, blob: bytes) -> None:
    """Write ``blob`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.chmod(tmp, _FILE_MODE)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump(sink: str | os.PathLike | IO[bytes], blob: bytes) -> None:
    if isinstance(sink, (str, os.PathLike)):
        write_atomic(sink, blob)
    else:
        sink.write(blob)


def slurp(source: str | os.PathLike | IO[bytes] | bytes) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, (str, os.PathLike)):
        return Path(source).read_bytes()
    if isinstance(source, io.TextIOBase):
        raise TypeError("containers are binary; open the file in 'rb' mode")
    return source.read()
