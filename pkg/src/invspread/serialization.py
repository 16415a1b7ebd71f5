"""Versioned binary container for named float32 tensors.

Layout (all integers little-endian)::

    magic            8 bytes   b"INVSPRD\\0"
    version          u32
    manifest_length  u32
    manifest_crc32   u32
    manifest         UTF-8 JSON, manifest_length bytes
    payload          raw little-endian float32 values

The manifest carries ``kind``, free-form ``meta``, the payload CRC32 and one
entry per tensor: ``{"name", "shape", "offset", "nbytes"}`` with offsets
relative to the payload start. Readers check both checksums, so a corrupted
byte anywhere surfaces as :class:`FormatError` rather than as wrong numbers.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError

MAGIC = b"INVSPRD\0"
VERSION = 1
_HEADER = struct.Struct("<8sIII")


def write_tensor_file(path, arrays: dict[str, np.ndarray], meta: dict | None = None, kind: str = "tensors") -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    manifest = {
        "kind": kind,
        "meta": meta or {},
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, len(mbytes), zlib.crc32(mbytes))
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(mbytes)
        fh.write(payload)
    tmp.replace(path)


def read_tensor_file(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError("file shorter than the header", offset=len(blob), path=path)
    magic, version, mlen, mcrc = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError("bad magic bytes", offset=0, path=path)
    if version != VERSION:
        raise VersionError(
            f"format version {version} is not supported (this build reads version {VERSION}); "
            "re-export the file with a matching release",
            offset=8,
            path=path,
        )
    mstart = _HEADER.size
    mend = mstart + mlen
    if len(blob) < mend:
        raise FormatError("manifest truncated", offset=len(blob), path=path)
    mbytes = blob[mstart:mend]
    if zlib.crc32(mbytes) != mcrc:
        raise FormatError("manifest checksum mismatch", offset=mstart, path=path)
    try:
        manifest = json.loads(mbytes.decode("utf-8"))
        entries = manifest["tensors"]
        plen = int(manifest["payload_bytes"])
        pcrc = int(manifest["payload_crc32"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}", offset=mstart, path=path) from None
    if kind is not None and manifest.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} file, found {manifest.get('kind')!r}", offset=mstart, path=path)
    payload = blob[mend:]
    if len(payload) < plen:
        raise FormatError("payload truncated", offset=len(blob), path=path)
    if len(payload) > plen:
        raise FormatError("trailing bytes after payload", offset=mend + plen, path=path)
    if zlib.crc32(payload) != pcrc:
        raise FormatError("payload checksum mismatch", offset=mend, path=path)
    arrays = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        start, nbytes = int(e["offset"]), int(e["nbytes"])
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)) or start < 0 or start + nbytes > plen:
            raise FormatError(f"tensor {e['name']!r} does not fit the payload", offset=mend + start, path=path)
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start).astype(np.float32).reshape(shape)
    return arrays, manifest.get("meta", {})
