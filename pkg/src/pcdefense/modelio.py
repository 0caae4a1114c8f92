"""Versioned binary model container shared by the classifier families.

Layout: 8-byte magic, u32 format version, u32 header length, JSON header
(kind, arch, tensor names/shapes, extra metadata), then the tensors as
little-endian float64 blobs in header order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ModelFileError

MAGIC = b"PCDMODEL"
FORMAT_VERSION = 1


def save_model(path, kind: str, arch: str, tensors: dict[str, np.ndarray], extra: dict | None = None):
    header = {
        "kind": kind,
        "arch": arch,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_model(path, expect_kind: str | None = None, expect_arch: str | None = None):
    """Read a model container; returns (arch, tensors, extra)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise ModelFileError(f"{path}: corrupt file (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise ModelFileError(f"{path}: version mismatch (file {version}, supported {FORMAT_VERSION})")
    if len(raw) < 16 + hlen:
        raise ModelFileError(f"{path}: corrupt file (truncated header)")
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except json.JSONDecodeError as e:
        raise ModelFileError(f"{path}: corrupt file (bad header: {e})") from e
    if expect_kind is not None and header["kind"] != expect_kind:
        raise ModelFileError(f"{path}: kind mismatch (file {header['kind']!r}, want {expect_kind!r})")
    if expect_arch is not None and header["arch"] != expect_arch:
        raise ModelFileError(f"{path}: arch mismatch (file {header['arch']!r}, want {expect_arch!r})")
    tensors = {}
    off = 16 + hlen
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * 8
        if off + nbytes > len(raw):
            raise ModelFileError(f"{path}: corrupt file (truncated tensor {spec['name']!r})")
        arr = np.frombuffer(raw[off : off + nbytes], dtype="<f8").reshape(spec["shape"])
        tensors[spec["name"]] = arr.astype(np.float64)
        off += nbytes
    if off != len(raw):
        raise ModelFileError(f"{path}: corrupt file (trailing bytes)")
    return header["arch"], tensors, header["extra"]
