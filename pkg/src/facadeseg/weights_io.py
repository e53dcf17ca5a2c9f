"""Weights file: versioned header, JSON manifest, little-endian float32 blob.

Layout::

    b"FACADESEG-WEIGHTS/1\\n"
    uint64 LE   manifest length in bytes
    manifest    UTF-8 JSON {"version", "tensors": [...], "architecture": ...}
    blob        float32 LE values, tensors in manifest order

Writes are atomic (temporary file then rename).
"""
import json
import os
import struct
import tempfile

import numpy as np

HEADER = b"FACADESEG-WEIGHTS/1\n"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def encode_weights(entries, extra=None):
    """Serialise ``entries`` to bytes.

    ``entries`` is a list of dicts with keys ``name``, ``kind``, ``array`` and
    optionally ``share_id``.
    """
    manifest = {"version": VERSION, "tensors": [], **(extra or {})}
    chunks, offset = [], 0
    for e in entries:
        arr = np.ascontiguousarray(e["array"], dtype="<f4")
        manifest["tensors"].append(
            {
                "name": e["name"],
                "kind": e.get("kind", "param"),
                "shape": list(arr.shape),
                "share_id": e.get("share_id"),
                "offset": offset,
                "count": int(arr.size),
            }
        )
        chunks.append(arr.tobytes())
        offset += arr.size
    meta = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return HEADER + struct.pack("<Q", len(meta)) + meta + b"".join(chunks)


def decode_weights(data):
    """Inverse of :func:`encode_weights`; returns (entries, manifest)."""
    if not data.startswith(HEADER):
        raise WeightsFormatError("not a facadeseg weights file (bad header)")
    pos = len(HEADER)
    if len(data) < pos + 8:
        raise WeightsFormatError("truncated weights file")
    (mlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    try:
        manifest = json.loads(data[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"corrupt manifest: {exc}") from exc
    if manifest.get("version") != VERSION:
        raise WeightsFormatError(f"unsupported weights version {manifest.get('version')!r}")
    blob = np.frombuffer(data, dtype="<f4", offset=pos + mlen)
    entries = []
    for t in manifest["tensors"]:
        start, count = t["offset"], t["count"]
        if start + count > blob.size:
            raise WeightsFormatError(f"tensor {t['name']!r} runs past end of blob")
        arr = blob[start:start + count].reshape(t["shape"]).astype(np.float32)
        entries.append({"name": t["name"], "kind": t["kind"], "array": arr, "share_id": t.get("share_id")})
    return entries, manifest


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_weights(path, entries, extra=None):
    atomic_write_bytes(path, encode_weights(entries, extra))


def load_weights(path):
    with open(path, "rb") as fh:
        return decode_weights(fh.read())
