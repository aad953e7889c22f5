"""Named-tensor blob format and checkpoint directories.

Blob layout (all integers little-endian)::

    b"GFTB"                 magic
    u32                     format version (1)
    u32                     record count
    per record:
        u32                 name length in bytes
        bytes               UTF-8 name
        u8                  dtype code (0 = float32)
        u32                 rank
        u32 * rank          dims
        bytes               raw little-endian data, C order

A checkpoint is a directory holding ``manifest.json`` and ``tensors.gftb``.
The manifest records a format version, the producing stage, its config and
seeds, and ``lineage``: the content hashes of upstream checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
import tempfile
import warnings
from pathlib import Path

import numpy as np

MAGIC = b"GFTB"
BLOB_VERSION = 1
CHECKPOINT_VERSION = 1
BLOB_NAME = "tensors.gftb"
MANIFEST_NAME = "manifest.json"
_DTYPES = {0: np.dtype("<f4")}
_CODES = {np.dtype("<f4"): 0}


class BlobError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class LineageWarning(UserWarning):
    pass


def encode_blob(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", BLOB_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        # not ascontiguousarray: it promotes 0-d arrays to 1-d
        arr = np.array(arr, dtype="<f4", order="C", copy=True)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def write_blob(tensors, path) -> None:
    """Write named float32 tensors. ``tensors`` is a mapping or a sequence of (name, array) pairs."""
    items = list(tensors.items()) if hasattr(tensors, "items") else list(tensors)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise BlobError(f"duplicate tensor name: {dup[0]}")
    data = encode_blob(dict(items))
    _atomic_write(Path(path), data)


def decode_blob(data: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise BlobError("unexpected end of blob")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise BlobError("bad magic: not a GFTB blob")
    version, count = struct.unpack("<II", take(8))
    if version != BLOB_VERSION:
        raise BlobError(f"unsupported blob version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5))
        if code not in _DTYPES:
            raise BlobError(f"unknown dtype code {code} for tensor {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dtype).reshape(dims).astype(np.float32)
        if name in out:
            raise BlobError(f"duplicate tensor name: {name}")
        out[name] = arr
    if pos != len(data):
        raise BlobError("trailing bytes after last blob record")
    return out


def read_blob(path) -> dict[str, np.ndarray]:
    return decode_blob(Path(path).read_bytes())


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def content_hash(ckpt_dir) -> str:
    """sha256 over the manifest and tensor blob bytes."""
    h = hashlib.sha256()
    for name in (MANIFEST_NAME, BLOB_NAME):
        h.update((Path(ckpt_dir) / name).read_bytes())
    return h.hexdigest()


def write_checkpoint(manifest: dict, tensors: dict, ckpt_dir) -> Path:
    """Publish a checkpoint directory atomically (temp dir + rename)."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest.setdefault("format_version", CHECKPOINT_VERSION)
    manifest.setdefault("lineage", {})
    manifest["tensors"] = {k: list(np.shape(v)) for k, v in tensors.items()}
    tmp = Path(tempfile.mkdtemp(dir=ckpt_dir.parent, prefix=f".{ckpt_dir.name}."))
    try:
        (tmp / BLOB_NAME).write_bytes(encode_blob(tensors))
        (tmp / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if ckpt_dir.exists():
            shutil.rmtree(ckpt_dir)
        os.replace(tmp, ckpt_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return ckpt_dir


def read_checkpoint(ckpt_dir, upstream: dict | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Load a checkpoint; warn if ``upstream`` {role: dir} hashes differ from the recorded lineage."""
    ckpt_dir = Path(ckpt_dir)
    mpath, bpath = ckpt_dir / MANIFEST_NAME, ckpt_dir / BLOB_NAME
    if not mpath.exists():
        raise CheckpointError(f"missing manifest in {ckpt_dir}")
    if not bpath.exists():
        raise CheckpointError(f"missing tensor blob in {ckpt_dir}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    tensors = read_blob(bpath)
    for name, shape in manifest.get("tensors", {}).items():
        if name not in tensors:
            raise CheckpointError(f"tensor {name!r} listed in manifest but missing from blob")
        if list(tensors[name].shape) != list(shape):
            raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, manifest says {shape}")
    for role, up_dir in (upstream or {}).items():
        recorded = manifest.get("lineage", {}).get(role)
        actual = content_hash(up_dir)
        if recorded != actual:
            warnings.warn(f"lineage mismatch for {role}: checkpoint built on {recorded}, given {actual}",
                          LineageWarning, stacklevel=2)
    return manifest, tensors
