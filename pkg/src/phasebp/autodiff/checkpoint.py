"""Checkpoint files: binary parameter records plus a JSON manifest.

Binary layout (little-endian)::

    magic  b"PBCK"  | version u32 | record count u32
    per record: name length u32, utf-8 name, ndim u32, dims u32 * ndim,
                dtype code u8 (0 = float32, 1 = float64), raw values

The manifest sits next to the binary as ``<name>.json``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"PBCK"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, state: "OrderedDict[str, np.ndarray]", meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(state))]
    params = []
    for name, arr in state.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<B", code))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        params.append({"name": name, "shape": list(arr.shape)})
    blob = b"".join(chunks)
    path.write_bytes(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "parameters": params,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "meta": meta or {},
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            (code,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            state[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize,
                                        offset=pos).reshape(shape).astype(dt.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    if manifest:
        listed = [(p["name"], tuple(p["shape"])) for p in manifest.get("parameters", [])]
        actual = [(k, v.shape) for k, v in state.items()]
        if listed != actual:
            raise CheckpointError(f"{path}: manifest does not match binary records")
    return state, manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
