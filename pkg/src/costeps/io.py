"""On-disk formats: tensor files, checkpoints, instance sidecars.

Tensor file (little-endian)::

    4s   magic "COST"
    u32  format version (1)
    u8   dtype tag: 0 = float32, 1 = float64
    u8   ndim
    u32  dims[ndim]
    ...  payload, row-major
    u32  CRC32 of the payload

Checkpoint (little-endian)::

    4s   magic "COSK"
    u32  format version (1)
    u32  manifest length in bytes
    ...  manifest, UTF-8 JSON:
         {"model_config": {...}, "extra": {...},
          "params": [{"name", "offset", "length"}, ...]}
    ...  concatenated tensor-file sections; offsets count from the first
         byte after the manifest
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"COST"
VERSION = 1
CKPT_MAGIC = b"COSK"
CKPT_VERSION = 1
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFileError(ValueError):
    pass


class CrcError(TensorFileError):
    pass


def encode_tensor(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _TAGS:
        raise TensorFileError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255 or any(d >= 2**32 for d in arr.shape):
        raise TensorFileError(f"shape {arr.shape} does not fit the header")
    payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
    header = MAGIC + struct.pack("<IBB", VERSION, _TAGS[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 10:
        raise TensorFileError("truncated tensor file header")
    if buf[:4] != MAGIC:
        raise TensorFileError(f"bad magic {buf[:4]!r}")
    version, tag, ndim = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise TensorFileError(f"unsupported tensor file version {version}")
    if tag not in _DTYPES:
        raise TensorFileError(f"unknown dtype tag {tag}")
    off = 10
    if len(buf) < off + 4 * ndim:
        raise TensorFileError("truncated tensor file header")
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    dt = _DTYPES[tag]
    n = int(np.prod(dims)) * dt.itemsize
    if len(buf) < off + n + 4:
        raise TensorFileError(f"truncated payload: need {off + n + 4} bytes, have {len(buf)}")
    if len(buf) > off + n + 4:
        raise TensorFileError("trailing bytes after tensor file")
    payload = buf[off : off + n]
    (crc,) = struct.unpack_from("<I", buf, off + n)
    if zlib.crc32(payload) != crc:
        raise CrcError("CRC mismatch: tensor payload is corrupted")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def tensorfile_write(path, t) -> None:
    _atomic_write(Path(path), encode_tensor(t))


def tensorfile_read(path) -> Tensor:
    return Tensor(decode_tensor(Path(path).read_bytes()))


def read_dtype_tag(path) -> int:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise TensorFileError(f"bad magic {buf[:4]!r}")
    return buf[8]


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    sections, entries, offset = [], [], 0
    for name, arr in model.state_dict().items():
        blob = encode_tensor(arr)
        entries.append({"name": name, "offset": offset, "length": len(blob)})
        sections.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"model_config": model.config.to_dict(), "extra": extra or {}, "params": entries},
        sort_keys=True,
    ).encode()
    head = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(manifest))
    _atomic_write(Path(path), head + manifest + b"".join(sections))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(manifest, {name: array})``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise TensorFileError(f"bad checkpoint magic {buf[:4]!r}")
    version, mlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise TensorFileError(f"unsupported checkpoint version {version}")
    base = 12 + mlen
    if len(buf) < base:
        raise TensorFileError("truncated checkpoint manifest")
    manifest = json.loads(buf[12:base].decode())
    params = {}
    for e in manifest["params"]:
        start = base + e["offset"]
        blob = buf[start : start + e["length"]]
        if len(blob) != e["length"]:
            raise TensorFileError(f"truncated checkpoint section {e['name']}")
        params[e["name"]] = decode_tensor(blob)
    return manifest, params


def load_checkpoint(path):
    from .model import DiT, ModelConfig

    manifest, params = read_checkpoint(path)
    model = DiT(ModelConfig(**manifest["model_config"]))
    model.load_state_dict(params)
    return model, manifest


# --- instances ---------------------------------------------------------------


def save_instance(stem, instance) -> None:
    stem = Path(stem)
    tensorfile_write(stem.with_suffix(".cost"), instance.target)
    _atomic_write(stem.with_suffix(".json"), json.dumps(instance.sidecar(), indent=2).encode())


def load_instance(stem):
    from .tasks import instance_from_json

    stem = Path(stem)
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    target = tensorfile_read(stem.with_suffix(".cost")).data
    inst = instance_from_json(sidecar, target.shape[0])
    if not np.array_equal(inst.target, target):
        raise TensorFileError("instance sidecar does not reproduce the stored target")
    return inst


def save_array_with_axes(path, arr, axes: list[str], meta: dict | None = None) -> None:
    """Tensor file plus a JSON sidecar naming the axes."""
    path = Path(path)
    tensorfile_write(path, np.asarray(arr))
    side = {"axes": list(axes), "shape": list(np.shape(arr)), **(meta or {})}
    _atomic_write(path.with_suffix(".json"), json.dumps(side, indent=2).encode())
