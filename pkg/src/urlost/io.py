"""Binary artifact formats and provenance hashing.

Two container formats are defined here:

* Matrix file (magic ``URLM``): version u32, rows u64, cols u64, element
  tag u32 (32 for f32, 64 for f64), then the row-major payload.
  Little-endian throughout.
* Checkpoint file (magic ``URLK``): version u32, a UTF-8 JSON config echo
  (u64 length prefix), tensor count u32, then per tensor: name (u16 length
  prefix), element size u8 (4 or 8), ndim u8, dims u64 each, payload.
  Little-endian IEEE-754 floats only.

Every stage of the CLI records SHA-256 hashes of the files it reads and
writes; downstream stages compare those hashes before consuming anything.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import MalformedFileError

MATRIX_MAGIC = b"URLM"
CHECKPOINT_MAGIC = b"URLK"
FORMAT_VERSION = 1

_TAG_TO_DTYPE = {32: np.dtype("<f4"), 64: np.dtype("<f8")}
_DTYPE_TO_TAG = {np.dtype("float32"): 32, np.dtype("float64"): 64}


def write_matrix(path: str | Path, values: np.ndarray) -> None:
    """Write a 2-D float matrix in the URLM container."""
    arr = np.ascontiguousarray(values)
    if arr.ndim != 2:
        raise MalformedFileError(f"matrix file payload must be 2-D, got ndim={arr.ndim}")
    if arr.dtype not in _DTYPE_TO_TAG:
        raise MalformedFileError(f"unsupported element dtype {arr.dtype}; use f32 or f64")
    tag = _DTYPE_TO_TAG[arr.dtype]
    header = MATRIX_MAGIC + struct.pack("<IQQI", FORMAT_VERSION, arr.shape[0], arr.shape[1], tag)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 24 or raw[:4] != MATRIX_MAGIC:
        raise MalformedFileError(f"{path}: not a URLM matrix file")
    version, rows, cols, tag = struct.unpack("<IQQI", raw[4:28])
    if version != FORMAT_VERSION:
        raise MalformedFileError(f"{path}: unsupported format version {version}")
    if tag not in _TAG_TO_DTYPE:
        raise MalformedFileError(f"{path}: unknown element tag {tag}")
    dtype = _TAG_TO_DTYPE[tag]
    expected = 28 + rows * cols * dtype.itemsize
    if len(raw) != expected:
        raise MalformedFileError(
            f"{path}: payload length {len(raw) - 28} != rows*cols*itemsize {expected - 28}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=rows * cols, offset=28)
    return flat.reshape(rows, cols).copy()


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    """One integer label per line, aligned with the signal matrix rows."""
    with open(path, "w") as fh:
        for v in np.asarray(labels).ravel():
            fh.write(f"{int(v)}\n")


def read_labels(path: str | Path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    return np.array([int(ln) for ln in lines], dtype=np.int64)


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write named float tensors plus a JSON config echo in the URLK container."""
    cfg_bytes = canonical_json(config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            arr = np.ascontiguousarray(tensor)
            if arr.dtype not in _DTYPE_TO_TAG:
                raise MalformedFileError(f"tensor {name!r}: dtype {arr.dtype} not f32/f64")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", arr.dtype.itemsize, arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise MalformedFileError(f"{path}: not a URLK checkpoint")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise MalformedFileError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<Q", raw[8:16])
    off = 16
    config = json.loads(raw[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack("<I", raw[off : off + 4])
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", raw[off : off + 2])
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        itemsize, ndim = struct.unpack("<BB", raw[off : off + 2])
        off += 2
        dims = struct.unpack("<" + "Q" * ndim, raw[off : off + 8 * ndim])
        off += 8 * ndim
        dtype = np.dtype("<f4") if itemsize == 4 else np.dtype("<f8")
        n_elem = int(np.prod(dims)) if ndim else 1
        payload = raw[off : off + n_elem * itemsize]
        if len(payload) != n_elem * itemsize:
            raise MalformedFileError(f"{path}: truncated tensor {name!r}")
        off += n_elem * itemsize
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return config, tensors


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_array(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def canonical_json(obj) -> str:
    """Deterministic JSON encoding used for hashing and artifact files."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())
