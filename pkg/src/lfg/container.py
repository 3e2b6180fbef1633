"""Named-block binary container used for checkpoints and extractor weights.

Layout: magic (4 bytes), u32 format version, u32 JSON length + UTF-8 config
JSON, u32 block count, then per block: u32 name length + name, u8 dtype tag
(0=f4, 1=f8, 2=u1), u32 ndim + u32 dims, raw little-endian payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "u1"}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


def write_blocks(path, magic: bytes, config: dict, blocks: dict[str, np.ndarray]):
    if len(magic) != 4:
        raise DataError("container magic must be 4 bytes")
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(blocks)))
        for name in sorted(blocks):
            arr = np.asarray(blocks[name])
            if arr.dtype not in _TAGS:
                raise DataError(f"block {name}: unsupported dtype {arr.dtype}")
            nm = name.encode("utf-8")
            f.write(struct.pack("<I", len(nm)))
            f.write(nm)
            f.write(struct.pack("<B", _TAGS[arr.dtype]))
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            f.write(arr.astype(_DTYPES[_TAGS[arr.dtype]]).tobytes())


def read_blocks(path, magic: bytes):
    blob = Path(path).read_bytes()
    if blob[:4] != magic:
        raise DataError(f"{path}: expected container magic {magic!r}, found {blob[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    (clen,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = json.loads(blob[off:off + clen].decode("utf-8"))
    off += clen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (tag,) = struct.unpack_from("<B", blob, off)
        off += 1
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        dt = np.dtype(_DTYPES[tag])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if shape else dt.itemsize
        arr = np.frombuffer(blob[off:off + n_bytes], dtype=dt).reshape(shape).copy()
        off += n_bytes
        blocks[name] = arr
    return config, blocks
