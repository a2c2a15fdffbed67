"""Binary checkpoint container (see docs/checkpoint-format.md for the byte layout).

All integers are little-endian u32.  The file starts with the ASCII magic
``DSRN`` and a format version, then the network configuration as UTF-8 JSON,
then one record per stored array (parameters and batch-norm running
statistics, in :meth:`NetworkGraph.named_arrays` order), and finally a CRC-32
of everything before it so that flipped payload bytes are detected too.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .network import NetworkConfig, NetworkGraph, build_network

MAGIC = b"DSRN"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}
MAX_RANK = 8


def encode_checkpoint(net: NetworkGraph) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = net.config.to_json().encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg]
    arrays = list(net.state_dict().items())
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODE_OF:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<II", _CODE_OF[dt], arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(net: NetworkGraph, path) -> None:
    """Write atomically: a temporary file in the target directory is renamed into place."""
    path = Path(path)
    data = encode_checkpoint(net)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"file ends at byte {len(self.buf)} while reading {what} ({n} bytes at offset {self.pos})"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(buf: bytes) -> Tuple[NetworkConfig, Dict[str, np.ndarray]]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    raw_cfg = r.take(r.u32("config length"), "config")
    try:
        doc = json.loads(raw_cfg.decode("utf-8"))
        if not isinstance(doc, dict):
            raise ValueError("config is not a JSON object")
        config = NetworkConfig.from_dict(doc)
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid network config in checkpoint: {exc}") from exc
    arrays: Dict[str, np.ndarray] = {}
    for i in range(r.u32("record count")):
        try:
            name = r.take(r.u32(f"record {i} name length"), f"record {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"record {i}: name is not UTF-8") from exc
        code, rank = r.u32(f"{name} dtype"), r.u32(f"{name} rank")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        if rank > MAX_RANK:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims"))
        dt = DTYPE_CODES[code]
        count = int(np.prod(dims, dtype=np.int64))
        data = r.take(count * dt.itemsize, f"{name} data")
        arrays[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    stored = r.u32("checksum")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the checksum")
    if zlib.crc32(buf[:-4]) != stored:
        raise CheckpointChecksumError("checksum mismatch: the file is corrupted")
    return config, arrays


def load_checkpoint(path) -> NetworkGraph:
    """Rebuild the network described by a checkpoint, every array restored bit-exactly."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    config, arrays = decode_checkpoint(buf)
    dtypes = {a.dtype for a in arrays.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
    net = build_network(config, seed=0, dtype=dtype)
    expected = {name: getattr(owner, attr).shape for name, owner, attr in net.named_arrays()}
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CheckpointShapeError(f"records do not match the config: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointShapeError(f"{name}: stored shape {arrays[name].shape}, config implies {shape}")
    for name, owner, attr in net.named_arrays():
        setattr(owner, attr, arrays[name])
    return net
