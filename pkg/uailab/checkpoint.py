"""The UAIL1 checkpoint container.

Layout: the magic bytes ``UAIL1``, an unsigned little-endian 64-bit manifest
length, a UTF-8 JSON manifest, then every array as little-endian float64 in
manifest order. The manifest is ``{"meta": {...}, "params": [{"name",
"shape", "offset"}, ...]}`` where offsets count bytes from the start of the
payload.
"""

import json
import struct
from typing import Dict, Tuple

import numpy as np

from . import logger
from .utils import atomic_write

MAGIC = b"UAIL1"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def save(path: str, arrays: Dict[str, np.ndarray], meta: dict = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, a in arrays.items():
        blob = np.ascontiguousarray(a, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(a)), "offset": offset})
        blobs.append(blob)
        offset += len(blob)

    manifest = json.dumps(
        {"meta": meta or {}, "params": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")

    with atomic_write(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)
    logger.info('Checkpoint saved: "%s" (%d arrays)', path, len(entries))


def load(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        buf = f.read()

    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f'"{path}" is not a UAIL1 checkpoint.')
    start = len(MAGIC) + _LEN.size
    if len(buf) < start:
        raise CheckpointError(f'Truncated checkpoint header: "{path}"')
    (size,) = _LEN.unpack_from(buf, len(MAGIC))
    try:
        manifest = json.loads(buf[start : start + size].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f'Corrupted manifest in "{path}": {e}')

    payload = memoryview(buf)[start + size :]
    arrays = {}
    for e in manifest["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(payload):
            raise CheckpointError(f'Array "{e["name"]}" runs past the end of "{path}"')
        arrays[e["name"]] = (
            np.frombuffer(payload[e["offset"] : end], dtype="<f8")
            .astype(np.float64)
            .reshape(e["shape"])
        )
    return arrays, manifest["meta"]
