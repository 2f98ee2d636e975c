"""Binary checkpoint format "DATL": named float32 tensors plus a trailing
config hash that binds a checkpoint to the exact experiment configuration.

Layout (little-endian):
    magic   4 bytes  b"DATL"
    version u32      (currently 1)
    count   u32      number of tensors
    tensor  repeated: name_len u32, name UTF-8, ndim u32, dims u32[ndim],
                      payload float32[prod(dims)]
    hash    32 bytes sha256 of the canonical config JSON
"""

import struct

import numpy as np

MAGIC = b"DATL"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, tensors: dict, config_hash: bytes) -> None:
    if len(config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4", copy=False).tobytes())
        fh.write(config_hash)


def load_checkpoint(path, expected_hash: bytes = None) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = blob[off:off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a DATL checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        name_len, = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        ndim, = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(4 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    stored_hash = take(32)
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing junk after checkpoint")
    if expected_hash is not None and stored_hash != expected_hash:
        raise CheckpointError(
            f"{path}: config hash mismatch; checkpoint was trained under a different config")
    return tensors
