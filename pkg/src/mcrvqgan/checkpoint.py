"""Versioned single-file checkpoints.

Layout::

    MAGIC (8 bytes) | version (u32 LE) | config hash (64 ascii hex)
    | index length (u64 LE) | JSON index | raw tensor bytes

The JSON index mirrors the saved state with every tensor/ndarray replaced by
a reference into the byte blob, so writing is deterministic and a
save -> load -> save round trip reproduces the file byte for byte.
"""

import json
import struct

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"MCRVQCKP"
VERSION = 1
_HEAD = struct.Struct("<8sI64sQ")


def _encode(obj, blobs):
    if torch.is_tensor(obj):
        arr = obj.detach().cpu().contiguous().numpy()
        blobs.append(arr.tobytes())
        return {"__tensor__": len(blobs) - 1, "dtype": str(arr.dtype), "shape": list(arr.shape)}
    if isinstance(obj, np.ndarray):
        arr = np.ascontiguousarray(obj)
        blobs.append(arr.tobytes())
        return {"__ndarray__": len(blobs) - 1, "dtype": str(arr.dtype), "shape": list(arr.shape)}
    if isinstance(obj, dict):
        return {"__dict__": [[_encode(k, blobs), _encode(v, blobs)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_encode(v, blobs) for v in obj]}
    if isinstance(obj, list):
        return [_encode(v, blobs) for v in obj]
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    if isinstance(obj, np.generic):
        return obj.item()
    raise CheckpointError(f"cannot serialize object of type {type(obj).__name__}")


def _decode(obj, blobs):
    if isinstance(obj, list):
        return [_decode(v, blobs) for v in obj]
    if not isinstance(obj, dict):
        return obj
    if "__dict__" in obj:
        return {_decode(k, blobs): _decode(v, blobs) for k, v in obj["__dict__"]}
    if "__tuple__" in obj:
        return tuple(_decode(v, blobs) for v in obj["__tuple__"])
    key = "__tensor__" if "__tensor__" in obj else "__ndarray__" if "__ndarray__" in obj else None
    if key is None:
        raise CheckpointError("corrupt checkpoint index")
    arr = np.frombuffer(blobs[obj[key]], dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()
    return torch.from_numpy(arr) if key == "__tensor__" else arr


def dumps(state, config_hash):
    blobs = []
    index = _encode(state, blobs)
    sizes = [len(b) for b in blobs]
    meta = json.dumps({"state": index, "sizes": sizes}, separators=(",", ":")).encode()
    head = _HEAD.pack(MAGIC, VERSION, config_hash.encode("ascii").ljust(64, b"0")[:64], len(meta))
    return head + meta + b"".join(blobs)


def loads(data, expected_hash=None):
    """Decode checkpoint bytes; returns ``(state, config_hash)``."""
    if len(data) < _HEAD.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, chash, meta_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    chash = chash.decode("ascii")
    if expected_hash is not None and chash != expected_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {chash[:12]}..., expected {expected_hash[:12]}..."
        )
    start = _HEAD.size
    try:
        meta = json.loads(data[start:start + meta_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint index: {exc}") from exc
    blobs, pos = [], start + meta_len
    for size in meta["sizes"]:
        blobs.append(data[pos:pos + size])
        pos += size
    if pos != len(data):
        raise CheckpointError("checkpoint payload length mismatch")
    return _decode(meta["state"], blobs), chash


def save_checkpoint(path, state, config_hash):
    data = dumps(state, config_hash)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def load_checkpoint(path, expected_hash=None):
    with open(path, "rb") as fh:
        return loads(fh.read(), expected_hash)
