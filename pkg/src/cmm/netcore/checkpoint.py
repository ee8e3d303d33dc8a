"""Versioned binary checkpoints.

Layout (all integers little-endian):

    8 bytes   magic  b"CMMCKPT\\0"
    uint32    format version
    uint32    layer count L
    uint32    feature dim
    uint32    header length in bytes
    header    UTF-8 JSON: architecture, config, module/parameter names and
              shapes in enumeration order, and a free-form ``extra`` block
    payload   every parameter array as little-endian float64, in header order
"""

import io
import json
import struct

import numpy as np

from ..errors import ParseError
from .model import ARCHITECTURES

MAGIC = b"CMMCKPT\0"
FORMAT_VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def checkpoint_bytes(model, extra=None):
    header = {
        "architecture": model.architecture,
        "config": _jsonable(model.config),
        "modules": [{"name": m, "params": [{"name": n, "shape": list(a.shape)} for n, a in b.items()]}
                    for m, b in model.modules.items()],
        "extra": _jsonable(extra or {}),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", FORMAT_VERSION, model.layer_count, model.feature_dim, len(hb)))
    buf.write(hb)
    for _, arr in model.parameters():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model, path, extra=None):
    data = checkpoint_bytes(model, extra)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def loads_checkpoint(data):
    """Parse checkpoint bytes into ``(model, extra)``."""
    if data[:8] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    version, layer_count, feature_dim, hlen = struct.unpack("<IIII", data[8:24])
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    header = json.loads(data[24:24 + hlen].decode("utf-8"))
    cls = ARCHITECTURES.get(header["architecture"])
    if cls is None:
        raise ParseError(f"unknown architecture {header['architecture']!r}")
    offset = 24 + hlen
    modules = {}
    for mod in header["modules"]:
        block = {}
        for p in mod["params"]:
            shape = tuple(p["shape"])
            n = int(np.prod(shape)) if shape else 1
            end = offset + 8 * n
            if end > len(data):
                raise ParseError("checkpoint payload truncated")
            block[p["name"]] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
            offset = end
        modules[mod["name"]] = block
    if offset != len(data):
        raise ParseError("trailing bytes after checkpoint payload")
    model = cls(modules, header["config"])
    if model.layer_count != layer_count or model.feature_dim != feature_dim:
        raise ParseError("checkpoint header disagrees with its config block")
    return model, header["extra"]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
