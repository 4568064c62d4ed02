"""Binary checkpoint format.

Layout: ``UWRV`` magic, uint32 version, uint64 manifest length, UTF-8 JSON
manifest, then every named tensor as little-endian float32 in manifest order.
All integers are little-endian.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, UniWRV

MAGIC = b"UWRV"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_LE32 = np.dtype("<f4")


def _config_diff(a, b):
    keys = sorted(set(a) | set(b))
    return [f"{k}: {a.get(k)!r} != {b.get(k)!r}" for k in keys if a.get(k) != b.get(k)]


def save_checkpoint(model, path, iteration=0, extra=None):
    tensors, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        buf = np.ascontiguousarray(p.data, dtype=_LE32).tobytes()
        tensors.append({"name": name, "shape": list(p.data.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = {
        "config": model.cfg.to_dict(),
        "iteration": int(iteration),
        "tensors": tensors,
        "usage": {str(b.layer): b.usage_counts.tolist() for b in model.banks()},
        "extra": extra or {},
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(text)))
        fh.write(text)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def read_checkpoint(path):
    """Parse and validate a checkpoint; returns (manifest, {name: float32 array})."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _HEADER.size + mlen
    if start > len(raw):
        raise CheckpointError(f"{path}: manifest length {mlen} runs past end of file")
    try:
        manifest = json.loads(raw[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest: {e}") from e

    payload = memoryview(raw)[start:]
    arrays, expected = {}, 0
    for t in manifest.get("tensors", []):
        name, shape = t["name"], tuple(t["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if t["nbytes"] != nbytes or t["offset"] != expected:
            raise CheckpointError(f"{path}: manifest entry for tensor {name!r} is inconsistent")
        if t["offset"] + nbytes > len(payload):
            raise CheckpointError(
                f"{path}: payload truncated in tensor {name!r} "
                f"(needs bytes {t['offset']}..{t['offset'] + nbytes}, payload has {len(payload)})")
        arrays[name] = np.frombuffer(payload[t["offset"]:t["offset"] + nbytes], dtype=_LE32).reshape(shape).copy()
        expected += nbytes
    if expected != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - expected} trailing payload bytes after last tensor")
    return manifest, arrays


def load_checkpoint(path, config=None, dtype=None):
    """Rebuild the model stored at ``path``.

    ``config`` (a ModelConfig or dict) must match the stored one apart from
    ``dtype``; a mismatch is refused with the differing keys.
    """
    manifest, arrays = read_checkpoint(path)
    stored = dict(manifest["config"])
    if config is not None:
        want = config.to_dict() if isinstance(config, ModelConfig) else dict(config)
        diff = _config_diff({k: v for k, v in stored.items() if k != "dtype"},
                            {k: v for k, v in want.items() if k != "dtype"})
        if diff:
            raise CheckpointError("checkpoint config does not match:\n  " + "\n  ".join(diff))
    if dtype is not None:
        stored["dtype"] = str(np.dtype(dtype))
    try:
        model = UniWRV(ModelConfig.from_dict(stored))
    except Exception as e:
        raise CheckpointError(f"{path}: manifest config rejected: {e}") from e

    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(arrays))
    unexpected = sorted(set(arrays) - set(params))
    if missing or unexpected:
        raise CheckpointError(f"{path}: tensor set mismatch; missing {missing}, unexpected {unexpected}")
    for name, p in params.items():
        a = arrays[name]
        if a.shape != p.data.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {a.shape}, model expects {p.data.shape}")
        p.data[...] = a
    for bank in model.banks():
        counts = manifest.get("usage", {}).get(str(bank.layer))
        if counts is not None:
            bank.usage_counts[...] = np.asarray(counts, dtype=np.int64)
    model.iteration = manifest.get("iteration", 0)
    return model
