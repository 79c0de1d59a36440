"""Weight files: magic line, one-line JSON header, raw little-endian f32 blobs."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"DWSNET1\n"


class WeightFormatError(ValueError):
    pass


def save_weights(path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    names = list(state)
    header = {
        "params": [
            {"name": k, "shape": list(np.shape(state[k])), "dtype": "f32"} for k in names
        ],
        "meta": meta or {},
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(line)
        for k in names:
            fh.write(np.asarray(state[k], dtype="<f4").tobytes(order="C"))


def load_weights(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise WeightFormatError(f"{path}: bad magic {raw[:8]!r}")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise WeightFormatError(f"{path}: unterminated header")
    header = json.loads(raw[len(MAGIC):end])
    offset = end + 1
    state: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        if entry.get("dtype") != "f32":
            raise WeightFormatError(f"{path}: unsupported dtype {entry.get('dtype')}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise WeightFormatError(f"{path}: truncated blob for {entry['name']}")
        state[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(raw):
        raise WeightFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return state, header.get("meta", {})


def architecture_hash(state: dict[str, np.ndarray], config: dict | None = None) -> str:
    """Hash of parameter names/shapes plus config; independent of values."""
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(f"{k}:{tuple(np.shape(state[k]))};".encode())
    if config:
        h.update(json.dumps(config, sort_keys=True).encode())
    return h.hexdigest()[:16]
