"""Single-file checkpoint container.

Layout (all offsets relative to the start of the binary section)::

    QROUTE-CKPT\\n
    <header length in bytes, decimal>\\n
    <header: UTF-8 JSON, sorted keys, no whitespace>\\n
    <array bytes, little-endian float64, concatenated in header order>

The header holds ``format_version``, a free-form ``meta`` object (config
echo, epoch, seed lineage, metrics history) and an ``arrays`` list of
``{"name", "shape", "offset"}`` records.  Writing is deterministic, so a
save/load/save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Any

import numpy as np

__all__ = ["FORMAT_VERSION", "CheckpointError", "dumps", "loads", "save", "load"]

FORMAT_VERSION = 1
MAGIC = b"QROUTE-CKPT\n"


class CheckpointError(ValueError):
    pass


def dumps(meta: dict[str, Any], arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    records = []
    blobs = []
    offset = 0
    for name, value in arrays.items():
        data = np.asarray(value, dtype="<f8")  # tobytes() is C order; keeps 0-d shapes
        records.append({"name": name, "offset": offset, "shape": list(data.shape)})
        raw = data.tobytes()
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"arrays": records, "format_version": FORMAT_VERSION, "meta": meta},
        sort_keys=True,
        separators=(",", ":"),
        allow_nan=True,
    ).encode("utf-8")
    return MAGIC + str(len(header)).encode() + b"\n" + header + b"\n" + b"".join(blobs)


def loads(blob: bytes) -> tuple[dict[str, Any], "OrderedDict[str, np.ndarray]"]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a qroute checkpoint (bad magic)")
    rest = blob[len(MAGIC):]
    try:
        size_text, rest = rest.split(b"\n", 1)
        size = int(size_text)
        header = json.loads(rest[:size].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {version} is not supported (expected {FORMAT_VERSION})"
        )
    body = rest[size + 1:]
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for rec in header["arrays"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = rec["offset"]
        end = start + 8 * count
        if end > len(body):
            raise CheckpointError(f"array {rec['name']!r} is truncated")
        arrays[rec["name"]] = np.frombuffer(body[start:end], dtype="<f8").reshape(shape).astype(np.float64)
    return header["meta"], arrays


def save(path: str | Path, meta: dict[str, Any], arrays) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(meta, arrays))
    tmp.replace(path)
    return path


def load(path: str | Path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    try:
        return loads(blob)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
