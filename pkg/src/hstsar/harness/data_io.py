"""Token-id datasets on disk: length-prefixed binary records plus a JSON sidecar.

Each record is ``<u4 length> <i4 label> <i4 ids[length]>`` in little-endian
order. Trailing PAD tokens are stripped on write and restored on read from
the sidecar's ``pad_to``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ParseError, SchemaError
from ..hst import PAD_ID
from .tasks import Dataset

FORMAT = "hstsar.tokens/1"
_HEADER = struct.Struct("<Ii")


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_dataset(path, ds, meta=None):
    """Write ``ds`` to ``path`` and its schema to ``path + '.json'``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = np.asarray(ds.ids)
    with open(path, "wb") as fh:
        for row, label in zip(ids, ds.labels):
            nz = np.flatnonzero(row != PAD_ID)
            length = int(nz[-1]) + 1 if len(nz) else 0
            fh.write(_HEADER.pack(length, int(label)))
            fh.write(row[:length].astype("<i4").tobytes())
    doc = {
        "format": FORMAT,
        "record": "<u4 length><i4 label><i4 ids[length]>",
        "byte_order": "little",
        "count": int(len(ds)),
        "pad_to": int(ids.shape[1]),
        "pad_id": PAD_ID,
        "meta": meta or {},
    }
    sidecar_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(path):
    """Inverse of :func:`write_dataset`; returns ``(Dataset, sidecar dict)``."""
    path = Path(path)
    try:
        doc = json.loads(sidecar_path(path).read_text())
    except FileNotFoundError:
        raise SchemaError(f"missing sidecar {sidecar_path(path)}") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"sidecar is not JSON: {e.msg}", f"line {e.lineno}") from None
    if doc.get("format") != FORMAT:
        raise SchemaError(f"unsupported token format {doc.get('format')!r}")
    for key in ("count", "pad_to"):
        if not isinstance(doc.get(key), int) or doc[key] < 0:
            raise ParseError(f"sidecar field {key!r} must be a non-negative integer", key)
    count, pad_to = doc["count"], doc["pad_to"]

    raw = path.read_bytes()
    ids = np.full((count, pad_to), doc.get("pad_id", PAD_ID), dtype=np.int64)
    labels = np.zeros(count, dtype=np.int64)
    off = 0
    for i in range(count):
        if off + _HEADER.size > len(raw):
            raise ParseError("file ends inside a record header", f"record {i}")
        length, label = _HEADER.unpack_from(raw, off)
        off += _HEADER.size
        if length > pad_to:
            raise ParseError(f"record length {length} exceeds pad_to {pad_to}", f"record {i}")
        end = off + 4 * length
        if end > len(raw):
            raise ParseError("file ends inside a record body", f"record {i}")
        ids[i, :length] = np.frombuffer(raw, dtype="<i4", count=length, offset=off)
        labels[i] = label
        off = end
    if off != len(raw):
        raise ParseError(f"{len(raw) - off} trailing bytes after {count} records", f"record {count}")
    return Dataset(ids, labels), doc
