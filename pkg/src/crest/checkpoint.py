"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"CRESTCKP"
    8       4     format version (uint32)
    12      4     header length H in bytes (uint32)
    16      H     UTF-8 JSON header
    16+H    ...   parameter payload: float32 little-endian arrays, row-major,
                  concatenated in header order

The header holds ``kind`` (model class), ``config``, ``tokenizer`` (vocab
and labels), ``vocab_hash`` (sha256 of the vocabulary, one token per line),
``params`` (list of ``{name, shape}``), ``payload_bytes`` and ``crc32`` of
the payload.  Loading checks magic, version, payload length, checksum and,
when a tokenizer is supplied, the vocabulary hash.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .corpus import Tokenizer

MAGIC = b"CRESTCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path, tokenizer: Tokenizer, extra: Optional[dict] = None) -> None:
    names = list(model.params)
    arrays = [np.ascontiguousarray(model.params[k].data, dtype="<f4") for k in names]
    payload = b"".join(a.tobytes() for a in arrays)
    header = {
        "kind": model.kind,
        "config": model.config,
        "tokenizer": tokenizer.to_json(),
        "vocab_hash": tokenizer.vocab_hash,
        "params": [{"name": k, "shape": list(a.shape)} for k, a in zip(names, arrays)],
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def read_checkpoint(path, tokenizer: Optional[Tokenizer] = None):
    """Parse and validate a checkpoint; returns ``(header, {name: array})``."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated preamble)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    if len(blob) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = blob[16 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    if tokenizer is not None and tokenizer.vocab_hash != header["vocab_hash"]:
        raise CheckpointError(f"{path}: vocabulary hash mismatch "
                              f"(checkpoint {header['vocab_hash'][:12]}, tokenizer {tokenizer.vocab_hash[:12]})")
    arrays = {}
    off = 0
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float32)
        off += 4 * count
    return header, arrays


def load_checkpoint(path, tokenizer: Optional[Tokenizer] = None):
    """Rebuild the model stored at ``path``; returns ``(model, tokenizer)``."""
    from .editor import EditorModel
    from .rationalizer import RationalizerModel

    header, arrays = read_checkpoint(path, tokenizer)
    tok = tokenizer or Tokenizer.from_json(header["tokenizer"])
    kinds = {RationalizerModel.kind: RationalizerModel, EditorModel.kind: EditorModel}
    if header["kind"] not in kinds:
        raise CheckpointError(f"{path}: unknown model kind {header['kind']!r}")
    model = kinds[header["kind"]].from_config(header["config"])
    model.load_state(arrays)
    return model, tok
