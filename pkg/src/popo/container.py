"""Binary container shared by dataset files and network checkpoints.

Layout: magic ``POPO`` (4 bytes) | format version u32 LE | header length u32 LE |
UTF-8 JSON header | payload bytes. The payload's meaning (and its expected
length) is up to the caller.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

from popo.errors import BadMagicError, SchemaError, TruncatedFileError

MAGIC = b"POPO"
VERSION = 1

_PREFIX = struct.Struct("<4sII")


def write_container(path: str | Path, header: dict, payload: bytes) -> None:
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def read_container(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise TruncatedFileError(
            f"{path}: file has {len(raw)} bytes, shorter than the {_PREFIX.size}-byte prefix"
        )
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise SchemaError(f"{path}: unsupported format version {version}, expected {VERSION}")
    header_end = _PREFIX.size + header_len
    if len(raw) < header_end:
        raise TruncatedFileError(
            f"{path}: header claims {header_len} bytes but only "
            f"{len(raw) - _PREFIX.size} follow the prefix"
        )
    try:
        header = json.loads(raw[_PREFIX.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise SchemaError(f"{path}: header must be a JSON object, got {type(header).__name__}")
    return header, raw[header_end:]
