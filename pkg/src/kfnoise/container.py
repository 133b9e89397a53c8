"""Binary container: 4-byte magic, u64 header length, JSON header, f64 payload.

All numbers are little-endian. The JSON header is written with sorted keys
so identical content always produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


def dumps_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, magic: bytes, header: dict, payload: np.ndarray) -> None:
    blob = dumps_header(header)
    data = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(data)


def read_container(path, magic: bytes, error: type[Exception]) -> tuple[dict, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != magic:
        raise error(f"{path}: not a {magic.decode()} file")
    (length,) = struct.unpack("<Q", raw[4:12])
    if 12 + length > len(raw):
        raise error(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise error(f"{path}: corrupt header ({exc})") from None
    body = raw[12 + length :]
    if len(body) % 8:
        raise error(f"{path}: payload is not a whole number of float64 values")
    return header, np.frombuffer(body, dtype="<f8").astype(np.float64)
