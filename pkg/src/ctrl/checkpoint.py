"""Binary checkpoint format with bit-exact round trips.

Layout:

    8 bytes   magic  b"CTRLCKP1"
    8 bytes   header length (uint64 little-endian)
    header    canonical JSON: format version, schema hash, config snapshot,
              sorted manifests of parameter / buffer / optimizer blobs,
              sha256 of the payload
    payload   the blobs, concatenated in manifest order, each raw float64
              little-endian

Loading verifies the magic, version, payload length, and payload digest, and
refuses a schema-hash mismatch when the caller states an expectation.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import CheckpointError
from .params import ParamStore

MAGIC = b"CTRLCKP1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    schema_hash: str
    config: dict
    params: dict  # name -> float64 array
    buffers: dict
    optimizer: dict
    extra: dict


def _manifest_and_payload(arrays: dict):
    manifest = []
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float64))
        blob = arr.astype("<f8", copy=False).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "bytes": len(blob)})
        chunks.append(blob)
    return manifest, b"".join(chunks)


def save_checkpoint(path, store: ParamStore, schema_hash: str, config: dict,
                    optimizer: dict = None, extra: dict = None) -> None:
    params, buffers = store.export_arrays()
    p_manifest, p_payload = _manifest_and_payload(params)
    b_manifest, b_payload = _manifest_and_payload(buffers)
    o_manifest, o_payload = _manifest_and_payload(optimizer or {})
    payload = p_payload + b_payload + o_payload
    header = {
        "version": FORMAT_VERSION,
        "schema_hash": schema_hash,
        "config": config,
        "params": p_manifest,
        "buffers": b_manifest,
        "optimizer": o_manifest,
        "extra": extra or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def _read_section(manifest, payload: bytes, offset: int):
    out = {}
    for entry in manifest:
        n = entry["bytes"]
        chunk = payload[offset:offset + n]
        if len(chunk) != n:
            raise CheckpointError(f"truncated blob for '{entry['name']}'")
        arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64)
        out[entry["name"]] = arr.reshape(entry["shape"])
        offset += n
    return out, offset


def load_checkpoint(path, expect_schema_hash: str = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    header_start = len(MAGIC) + 8
    header_bytes = raw[header_start:header_start + header_len]
    if len(header_bytes) != header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version "
                              f"{header.get('version')}")
    if expect_schema_hash is not None and header["schema_hash"] != expect_schema_hash:
        raise CheckpointError(
            f"{path}: schema hash mismatch (checkpoint "
            f"{header['schema_hash'][:12]}..., expected "
            f"{expect_schema_hash[:12]}...); refusing to load")
    payload = raw[header_start + header_len:]
    expected = sum(e["bytes"] for e in
                   header["params"] + header["buffers"] + header["optimizer"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, "
                              f"manifest expects {expected}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload digest mismatch (corrupt blob)")
    params, offset = _read_section(header["params"], payload, 0)
    buffers, offset = _read_section(header["buffers"], payload, offset)
    optimizer, _ = _read_section(header["optimizer"], payload, offset)
    return Checkpoint(version=header["version"], schema_hash=header["schema_hash"],
                      config=header["config"], params=params, buffers=buffers,
                      optimizer=optimizer, extra=header.get("extra", {}))


def restore_into(store: ParamStore, ckpt: Checkpoint, prefix: str = "") -> int:
    """Copy checkpoint tensors whose names start with `prefix` into matching
    store entries. Returns the number of tensors restored."""
    params = {k: v for k, v in ckpt.params.items()
              if k.startswith(prefix) and k in store}
    known_buffers = set(store.buffer_names())
    buffers = {k: v for k, v in ckpt.buffers.items()
               if k.startswith(prefix) and k in known_buffers}
    store.load_arrays(params, buffers)
    return len(params) + len(buffers)
