import hashlib
import json
import struct

import numpy as np
import pytest

from ctrl.checkpoint import (FORMAT_VERSION, MAGIC, load_checkpoint,
                             restore_into, save_checkpoint)
from ctrl.exceptions import CheckpointError, UsageError
from ctrl.params import ParamStore


def _store():
    store = ParamStore()
    rng = np.random.default_rng(0)
    store.add("collab.emb.w", rng.normal(size=(5, 3)))
    store.add("collab.out.b", rng.normal(size=4))
    store.add("text.tok_emb", rng.normal(size=(7, 2)))
    store.add_buffer("collab.bn.running_mean", rng.normal(size=4))
    return store


def test_round_trip_is_bit_exact(tmp_path):
    store = _store()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, store, schema_hash="abc123",
                    config={"seed": 1, "lr": 0.5},
                    optimizer={"step": np.array(3.0),
                               "m.collab.emb.w": np.zeros((5, 3))},
                    extra={"epoch": 2})
    ckpt = load_checkpoint(path)
    assert ckpt.version == FORMAT_VERSION
    assert ckpt.schema_hash == "abc123"
    assert ckpt.config == {"seed": 1, "lr": 0.5}
    assert ckpt.extra == {"epoch": 2}
    for name in store.names():
        assert np.array_equal(ckpt.params[name], store[name].data)
    assert np.array_equal(ckpt.buffers["collab.bn.running_mean"],
                          store.buffer("collab.bn.running_mean"))
    assert ckpt.optimizer["step"] == 3.0

    # loading into an identical topology and saving again gives identical bytes
    other = _store()
    other.load_arrays(ckpt.params, ckpt.buffers)
    path2 = tmp_path / "b.ckpt"
    save_checkpoint(path2, other, schema_hash="abc123",
                    config={"seed": 1, "lr": 0.5},
                    optimizer={"step": np.array(3.0),
                               "m.collab.emb.w": np.zeros((5, 3))},
                    extra={"epoch": 2})
    assert path.read_bytes() == path2.read_bytes()


def test_rejects_non_checkpoint_and_missing(tmp_path):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"CSV,not,a,checkpoint")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(junk)
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_rejects_truncated_header(tmp_path):
    store = _store()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, store, schema_hash="h", config={})
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(path.read_bytes()[:len(MAGIC) + 8 + 10])
    with pytest.raises(CheckpointError, match="truncated header"):
        load_checkpoint(cut)


def test_rejects_corrupt_header_json(tmp_path):
    body = b"{this is not json"
    path = tmp_path / "bad.ckpt"
    path.write_bytes(MAGIC + struct.pack("<Q", len(body)) + body)
    with pytest.raises(CheckpointError, match="corrupt header"):
        load_checkpoint(path)


def _raw_with_version(version: int) -> bytes:
    header = {"version": version, "schema_hash": "h", "config": {},
              "params": [], "buffers": [], "optimizer": [], "extra": {},
              "payload_sha256": hashlib.sha256(b"").hexdigest()}
    body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(body)) + body


def test_rejects_unknown_version(tmp_path):
    path = tmp_path / "v99.ckpt"
    path.write_bytes(_raw_with_version(99))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    ok = tmp_path / "v1.ckpt"
    ok.write_bytes(_raw_with_version(FORMAT_VERSION))
    assert load_checkpoint(ok).params == {}


def test_rejects_payload_corruption(tmp_path):
    store = _store()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, store, schema_hash="h", config={})
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    flipped = tmp_path / "flipped.ckpt"
    flipped.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="digest mismatch"):
        load_checkpoint(flipped)

    longer = tmp_path / "longer.ckpt"
    longer.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="manifest expects"):
        load_checkpoint(longer)


def test_schema_hash_gate(tmp_path):
    store = _store()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, store, schema_hash="expected-hash", config={})
    assert load_checkpoint(path, expect_schema_hash="expected-hash")
    assert load_checkpoint(path)  # no expectation stated
    with pytest.raises(CheckpointError, match="refusing to load"):
        load_checkpoint(path, expect_schema_hash="some-other-hash")


def test_restore_into_prefix_filter(tmp_path):
    store = _store()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, store, schema_hash="h", config={})
    ckpt = load_checkpoint(path)

    target = ParamStore()
    target.add("collab.emb.w", np.zeros((5, 3)))
    target.add("collab.out.b", np.zeros(4))
    target.add("unrelated.w", np.zeros(2))
    target.add_buffer("collab.bn.running_mean", np.zeros(4))
    n = restore_into(target, ckpt, prefix="collab.")
    assert n == 3
    assert np.array_equal(target["collab.emb.w"].data, store["collab.emb.w"].data)
    assert np.array_equal(target.buffer("collab.bn.running_mean"),
                          store.buffer("collab.bn.running_mean"))
    assert np.array_equal(target["unrelated.w"].data, np.zeros(2))


def test_restore_shape_mismatch_raises(tmp_path):
    store = _store()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, store, schema_hash="h", config={})
    ckpt = load_checkpoint(path)
    target = ParamStore()
    target.add("collab.emb.w", np.zeros((2, 2)))
    with pytest.raises(UsageError, match="shape"):
        restore_into(target, ckpt, prefix="collab.")
