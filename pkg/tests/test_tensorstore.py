import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from core.errors import CheckpointError, DatasetError, TensorFormatError
from core.tensorstore import (
    IGNORE,
    MAGIC,
    DomainDatasetDescriptor,
    ParamStore,
    decode_tensor,
    encode_tensor,
    load_checkpoint,
    load_descriptor,
    read_tensor,
    save_checkpoint,
    save_descriptor,
    write_tensor,
)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(
    dtype=st.sampled_from([np.float32, np.int32]),
    shape=hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
))
def test_decode_inverts_encode_bitwise(arr):
    out, end = decode_tensor(encode_tensor(arr))
    assert end == len(encode_tensor(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


def test_file_round_trip_from_torch(tmp_path):
    t = torch.arange(12, dtype=torch.float32).reshape(3, 4) / 7
    write_tensor(t, tmp_path / "t.gt")
    np.testing.assert_array_equal(read_tensor(tmp_path / "t.gt"), t.numpy())


def test_scalar_is_stored_as_length_one():
    out, _ = decode_tensor(encode_tensor(np.float32(2.5)))
    assert out.shape == (1,)
    assert out[0] == np.float32(2.5)


def test_header_layout():
    raw = encode_tensor(np.zeros((2, 3), dtype=np.int32))
    magic, version, code, ndim = struct.unpack_from("<4sIII", raw)
    assert (magic, version, code, ndim) == (MAGIC, 1, 2, 2)
    assert struct.unpack_from("<2I", raw, 16) == (2, 3)
    assert len(raw) == 16 + 8 + 6 * 4


def test_rejects_unsupported_dtype_and_rank():
    with pytest.raises(TensorFormatError, match="unsupported dtype"):
        encode_tensor(np.zeros(3, dtype=np.float64))
    with pytest.raises(TensorFormatError):
        encode_tensor(np.zeros((1, 1, 1, 1, 1), dtype=np.float32))


def test_bad_magic():
    raw = bytearray(encode_tensor(np.ones(2, dtype=np.float32)))
    raw[:4] = b"XXXX"
    with pytest.raises(TensorFormatError, match="bad magic"):
        decode_tensor(bytes(raw))


def test_truncation():
    raw = encode_tensor(np.ones(4, dtype=np.float32))
    with pytest.raises(TensorFormatError, match="truncated header"):
        decode_tensor(raw[:10])
    with pytest.raises(TensorFormatError, match="truncated payload"):
        decode_tensor(raw[:-1])


def test_dims_overflow():
    raw = struct.pack("<4sIII", MAGIC, 1, 1, 5) + struct.pack("<5I", 1, 1, 1, 1, 1)
    with pytest.raises(TensorFormatError, match="dims overflow"):
        decode_tensor(raw)
    huge = struct.pack("<4sIII", MAGIC, 1, 1, 2) + struct.pack("<2I", 2**31, 2**31)
    with pytest.raises(TensorFormatError, match="dims overflow"):
        decode_tensor(huge)


def _store():
    rng = np.random.default_rng(0)
    tensors = {
        "core.0.w": rng.normal(size=(3, 3)).astype(np.float32),
        "head.w": rng.normal(size=(2,)).astype(np.float32),
        "bn.count": np.array([4], dtype=np.int32),
    }
    optim = {"optim.head.w.exp_avg": np.ones(2, dtype=np.float32)}
    return ParamStore(tensors=tensors, frozen=frozenset({"core.0.w"}), optimizer=optim)


def test_checkpoint_round_trip(tmp_path):
    store = _store()
    save_checkpoint(store, {"config_digest": "abc"}, tmp_path / "a.ckpt")
    loaded = load_checkpoint(tmp_path / "a.ckpt", config_digest="abc", strict=True)
    assert loaded.equals(store)
    assert loaded.manifest["frozen"] == ["core.0.w"]
    assert loaded.manifest["trainable"] == ["bn.count", "head.w"]


def test_checkpoint_is_byte_stable(tmp_path):
    save_checkpoint(_store(), {"seed": 1}, tmp_path / "a.ckpt")
    save_checkpoint(_store(), {"seed": 1}, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_missing_parameter_is_named(tmp_path):
    save_checkpoint(_store(), {}, tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError, match="missing parameter 'extra.w'"):
        load_checkpoint(tmp_path / "a.ckpt", expected_names=["head.w", "extra.w"])


def test_digest_mismatch_only_in_strict_mode(tmp_path):
    save_checkpoint(_store(), {"config_digest": "abc"}, tmp_path / "a.ckpt")
    load_checkpoint(tmp_path / "a.ckpt", config_digest="other")
    with pytest.raises(CheckpointError, match="digest mismatch"):
        load_checkpoint(tmp_path / "a.ckpt", config_digest="other", strict=True)


def test_optimizer_state_for_frozen_tensor_is_rejected(tmp_path):
    store = _store()
    store.optimizer["optim.core.0.w.exp_avg"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(CheckpointError, match="frozen"):
        save_checkpoint(store, {}, tmp_path / "a.ckpt")


def _descriptor(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    write_tensor(np.zeros((2, 3, 4), dtype=np.float32), tmp_path / "images" / "0000.gt")
    write_tensor(np.ones((3, 4), dtype=np.int32), tmp_path / "masks" / "0000.gt")
    return DomainDatasetDescriptor(
        domain="target", class_count=2, channel_count=2,
        image_paths=["images/0000.gt"], mask_paths=["masks/0000.gt"], shapes=[(3, 4)],
        labeled_budget=[(0, 5, 1)], root=tmp_path,
    )


def test_descriptor_round_trip_and_budget_mask(tmp_path):
    save_descriptor(_descriptor(tmp_path), tmp_path)
    desc = load_descriptor(tmp_path)
    assert desc.load_image(0).shape == (2, 3, 4)
    bm = desc.budget_mask(0)
    assert bm[1, 1] == 1
    assert (bm == IGNORE).sum() == 11


def test_descriptor_rejects_out_of_range_budget(tmp_path):
    desc = _descriptor(tmp_path)
    desc.labeled_budget = [(0, 12, 1)]
    with pytest.raises(DatasetError, match="out of range"):
        desc.validate()
    desc.labeled_budget = [(0, 1, 2)]
    with pytest.raises(DatasetError, match="class id"):
        desc.validate()


@pytest.mark.parametrize("manifest", [b"{not json", b"\xff\xfe\xfd", b"[1, 2]"])
def test_corrupt_manifest_is_a_checkpoint_error(tmp_path, manifest):
    save_checkpoint(_store(), {}, tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    start = raw.rindex(b'{"frozen"')
    assert struct.unpack_from("<I", raw, start - 4)[0] == len(raw) - start
    bad = raw[:start - 4] + struct.pack("<I", len(manifest)) + manifest
    (tmp_path / "b.ckpt").write_bytes(bad)
    with pytest.raises(CheckpointError, match="corrupt checkpoint manifest"):
        load_checkpoint(tmp_path / "b.ckpt")
