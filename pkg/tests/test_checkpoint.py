import struct

import numpy as np
from numpy.testing import assert_array_equal
import pytest

from db.checkpoint import (
    MAGIC,
    content_hash,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_descriptor,
    load_module_state,
    save_checkpoint,
    save_module,
)
from shared.errors import CheckpointError
from shared.nn import Linear


def sample_tensors(rng) -> dict[str, np.ndarray]:
    return {
        "encoder.weight": rng.standard_normal((3, 4)),
        "encoder.bias": rng.standard_normal(4),
        "scale": np.array(2.5),
        "empty": np.zeros((0, 3)),
    }


class TestCodec:
    def test_bit_exact(self, rng):
        tensors = sample_tensors(rng)
        decoded = decode_checkpoint(encode_checkpoint(tensors))
        assert list(decoded) == list(tensors)
        for name, value in tensors.items():
            assert decoded[name].shape == value.shape
            assert decoded[name].tobytes() == value.astype("<f8").tobytes()

    def test_header_layout(self):
        data = encode_checkpoint({})
        assert data == MAGIC + struct.pack("<II", 1, 0)
        assert decode_checkpoint(data) == {}

    def test_special_values_survive(self):
        values = np.array([np.inf, -np.inf, -0.0, 5e-324])
        assert_array_equal(decode_checkpoint(encode_checkpoint({"v": values}))["v"], values)

    def test_bad_magic(self):
        data = bytearray(encode_checkpoint({"a": np.ones(2)}))
        data[:4] = b"XXXX"
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(bytes(data))

    def test_unsupported_version(self):
        data = bytearray(encode_checkpoint({}))
        data[4:8] = struct.pack("<I", 2)
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(bytes(data))

    def test_truncated(self):
        data = encode_checkpoint({"a": np.ones(4)})
        for cut in (3, 12, len(data) - 1):
            with pytest.raises(CheckpointError):
                decode_checkpoint(data[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(encode_checkpoint({"a": np.ones(1)}) + b"\0")

    def test_duplicate_names(self):
        one = encode_checkpoint({"a": np.ones(1)})
        body = one[12:]
        data = MAGIC + struct.pack("<II", 1, 2) + body + body
        with pytest.raises(CheckpointError, match="duplicate"):
            decode_checkpoint(data)

    def test_complex_rejected(self):
        with pytest.raises(CheckpointError):
            encode_checkpoint({"z": np.ones(2, dtype=complex)})


class TestFiles:
    def test_save_and_load(self, tmp_path, rng):
        tensors = sample_tensors(rng)
        path = save_checkpoint(tensors, tmp_path / "nested" / "model.mgmw", {"kind": "test", "width": 4})
        loaded = load_checkpoint(path)
        assert_array_equal(loaded["encoder.weight"], tensors["encoder.weight"])
        assert load_descriptor(path) == {"kind": "test", "width": 4}

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(tmp_path / "absent.mgmw")

    def test_missing_descriptor(self, tmp_path):
        path = save_checkpoint({"a": np.ones(1)}, tmp_path / "bare.mgmw")
        with pytest.raises(CheckpointError, match="descriptor"):
            load_descriptor(path)

    def test_content_hash_tracks_bytes(self, tmp_path):
        a = save_checkpoint({"a": np.ones(2)}, tmp_path / "a.mgmw")
        b = save_checkpoint({"a": np.ones(2)}, tmp_path / "b.mgmw")
        c = save_checkpoint({"a": np.zeros(2)}, tmp_path / "c.mgmw")
        assert content_hash(a) == content_hash(b) != content_hash(c)
        assert len(content_hash(a)) == 40

    def test_module_round_trip(self, tmp_path):
        source = Linear(3, 2, np.random.default_rng(0))
        target = Linear(3, 2, np.random.default_rng(1))
        path = save_module(source, tmp_path / "linear.mgmw", {"in": 3, "out": 2})
        descriptor, state = load_module_state(path)
        target.load_state_dict(state)
        assert descriptor == {"in": 3, "out": 2}
        for key, value in source.state_dict().items():
            assert_array_equal(target.state_dict()[key], value)
