import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from sceneqa import serialize
from sceneqa.serialize import IntegrityError

tensors = st.dictionaries(
    st.text(st.characters(min_codepoint=33, max_codepoint=0x2FF), min_size=1, max_size=12),
    st.one_of(
        arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4)),
        arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=4)),
        arrays(np.int64, array_shapes(min_dims=0, max_dims=3, max_side=4)),
    ),
    max_size=5,
)


class TestContainer:
    @given(tensors, st.dictionaries(st.text(max_size=5), st.integers(), max_size=3))
    def test_round_trip_bit_exact(self, data, meta):
        back, meta_back = serialize.loads(serialize.dumps(data, meta))
        assert set(back) == set(data)
        for k, v in data.items():
            assert back[k].dtype == v.dtype and back[k].shape == v.shape
            assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()
        assert meta_back == meta

    def test_file_round_trip(self, tmp_path):
        arr = np.arange(6, dtype=np.float64).reshape(2, 3)
        serialize.save(tmp_path / "x.ntc", {"w": arr}, {"step": 3})
        back, meta = serialize.load(tmp_path / "x.ntc")
        assert np.array_equal(back["w"], arr) and meta == {"step": 3}

    def test_truncation_detected(self):
        blob = serialize.dumps({"w": np.ones(10)})
        with pytest.raises(IntegrityError, match="length"):
            serialize.loads(blob[:-3])

    def test_corruption_detected(self):
        blob = bytearray(serialize.dumps({"w": np.ones(10)}))
        blob[-1] ^= 0xFF
        with pytest.raises(IntegrityError, match="checksum"):
            serialize.loads(bytes(blob))

    def test_bad_magic(self):
        with pytest.raises(IntegrityError):
            serialize.loads(b"XXXX" + b"\x00" * 60)

    def test_unknown_version(self):
        blob = bytearray(serialize.dumps({}))
        blob[4] = 9
        with pytest.raises(IntegrityError, match="version"):
            serialize.loads(bytes(blob))

    def test_unsupported_dtype(self):
        with pytest.raises(TypeError):
            serialize.dumps({"x": np.zeros(2, dtype=np.complex64)})
