import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fast_st.checkpoint import CheckpointError, dumps, load, loads, save
from fast_st.model import ModelConfig, SpeechTranslator


class TestContainer:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a": rng.normal(size=(3, 4)), "b.c": rng.normal(size=7), "s": np.array(2.5)}
        save(tmp_path / "x.ckpt", tensors)
        back = load(tmp_path / "x.ckpt")
        assert set(back) == set(tensors)
        for k in tensors:
            assert back[k].shape == tensors[k].shape
            assert back[k].tobytes() == tensors[k].tobytes()

    def test_bytes_independent_of_insertion_order(self):
        a, b = np.ones(2), np.zeros(3)
        assert dumps({"a": a, "b": b}) == dumps({"b": b, "a": a})

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            loads(b"NOTACKPT" + bytes(8))

    def test_bad_version(self):
        blob = bytearray(dumps({"a": np.ones(1)}))
        blob[8] = 99
        with pytest.raises(CheckpointError, match="version"):
            loads(bytes(blob))

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointError):
            loads(dumps({"a": np.ones(1)}) + b"\0")

    def test_no_temp_files_left(self, tmp_path):
        save(tmp_path / "y.ckpt", {"a": np.ones(2)})
        assert [p.name for p in tmp_path.iterdir()] == ["y.ckpt"]

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(allow_nan=False), min_size=0, max_size=20), st.text(min_size=1, max_size=12))
    def test_roundtrip_property(self, values, name):
        arr = np.array(values, dtype=np.float64)
        back = loads(dumps({name: arr}))[name]
        assert back.tobytes() == arr.tobytes()


class TestModelState:
    def test_model_roundtrip(self, tmp_path):
        m = SpeechTranslator(ModelConfig(), seed=3)
        save(tmp_path / "m.ckpt", m.state_dict())
        other = SpeechTranslator(ModelConfig(), seed=4)
        other.load_state_dict(load(tmp_path / "m.ckpt"))
        for k, v in m.state_dict().items():
            assert np.array_equal(v, other.state_dict()[k])

    def test_missing_key(self):
        m = SpeechTranslator(ModelConfig(), seed=0)
        state = m.state_dict()
        state.pop(next(iter(state)))
        with pytest.raises(KeyError):
            m.load_state_dict(state)

    def test_shape_mismatch(self):
        m = SpeechTranslator(ModelConfig(), seed=0)
        state = m.state_dict()
        key = "acoustic.mask_embedding"
        state[key] = np.zeros(3)
        with pytest.raises(ValueError):
            m.load_state_dict(state)
