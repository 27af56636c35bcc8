import numpy as np
import pytest

from fast_st.autodiff import Tensor, no_grad
from fast_st.model import (
    EOS,
    N_SPECIAL,
    ST_TAG,
    ModelConfig,
    SpeechTranslator,
    average_states,
    ids_to_target,
    kept_mask_rows,
)

CFG = ModelConfig()


@pytest.fixture(scope="module")
def model():
    return SpeechTranslator(CFG, seed=0)


def frames(n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, CFG.d_in))


class TestSubsampler:
    def test_token_count(self, model):
        for n, tau in [(4, 1), (5, 2), (8, 2), (41, 11)]:
            assert model.speech_tokens(frames(n)).shape == (tau, CFG.d)

    def test_prefix_reuses_full_tokens(self, model):
        x = frames(40)
        full = model.speech_tokens(x)
        for n in range(4, 41, 4):
            np.testing.assert_allclose(model.speech_tokens(x[:n]), full[: n // 4], rtol=0, atol=1e-12)

    def test_token_depends_only_on_its_window(self, model):
        x = frames(16)
        y = x.copy()
        y[8:12] += 1.0
        a, b = model.speech_tokens(x), model.speech_tokens(y)
        np.testing.assert_allclose(a[[0, 1, 3]], b[[0, 1, 3]], rtol=0, atol=1e-12)
        assert not np.allclose(a[2], b[2])

    def test_too_short(self, model):
        with pytest.raises(ValueError):
            model.speech_tokens(frames(3))

    def test_batched_matches_single(self, model):
        x = np.stack([frames(12, 1), frames(12, 2)])
        with no_grad():
            batched = model.acoustic.conv_subsample(x).data
        np.testing.assert_allclose(batched[1], model.speech_tokens(x[1]), atol=1e-12)


class TestFai:
    @pytest.mark.parametrize("m,p,extra", [(50, 1.0, 0), (50, 0.8, 10), (20, 0.0, 20), (0, 1.0, 0), (3, 0.5, 2)])
    def test_kept_rows(self, model, m, p, extra):
        c = model.speech_tokens(frames(36))
        with no_grad():
            out = model.acoustic.encode_streaming_fai(c, m, p)
        assert out.shape == (9 + extra, CFG.d)
        assert kept_mask_rows(m, p) == extra

    def test_no_masks_equals_full_encoding(self, model):
        c = model.speech_tokens(frames(24))
        with no_grad():
            a = model.acoustic.encode_streaming_fai(c, 0).data
            b = model.acoustic.encode_full(c).data
        np.testing.assert_array_equal(a, b)

    def test_masks_change_real_rows(self, model):
        c = model.speech_tokens(frames(24))
        with no_grad():
            a = model.acoustic.encode_streaming_fai(c, 0).data
            b = model.acoustic.encode_streaming_fai(c, 5).data
        assert not np.allclose(a, b)

    def test_bad_arguments(self, model):
        c = model.speech_tokens(frames(8))
        with pytest.raises(ValueError):
            model.acoustic.encode_streaming_fai(c, -1)
        with pytest.raises(ValueError):
            model.acoustic.encode_streaming_fai(c, 2, 1.5)

    def test_mask_embedding_is_standard_normal_draw(self):
        emb = SpeechTranslator(ModelConfig(d=4096), seed=0).acoustic.mask_embedding.data
        assert abs(emb.mean()) < 0.1 and abs(emb.std() - 1.0) < 0.1


class TestEncodeAndDecode:
    def test_padding_does_not_leak(self, model):
        c = model.speech_tokens(frames(20))
        padded = np.concatenate([c, np.full((3, CFG.d), 7.0)])[None]
        with no_grad():
            a = model.acoustic.encode(Tensor(padded), lengths=[5]).data[0, :5]
            b = model.acoustic.encode_full(c).data
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_decoder_is_causal(self, model):
        mem = np.random.default_rng(0).normal(size=(4, CFG.d))
        with no_grad():
            full = model.decoder(np.array([[ST_TAG, 80, 90, 100]]), Tensor(mem[None])).data[0]
            short = model.decoder(np.array([[ST_TAG, 80]]), Tensor(mem[None])).data[0]
        np.testing.assert_allclose(full[:2], short, atol=1e-10)

    def test_greedy_decode_respects_vocabulary(self, model):
        h = np.random.default_rng(1).normal(size=(5, CFG.d))
        out = model.greedy_decode(h, max_len=8)
        assert len(out) <= 8
        assert all(i >= N_SPECIAL + CFG.src_vocab for i in out)
        assert EOS not in out

    def test_translate_returns_target_tokens(self, model):
        out = model.translate(frames(40), max_len=6)
        assert all(0 <= t < CFG.tgt_vocab for t in out)

    def test_ids_to_target(self):
        lo = N_SPECIAL + CFG.src_vocab
        assert ids_to_target([ST_TAG, 5, lo, lo + 3], CFG) == [0, 3]


class TestState:
    def test_average_states(self):
        avg = average_states([{"a": np.array([1.0])}, {"a": np.array([2.0])}, {"a": np.array([6.0])}])
        assert avg["a"][0] == pytest.approx(3.0)
        with pytest.raises(ValueError):
            average_states([])

    def test_seed_reproducible(self):
        a = SpeechTranslator(CFG, seed=5).state_dict()
        b = SpeechTranslator(CFG, seed=5).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_clone_is_independent(self, model):
        c = model.clone()
        c.acoustic.mask_embedding.data += 1.0
        assert not np.array_equal(c.acoustic.mask_embedding.data, model.acoustic.mask_embedding.data)

    def test_parameter_prefixes(self, model):
        roots = {k.split(".")[0] for k in model.state_dict()}
        assert roots == {"acoustic", "cif", "semantic", "decoder"}
