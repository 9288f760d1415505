import numpy as np
import pytest

from adadiff.acoustic import (
    AcousticModel, MixedDecoderConfig, PhonemeSeq, count_model_params, length_regulate, make_batch,
    positional_encoding,
)
from adadiff.autodiff import RngStream, Tensor, grad_check, no_grad, ops
from adadiff.corpus import split
from adadiff.diffusion import estimate_prior

from _cases import plain_ln_decode


def model_for(cfg, corpus, seed=0):
    train = split(corpus)["train"]
    prior = estimate_prior(((u.mel, u.frame_phonemes()) for u in train), cfg.vocab_size)
    return AcousticModel.create(cfg, corpus.train_speakers, prior, seed), train


@pytest.fixture(scope="module")
def k2(tiny_corpus):
    cfg, corpus = tiny_corpus
    return model_for(cfg.replace(dec_layers=2), corpus)


# -- small pieces ------------------------------------------------------------------------------

def test_phoneme_seq_validation():
    assert PhonemeSeq([1, 2], [2, 3]).n_frames == 5
    with pytest.raises(ValueError):
        PhonemeSeq([1, 2], [1, 0])
    with pytest.raises(ValueError):
        PhonemeSeq([1, 2], [1])


def test_length_regulate_by_definition():
    enc = np.array([[1.0, 2.0], [10.0, 20.0]])
    out = length_regulate(enc, [2, 3])
    np.testing.assert_array_equal(out, [[1, 1, 2, 2, 2], [10, 10, 20, 20, 20]])
    np.testing.assert_array_equal(length_regulate(enc, [1, 1]), enc)
    with pytest.raises(ValueError):
        length_regulate(enc, [1, 1, 1])


def test_length_regulate_conserves_frames(rng):
    for _ in range(20):
        P = int(rng.integers(1, 9))
        du = rng.integers(1, 6, size=P)
        assert length_regulate(rng.normal(size=(3, P)), du).shape == (3, du.sum())


def test_mixed_config():
    assert MixedDecoderConfig(0).cln_in_transformer is False
    assert MixedDecoderConfig(4, False).name == "K4-clnoff"
    with pytest.raises(ValueError):
        MixedDecoderConfig(5)


def test_make_batch_padding(tiny_corpus):
    utts = tiny_corpus[1].utterances[:3]
    b = make_batch(utts)
    assert b.lengths.tolist() == [u.n_frames for u in utts]
    for i, u in enumerate(utts):
        np.testing.assert_array_equal(b.mel[i, :, : u.n_frames], u.mel)
        assert not b.mel[i, :, u.n_frames:].any()
        np.testing.assert_array_equal(b.align[i].sum(0)[: u.n_frames], 1)


# -- encoder ----------------------------------------------------------------------------------

def test_encoder_shape_determinism_and_order_sensitivity(k2):
    model, _ = k2
    seq = PhonemeSeq([1, 4, 2, 7], [2, 2, 1, 3])
    a = model.encode_phonemes(seq)
    assert a.shape == (model.config.enc_dim, 4)
    assert a.tobytes() == model.encode_phonemes(seq).tobytes()
    swapped = model.encode_phonemes(PhonemeSeq([4, 1, 2, 7], [2, 2, 1, 3]))
    assert not np.allclose(a, swapped)


def test_unknown_phoneme_rejected(k2):
    model, _ = k2
    with pytest.raises(ValueError, match="vocabulary"):
        model.encode_phonemes(PhonemeSeq([model.config.vocab_size], [1]))


def test_unknown_speaker_rejected(k2):
    model, _ = k2
    with pytest.raises(KeyError):
        model.speaker_embedding([999])


# -- Transformer decoder -------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_transformer_cln_at_init_equals_layer_norm(k2, seed):
    model, _ = k2
    r = np.random.default_rng(seed)
    frames = Tensor(r.normal(size=(2, 7, model.config.enc_dim)).astype(np.float32))
    spk = Tensor(r.normal(size=(2, model.config.speaker_dim)).astype(np.float32))
    mask = np.ones((2, 1, 7), np.float32)
    mask[1, 0, 5:] = 0
    with no_grad():
        ours = model.transformer_decode(frames, spk, mask).data
        ref = plain_ln_decode(model, frames, mask).data
    assert ours.tobytes() == ref.tobytes()


def test_zero_weights_pass_frames_to_projection(tiny_corpus):
    cfg, corpus = tiny_corpus
    model, _ = model_for(cfg.replace(dec_layers=1), corpus)
    for n in model.params.names("decoder.layer0."):
        if ".cln" not in n:
            model.params[n].data[...] = 0
    r = np.random.default_rng(0)
    frames = Tensor(r.normal(size=(1, 6, cfg.enc_dim)).astype(np.float32))
    with no_grad():
        out = model.transformer_decode(frames, Tensor(np.zeros((1, cfg.speaker_dim), np.float32)),
                                       np.ones((1, 1, 6), np.float32)).data
        x = ops.add(frames, positional_encoding(6, cfg.enc_dim))
        x = ops.layer_norm(ops.layer_norm(x))
        ref = ops.affine(x, model.params["decoder.proj.w"], model.params["decoder.proj.b"]).data
    assert out.shape == (1, cfg.mel_bins, 6)
    np.testing.assert_allclose(out[0].T, ref[0], atol=1e-5)


def test_transformer_decode_needs_layers(tiny_corpus):
    cfg, corpus = tiny_corpus
    model, _ = model_for(cfg, corpus)
    with pytest.raises(ValueError, match="K >= 1"):
        model.transformer_decode(Tensor(np.zeros((1, 2, cfg.enc_dim))), Tensor(np.zeros((1, cfg.speaker_dim))),
                                 np.ones((1, 1, 2)))


@pytest.mark.parametrize("seed", range(3))
def test_one_layer_gradient(k2, seed):
    model, _ = k2
    r = np.random.default_rng(seed)
    m64 = AcousticModel(model.config.replace(dec_layers=1), model.params.astype(np.float64), model.speakers,
                        model.prior)
    names = m64.params.names("decoder.layer0.") + ["decoder.proj.w"]
    for n in names:
        if ".cln" in n:
            m64.params[n].data = m64.params[n].data + 0.3 * r.normal(size=m64.params[n].shape)
    frames = r.normal(size=(2, 5, m64.config.enc_dim))
    spk = r.normal(size=(2, m64.config.speaker_dim))
    mask = np.ones((2, 1, 5))
    mask[0, 0, 4] = 0
    probe = r.normal(size=(2, m64.config.mel_bins, 5))

    def fn(f, s, *ps):
        m = AcousticModel(m64.config, m64.params.substitute(dict(zip(names, ps))), m64.speakers, m64.prior)
        return ops.sum(ops.mul(m.transformer_decode(f, s, mask), probe))

    report = grad_check(fn, [frames, spk] + [m64.params[n].data for n in names], max_coords=4, seed=seed)
    assert report.max_rel_error < 1e-4


# -- whole model -------------------------------------------------------------------------------------

@pytest.mark.parametrize("K", range(5))
@pytest.mark.parametrize("cln", [True, False])
def test_parameter_count_matches_accounting(tiny_corpus, K, cln):
    cfg, corpus = tiny_corpus
    model, _ = model_for(cfg.replace(dec_layers=K, cln_in_denoiser=cln), corpus)
    total = sum(t.data.size for _, t in model.params.items())
    assert total == count_model_params(model.config, len(model.speakers))["total"]


def test_loss_is_finite_scalar_for_every_k(tiny_corpus):
    cfg, corpus = tiny_corpus
    for K in (0, 1, 4):
        model, train = model_for(cfg.replace(dec_layers=K), corpus)
        loss = model.loss(make_batch(train[:3]), RngStream(1))
        assert loss.data.shape == () and np.isfinite(loss.data)


def test_synthesize_deterministic_and_masked(k2):
    model, train = k2
    b = make_batch(train[:3])
    a = model.synthesize(b, 7)
    assert a.tobytes() == model.synthesize(b, 7).tobytes()
    assert a.tobytes() != model.synthesize(b, 8).tobytes()
    assert np.isfinite(a).all()
    assert not (a * (1 - b.frame_mask)).any()


def test_synthesize_one_checks_architecture(k2):
    model, train = k2
    u = train[0]
    seq = PhonemeSeq(u.phonemes, u.durations)
    out = model.synthesize_one(seq, u.speaker, MixedDecoderConfig(2, True), 3)
    assert out.shape == (model.config.mel_bins, u.n_frames)
    with pytest.raises(ValueError):
        model.synthesize_one(seq, u.speaker, MixedDecoderConfig(0, True), 3)


def test_add_speaker_uses_mean_row(k2):
    model, _ = k2
    m = model.copy()
    name = m.add_speaker(500)
    rows = np.stack([model.params[f"speaker.{s}"].data for s in model.speakers])
    np.testing.assert_allclose(m.params[name].data, rows.mean(0), rtol=1e-6)
    assert 500 not in model.speakers
    with pytest.raises(ValueError):
        m.add_speaker(500)


def test_coarse_mel_feeds_loss_gradient(k2):
    """Diffusion gradients reach the Transformer decoder through the coarse mel."""
    from adadiff.autodiff import Tape, backward
    model, train = k2
    with Tape():
        g = backward(model.loss(make_batch(train[:2]), RngStream(0)), model.params)
    assert np.any(g["decoder.proj.w"]) and np.any(g["postnet.cond_proj.w"])
