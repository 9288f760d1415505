import numpy as np
import pytest

from adadiff.autodiff import RngStream, stream_id
from adadiff.corpus import MEL_CLIP, gen_corpus, load_corpus, save_corpus, split


def small(seed=7, **kw):
    return gen_corpus(4, 3, 5, seed=seed, n_heldout=2, n_adapt=2, n_test=3, **kw)


def fingerprint(c):
    return [(u.id, u.speaker, u.split, u.phonemes.tobytes(), u.durations.tobytes(), u.mel.tobytes())
            for u in c.utterances]


def test_same_seed_bit_identical_and_seeds_differ():
    assert fingerprint(small()) == fingerprint(small())
    assert fingerprint(small()) != fingerprint(small(seed=8))


def test_default_desk_sizes(default_corpus):
    _, c, views = default_corpus
    assert len(c.train_speakers) == 12 and len(c.heldout_speakers) == 3
    assert len(views["train"]) == 12 * 20
    for s in c.heldout_speakers:
        assert len(c.select("adapt", s)) == 10 and len(c.select("test", s)) == 10


def test_mel_regenerates_from_formula(default_corpus):
    _, c, _ = default_corpus
    root = RngStream(c.seed, stream_id("corpus"))
    for u in c.utterances[::37]:
        spk = c.speaker(u.speaker)
        noise = root.spawn("noise", u.id)
        env = np.stack([c.phonemes[p].envelope for p in np.repeat(u.phonemes, u.durations)], axis=1)
        n = noise.normal(env.shape, np.float64)
        j = noise.normal((env.shape[1],), np.float64)
        ref = np.clip(spk.gain[:, None] * env * (1 + spk.jitter * j) + spk.tilt[:, None] + c.config.noise_sigma * n,
                      -4, 4).astype(np.float32)
        assert ref.tobytes() == u.mel.tobytes()


def test_split_views(default_corpus):
    _, c, views = default_corpus
    train_spk = {u.speaker for u in views["train"]}
    assert not train_spk & {u.speaker for u in views["adapt"] + views["test"]}
    per_spk = [[(u.phonemes.tolist(), u.durations.tolist()) for u in c.select("test", s)]
               for s in c.heldout_speakers]
    assert all(t == per_spk[0] for t in per_spk)


def test_untagged_utterance_rejected():
    c = small()
    c.utterances[0].split = None
    with pytest.raises(ValueError, match="split"):
        split(c)


@pytest.mark.parametrize("kw", [dict(n_speakers=1), dict(vocab_size=1), dict(min_duration=3, max_duration=2)])
def test_bad_arguments(kw):
    args = dict(n_speakers=3, n_utts_per_speaker=2, vocab_size=4) | kw
    extra = {k: args.pop(k) for k in ("min_duration", "max_duration") if k in args}
    with pytest.raises(ValueError):
        gen_corpus(**args, **extra)


def test_type_invariants(default_corpus):
    _, c, _ = default_corpus
    envs = [p.envelope for p in c.phonemes]
    assert min(np.linalg.norm(a - b) for i, a in enumerate(envs) for b in envs[i + 1:]) > 0.1
    assert all(0.5 <= s.gain.min() and s.gain.max() <= 2.0 for s in c.speakers)
    tilts = [s.tilt for s in c.speakers]
    assert min(np.linalg.norm(a - b) for i, a in enumerate(tilts) for b in tilts[i + 1:]) > 0.05
    assert all(np.abs(u.mel).max() <= MEL_CLIP for u in c.utterances)
    for u in c.utterances:
        lo = np.array([c.phonemes[p].min_duration for p in u.phonemes])
        hi = np.array([c.phonemes[p].max_duration for p in u.phonemes])
        assert np.all((lo <= u.durations) & (u.durations <= hi))


def test_speaker_linearly_decodable_from_frames(default_corpus):
    _, c, views = default_corpus
    spk = c.train_speakers
    fit = [u for u in views["train"] if int(u.id[-2:]) % 2 == 0]
    held = [u for u in views["train"] if int(u.id[-2:]) % 2 == 1]

    def design(utts):
        X = np.concatenate([u.mel.T for u in utts]).astype(np.float64)
        y = np.concatenate([np.full(u.n_frames, spk.index(u.speaker)) for u in utts])
        return np.hstack([X, np.ones((len(X), 1))]), y

    X, y = design(fit)
    W, *_ = np.linalg.lstsq(X, np.eye(len(spk))[y], rcond=None)
    Xh, yh = design(held)
    assert (np.argmax(Xh @ W, axis=1) == yh).mean() >= 0.95


def test_phoneme_envelopes_recoverable(default_corpus):
    _, c, views = default_corpus
    V, D = c.config.vocab_size, c.config.mel_bins
    sums, counts, var = np.zeros((V, D)), np.zeros((V, D)), np.zeros((V, D))
    for u in views["train"]:
        s = c.speaker(u.speaker)
        undone = (u.mel.astype(np.float64) - s.tilt[:, None]) / s.gain[:, None]
        kept = np.abs(u.mel) < MEL_CLIP  # clipped bins are biased by construction
        for f, p in enumerate(u.frame_phonemes()):
            k = kept[:, f]
            sums[p, k] += undone[k, f]
            counts[p, k] += 1
            # per-frame variance after undoing the speaker: jitter term plus scaled noise
            v = (c.phonemes[p].envelope * s.jitter) ** 2 + (c.config.noise_sigma / s.gain) ** 2
            var[p] = np.maximum(var[p], v)
    envs = np.stack([ph.envelope for ph in c.phonemes])
    bound = 3 * np.sqrt(var / counts)
    assert np.all(np.abs(sums / counts - envs) < bound)


def test_round_trip_through_directory(tmp_path):
    c = small()
    save_corpus(c, tmp_path)
    back = load_corpus(tmp_path)
    assert fingerprint(back) == fingerprint(c)
    assert back.config == c.config and back.seed == c.seed
    for a, b in zip(c.speakers, back.speakers):
        assert (a.id, a.jitter, a.heldout) == (b.id, b.jitter, b.heldout)
        assert a.gain.tobytes() == b.gain.tobytes() and a.tilt.tobytes() == b.tilt.tobytes()
    for a, b in zip(c.phonemes, back.phonemes):
        assert a.envelope.tobytes() == b.envelope.tobytes() and a.min_duration == b.min_duration
