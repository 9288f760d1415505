"""Deterministic synthetic multi-speaker mel corpus.

A frame of phoneme ``p`` spoken by speaker ``s`` is

    clip(gain_s * env_p * (1 + jitter_s * j) + tilt_s + sigma * n, -4, 4)

with ``n`` (D x L) and ``j`` (L,) drawn, in that order, from the utterance's
own random stream.  Speaker identity is a per-bin gain and an additive tilt,
which a per-channel scale/shift can undo.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import RngStream, stream_id
from .io import load_container, save_container

MEL_CLIP = 4.0
SPLITS = ("train", "adapt", "test")


@dataclass
class ToyPhoneme:
    id: int
    envelope: np.ndarray
    min_duration: int
    max_duration: int


@dataclass
class ToySpeaker:
    id: int
    tilt: np.ndarray
    gain: np.ndarray
    jitter: float
    heldout: bool = False


@dataclass
class Utterance:
    id: str
    speaker: int
    phonemes: np.ndarray
    durations: np.ndarray
    mel: np.ndarray
    split: str | None

    @property
    def n_frames(self) -> int:
        return int(self.durations.sum())

    def frame_phonemes(self) -> np.ndarray:
        return np.repeat(self.phonemes, self.durations)


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 12
    utts_per_speaker: int = 20
    n_heldout: int = 3
    n_adapt: int = 10
    n_test: int = 10
    vocab_size: int = 12
    mel_bins: int = 16
    min_phonemes: int = 8
    max_phonemes: int = 14
    min_duration: int = 2
    max_duration: int = 6
    noise_sigma: float = 0.05

    @classmethod
    def from_run(cls, cfg) -> "CorpusConfig":
        return cls(cfg.n_train_speakers, cfg.utts_per_speaker, cfg.n_heldout_speakers, cfg.n_adapt_utts,
                   cfg.n_test_utts, cfg.vocab_size, cfg.mel_bins, cfg.min_phonemes, cfg.max_phonemes,
                   cfg.min_duration, cfg.max_duration, cfg.noise_sigma)


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    phonemes: list[ToyPhoneme]
    speakers: list[ToySpeaker]
    utterances: list[Utterance] = field(default_factory=list)

    @property
    def train_speakers(self) -> list[int]:
        return [s.id for s in self.speakers if not s.heldout]

    @property
    def heldout_speakers(self) -> list[int]:
        return [s.id for s in self.speakers if s.heldout]

    def speaker(self, sid: int) -> ToySpeaker:
        return next(s for s in self.speakers if s.id == sid)

    def select(self, split: str, speaker: int | None = None) -> list[Utterance]:
        return [u for u in self.utterances if u.split == split and (speaker is None or u.speaker == speaker)]


def _envelopes(rng: RngStream, vocab: int, D: int) -> list[np.ndarray]:
    bins = np.arange(D)
    envs: list[np.ndarray] = []
    while len(envs) < vocab:
        n_peaks = int(rng.integers(2, 4))
        e = np.zeros(D)
        for _ in range(n_peaks):
            c, w, a = rng.uniform(0, D - 1), rng.uniform(0.8, 2.5), rng.uniform(0.6, 1.6)
            e += a * np.exp(-0.5 * ((bins - c) / w) ** 2)
        e = (e - e.mean()) / e.std()
        if all(np.linalg.norm(e - o) > 0.1 for o in envs):
            envs.append(e)
    return envs


def _speaker(rng: RngStream, sid: int, D: int, heldout: bool) -> ToySpeaker:
    k = np.arange(4)[:, None]
    basis = np.cos(np.pi * k * (np.arange(D)[None, :] + 0.5) / D)
    log_gain = rng.normal((4,), np.float64) * np.array([0.25, 0.3, 0.25, 0.2]) @ basis
    gain = np.exp(np.clip(log_gain, np.log(0.5), np.log(2.0)))
    tilt = (rng.uniform(-1.0, 1.0) * np.linspace(-1, 1, D) + rng.uniform(-0.6, 0.6)
            + 0.25 * rng.normal((D,), np.float64))
    return ToySpeaker(sid, tilt, gain, float(rng.uniform(0.01, 0.04)), heldout)


def render_mel(phonemes: np.ndarray, durations: np.ndarray, speaker: ToySpeaker,
               protos: list[ToyPhoneme], noise: RngStream, sigma: float) -> np.ndarray:
    env = np.stack([protos[p].envelope for p in np.repeat(phonemes, durations)], axis=1)  # (D, L)
    D, L = env.shape
    n = noise.normal((D, L), np.float64)
    j = noise.normal((L,), np.float64)
    mel = speaker.gain[:, None] * env * (1.0 + speaker.jitter * j)[None, :] + speaker.tilt[:, None] + sigma * n
    return np.clip(mel, -MEL_CLIP, MEL_CLIP).astype(np.float32)


def _transcript(rng: RngStream, cfg: CorpusConfig, protos: list[ToyPhoneme]) -> tuple[np.ndarray, np.ndarray]:
    n = int(rng.integers(cfg.min_phonemes, cfg.max_phonemes + 1))
    ph = rng.integers(0, cfg.vocab_size, size=n)
    du = np.array([rng.integers(protos[p].min_duration, protos[p].max_duration + 1) for p in ph])
    return ph.astype(np.int64), du.astype(np.int64)


def gen_corpus(n_speakers: int = 12, n_utts_per_speaker: int = 20, vocab_size: int = 12, seed: int = 1234,
               **overrides) -> Corpus:
    """Build the corpus; same arguments always give a bit-identical result.

    Training speakers get ids ``0..n_speakers-1``; held-out speakers follow and
    each receives ``n_adapt`` adaptation utterances plus ``n_test`` test
    utterances whose transcripts are shared by every held-out speaker.
    """
    cfg = CorpusConfig(n_speakers=n_speakers, utts_per_speaker=n_utts_per_speaker, vocab_size=vocab_size, **overrides)
    if cfg.n_speakers < 2:
        raise ValueError("need at least 2 training speakers")
    if cfg.vocab_size < 2:
        raise ValueError("need a phoneme vocabulary of at least 2")
    if not 1 <= cfg.min_duration <= cfg.max_duration:
        raise ValueError("bad duration range")
    D = cfg.mel_bins
    root = RngStream(seed, stream_id("corpus"))
    prng = root.spawn("phonemes")
    protos = []
    for i, env in enumerate(_envelopes(prng, cfg.vocab_size, D)):
        lo = int(prng.integers(cfg.min_duration, max(cfg.min_duration, (cfg.min_duration + cfg.max_duration) // 2) + 1))
        hi = int(prng.integers(max(lo, (cfg.min_duration + cfg.max_duration + 1) // 2), cfg.max_duration + 1))
        protos.append(ToyPhoneme(i, env, lo, hi))

    srng = root.spawn("speakers")
    speakers: list[ToySpeaker] = []
    for sid in range(cfg.n_speakers + cfg.n_heldout):
        while True:
            spk = _speaker(srng, sid, D, heldout=sid >= cfg.n_speakers)
            if all(np.linalg.norm(spk.tilt - o.tilt) > 0.05 for o in speakers):
                break
        speakers.append(spk)

    corpus = Corpus(cfg, seed, protos, speakers)
    trng = root.spawn("transcripts")
    shared_test = [_transcript(trng, cfg, protos) for _ in range(cfg.n_test)]

    def add(spk: ToySpeaker, split: str, idx: int, ph, du):
        uid = f"spk{spk.id:02d}_{split}_{idx:02d}"
        mel = render_mel(ph, du, spk, protos, root.spawn("noise", uid), cfg.noise_sigma)
        corpus.utterances.append(Utterance(uid, spk.id, ph, du, mel, split))

    for spk in speakers:
        if not spk.heldout:
            for j in range(cfg.utts_per_speaker):
                add(spk, "train", j, *_transcript(trng, cfg, protos))
        else:
            for j in range(cfg.n_adapt):
                add(spk, "adapt", j, *_transcript(trng, cfg, protos))
            for j, (ph, du) in enumerate(shared_test):
                add(spk, "test", j, ph, du)
    return corpus


def corpus_from_config(cfg) -> Corpus:
    c = CorpusConfig.from_run(cfg)
    return gen_corpus(c.n_speakers, c.utts_per_speaker, c.vocab_size, cfg.corpus_seed,
                      n_heldout=c.n_heldout, n_adapt=c.n_adapt, n_test=c.n_test, mel_bins=c.mel_bins,
                      min_phonemes=c.min_phonemes, max_phonemes=c.max_phonemes,
                      min_duration=c.min_duration, max_duration=c.max_duration, noise_sigma=c.noise_sigma)


def split(corpus: Corpus) -> dict[str, list[Utterance]]:
    """Disjoint train/adapt/test views.  Untagged utterances are an error."""
    views: dict[str, list[Utterance]] = {s: [] for s in SPLITS}
    for u in corpus.utterances:
        if u.split not in views:
            raise ValueError(f"utterance {u.id} has no split tag")
        views[u.split].append(u)
    heldout = set(corpus.heldout_speakers)
    if any(u.speaker in heldout for u in views["train"]):
        raise ValueError("held-out speaker found in the train split")
    return views


# -- persistence ------------------------------------------------------------------------

MANIFEST = "corpus_manifest.tsv"


def save_corpus(corpus: Corpus, out_dir: str | Path) -> list[Path]:
    """One container per utterance plus a tab-separated manifest; returns written paths."""
    out = Path(out_dir)
    (out / "mels").mkdir(parents=True, exist_ok=True)
    written = []
    lines = ["id\tspeaker\tsplit\tphonemes\tdurations\tpath"]
    for u in corpus.utterances:
        rel = f"mels/{u.id}.addm"
        save_container(out / rel, {"mel": u.mel}, {"id": u.id, "speaker": str(u.speaker), "split": u.split})
        written.append(out / rel)
        lines.append("\t".join([u.id, str(u.speaker), u.split, " ".join(map(str, u.phonemes)),
                                " ".join(map(str, u.durations)), rel]))
    (out / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {f"phoneme.{p.id}.envelope": p.envelope for p in corpus.phonemes}
    for s in corpus.speakers:
        meta[f"speaker.{s.id}.gain"] = s.gain
        meta[f"speaker.{s.id}.tilt"] = s.tilt
    cfg = {k: str(v) for k, v in corpus.config.__dict__.items()}
    cfg["seed"] = str(corpus.seed)
    cfg["durations"] = ";".join(f"{p.min_duration},{p.max_duration}" for p in corpus.phonemes)
    cfg["speakers"] = ";".join(f"{s.id},{s.jitter!r},{int(s.heldout)}" for s in corpus.speakers)
    save_container(out / "corpus_meta.addm", meta, cfg)
    written += [out / MANIFEST, out / "corpus_meta.addm"]
    return written


def load_corpus(in_dir: str | Path) -> Corpus:
    src = Path(in_dir)
    meta, cfg = load_container(src / "corpus_meta.addm")
    seed = int(cfg.pop("seed"))
    durs = cfg.pop("durations").split(";")
    spk_rows = cfg.pop("speakers").split(";")
    ints = {"noise_sigma": float}
    ccfg = CorpusConfig(**{k: ints.get(k, int)(v) for k, v in cfg.items()})
    protos = [ToyPhoneme(i, meta[f"phoneme.{i}.envelope"], *map(int, d.split(","))) for i, d in enumerate(durs)]
    speakers = []
    for row in spk_rows:
        sid, jit, held = row.split(",")
        sid = int(sid)
        speakers.append(ToySpeaker(sid, meta[f"speaker.{sid}.tilt"], meta[f"speaker.{sid}.gain"], float(jit), held == "1"))
    corpus = Corpus(ccfg, seed, protos, speakers)
    lines = (src / MANIFEST).read_text(encoding="utf-8").splitlines()[1:]
    for line in lines:
        uid, spk, spl, ph, du, rel = line.split("\t")
        tensors, _ = load_container(src / rel)
        corpus.utterances.append(Utterance(uid, int(spk), np.array(ph.split(), np.int64),
                                           np.array(du.split(), np.int64), tensors["mel"], spl or None))
    return corpus
