"""Phoneme encoder, length regulator, CLN Transformer decoder and the diffusion
decoder, assembled into one acoustic model.

K = ``dec_layers`` selects the architecture:

* K = 0: the denoiser conditions directly on length-regulated encoder output
  and samples the whole mel in prior-residual space.
* K >= 1: K Transformer layers with speaker CLN produce a coarse mel; the
  denoiser acts as a post-net, conditioned on the (projected) coarse mel, with
  the coarse mel as its prior mean.

Transformer tensors are ``(batch, frames, channels)``; denoiser tensors are
``(batch, channels, frames)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffusion as dif
from .autodiff import ParamStore, RngStream, Tensor, no_grad, ops, stream_id
from .config import RunConfig
from .denoiser import Denoiser, DenoiserConfig, _w, cln_apply, count_denoiser_params, init_cln

MASK_BIAS = -1e9


@dataclass(frozen=True)
class MixedDecoderConfig:
    K: int = 0
    cln_in_denoiser: bool = True

    def __post_init__(self):
        if not 0 <= self.K <= 4:
            raise ValueError("K must be in 0..4")

    @property
    def cln_in_transformer(self) -> bool:
        return self.K > 0

    @property
    def name(self) -> str:
        return f"K{self.K}-cln{'on' if self.cln_in_denoiser else 'off'}"


@dataclass
class PhonemeSeq:
    phonemes: np.ndarray
    durations: np.ndarray

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        if self.phonemes.shape != self.durations.shape:
            raise ValueError("phonemes and durations must have equal length")
        if (self.durations < 1).any():
            raise ValueError("durations must be >= 1")

    @property
    def n_frames(self) -> int:
        return int(self.durations.sum())

    def frame_phonemes(self) -> np.ndarray:
        return np.repeat(self.phonemes, self.durations)


@dataclass
class Batch:
    """Padded batch; masks are 1 on real phonemes/frames."""

    phonemes: np.ndarray        # (B, P)
    phone_mask: np.ndarray      # (B, P)
    align: np.ndarray           # (B, P, L) one-hot phoneme -> frame
    frame_mask: np.ndarray      # (B, 1, L)
    frame_phonemes: np.ndarray  # (B, L)
    speakers: np.ndarray        # (B,)
    mel: np.ndarray | None      # (B, D, L)
    ids: list

    @property
    def size(self) -> int:
        return len(self.speakers)

    @property
    def lengths(self) -> np.ndarray:
        return self.frame_mask[:, 0].sum(axis=1).astype(np.int64)

    def subset(self, rows) -> "Batch":
        return Batch(self.phonemes[rows], self.phone_mask[rows], self.align[rows], self.frame_mask[rows],
                     self.frame_phonemes[rows], self.speakers[rows],
                     None if self.mel is None else self.mel[rows], [self.ids[i] for i in np.arange(self.size)[rows]])


def alignment_matrix(durations: np.ndarray, n_frames: int | None = None) -> np.ndarray:
    """(P, L) 0/1 matrix with column f set at the phoneme that frame f belongs to."""
    durations = np.asarray(durations, dtype=np.int64)
    L = int(durations.sum()) if n_frames is None else n_frames
    A = np.zeros((len(durations), L), np.float32)
    owner = np.repeat(np.arange(len(durations)), durations)
    A[owner, np.arange(len(owner))] = 1.0
    return A


def make_batch(items: Sequence, mel_bins: int | None = None) -> Batch:
    """Pad ``items`` (objects with phonemes, durations, speaker, optional mel, id)."""
    B = len(items)
    P = max(len(u.phonemes) for u in items)
    L = max(int(np.sum(u.durations)) for u in items)
    has_mel = all(getattr(u, "mel", None) is not None for u in items)
    D = items[0].mel.shape[0] if has_mel else mel_bins
    phon = np.zeros((B, P), np.int64)
    pmask = np.zeros((B, P), np.float32)
    align = np.zeros((B, P, L), np.float32)
    fmask = np.zeros((B, 1, L), np.float32)
    fphon = np.zeros((B, L), np.int64)
    mel = np.zeros((B, D, L), np.float32) if has_mel else None
    for i, u in enumerate(items):
        ph = np.asarray(u.phonemes)
        du = np.asarray(u.durations)
        n, l = len(ph), int(du.sum())
        phon[i, :n] = ph
        pmask[i, :n] = 1
        align[i, :n, :l] = alignment_matrix(du)
        fmask[i, 0, :l] = 1
        fphon[i, :l] = np.repeat(ph, du)
        if has_mel:
            mel[i, :, :l] = u.mel
    speakers = np.array([u.speaker for u in items], np.int64)
    return Batch(phon, pmask, align, fmask, fphon, speakers, mel, [getattr(u, "id", i) for i, u in enumerate(items)])


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    ang = pos / 10000.0 ** (2 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)[:, : dim - dim // 2]
    return pe.astype(np.float32)


def denoiser_config(cfg: RunConfig, use_cln: bool | None = None) -> DenoiserConfig:
    return DenoiserConfig(n_blocks=cfg.n_blocks, channels=cfg.channels, kernel_size=cfg.kernel_size,
                          dilation_cycle=cfg.dilation_cycle, mel_bins=cfg.mel_bins,
                          step_sin_dim=cfg.step_sin_dim, step_hidden_dim=cfg.step_hidden_dim,
                          cond_dim=cfg.enc_dim, speaker_dim=cfg.speaker_dim, step_cln_dim=cfg.step_cln_dim,
                          use_cln=cfg.cln_in_denoiser if use_cln is None else use_cln, T=cfg.T)


def diffusion_config(cfg: RunConfig) -> dif.DiffusionConfig:
    return dif.DiffusionConfig(cfg.T, cfg.beta_min, cfg.beta_max, cfg.variance_floor, cfg.prior_mode)


# -- transformer pieces -----------------------------------------------------------

def _init_attention(params: ParamStore, p: str, E: int, rng: RngStream) -> None:
    for n in ("q", "k", "v", "o"):
        params.add(f"{p}.{n}.w", _w(rng, (E, E), E))
        params.add(f"{p}.{n}.b", np.zeros(E, np.float32))


def _init_ff(params: ParamStore, p: str, E: int, F: int, rng: RngStream) -> None:
    params.add(f"{p}.fc1.w", _w(rng, (E, F), E))
    params.add(f"{p}.fc1.b", np.zeros(F, np.float32))
    params.add(f"{p}.fc2.w", _w(rng, (F, E), F))
    params.add(f"{p}.fc2.b", np.zeros(E, np.float32))


def self_attention(x: Tensor, P: ParamStore, p: str, n_heads: int, key_bias: np.ndarray) -> Tensor:
    """Multi-head self-attention; ``key_bias`` (B, 1, 1, L) is 0 or a large negative."""
    B, L, E = x.shape
    dh = E // n_heads

    def heads(name):
        y = ops.affine(x, P[f"{p}.{name}.w"], P[f"{p}.{name}.b"])
        return ops.transpose(ops.reshape(y, (B, L, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1 / math.sqrt(dh))
    attn = ops.softmax(ops.add(scores, key_bias), axis=-1)
    o = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (B, L, E))
    return ops.affine(o, P[f"{p}.o.w"], P[f"{p}.o.b"])


def feed_forward(x: Tensor, P: ParamStore, p: str) -> Tensor:
    h = ops.relu(ops.affine(x, P[f"{p}.fc1.w"], P[f"{p}.fc1.b"]))
    return ops.affine(h, P[f"{p}.fc2.w"], P[f"{p}.fc2.b"])


def _key_bias(mask: np.ndarray, dtype) -> np.ndarray:
    """(B, L) 0/1 mask -> additive (B, 1, 1, L) attention bias."""
    return np.where(mask > 0, 0.0, MASK_BIAS).astype(dtype)[:, None, None, :]


# -- the model ----------------------------------------------------------------------

class AcousticModel:
    """Encoder + optional CLN Transformer decoder + diffusion decoder.

    All parameters live in one :class:`ParamStore`; speaker rows are stored one
    per speaker as ``speaker.<id>`` so finetune masks can select a single row.
    """

    def __init__(self, config: RunConfig, params: ParamStore, speakers: Sequence[int],
                 prior: dif.PhonemePrior | None):
        self.config = config
        self.params = params
        self.speakers = list(speakers)
        self.prior = prior
        self.mixed = MixedDecoderConfig(config.dec_layers, config.cln_in_denoiser)
        self.denoiser = Denoiser(denoiser_config(config), params)
        self.schedule = dif.schedule_from_config(diffusion_config(config))

    # construction -----------------------------------------------------------------

    @classmethod
    def create(cls, config: RunConfig, speakers: Sequence[int], prior: dif.PhonemePrior | None,
               seed: int) -> "AcousticModel":
        rng = RngStream(seed, stream_id("init"))
        P = ParamStore()
        c = config
        E, F = c.enc_dim, c.ff_dim
        if E % c.n_heads:
            raise ValueError("enc_dim must be divisible by n_heads")
        P.add("encoder.embed", rng.normal((c.vocab_size, E)))
        for i in range(c.enc_layers):
            p = f"encoder.layer{i}"
            _init_attention(P, f"{p}.attn", E, rng)
            _init_ff(P, f"{p}.ff", E, F, rng)
            for ln in ("ln1", "ln2"):
                P.add(f"{p}.{ln}.g", np.ones(E, np.float32))
                P.add(f"{p}.{ln}.b", np.zeros(E, np.float32))
        for i in range(c.dec_layers):
            p = f"decoder.layer{i}"
            _init_attention(P, f"{p}.attn", E, rng)
            _init_ff(P, f"{p}.ff", E, F, rng)
            init_cln(P, f"{p}.cln1", c.speaker_dim, E)
            init_cln(P, f"{p}.cln2", c.speaker_dim, E)
        if c.dec_layers:
            P.add("decoder.proj.w", _w(rng, (E, c.mel_bins), E))
            P.add("decoder.proj.b", np.zeros(c.mel_bins, np.float32))
            P.add("postnet.cond_proj.w", _w(rng, (E, c.mel_bins, 1), c.mel_bins))
            P.add("postnet.cond_proj.b", np.zeros(E, np.float32))
        Denoiser.init_params(denoiser_config(c), P, rng.spawn("denoiser"))
        for s in speakers:
            P.add(f"speaker.{s}", rng.spawn("speaker", int(s)).normal((c.speaker_dim,)))
        return cls(config, P, speakers, prior)

    def add_speaker(self, speaker: int) -> str:
        """New speaker row initialised to the mean of the existing rows."""
        name = f"speaker.{speaker}"
        if speaker in self.speakers:
            raise ValueError(f"speaker {speaker} already present")
        rows = [self.params[f"speaker.{s}"].data for s in self.speakers]
        self.params.add(name, np.mean(rows, axis=0).astype(np.float32))
        self.speakers.append(speaker)
        return name

    def copy(self) -> "AcousticModel":
        return AcousticModel(self.config, self.params.copy(), self.speakers, self.prior)

    @property
    def dtype(self):
        return self.params["denoiser.input.w"].dtype

    # components ---------------------------------------------------------------------

    def speaker_embedding(self, speakers) -> Tensor:
        speakers = np.asarray(speakers)
        missing = [int(s) for s in np.unique(speakers) if int(s) not in self.speakers]
        if missing:
            raise KeyError(f"unknown speaker id(s) {missing}")
        uniq = sorted({int(s) for s in speakers})
        table = ops.concat([ops.reshape(self.params[f"speaker.{s}"], (1, -1)) for s in uniq], axis=0)
        index = np.searchsorted(uniq, speakers)
        return ops.embedding_lookup(table, index)

    def encode(self, phonemes: np.ndarray, phone_mask: np.ndarray) -> Tensor:
        """(B, P) ids -> (B, P, E) encodings (plain LN Transformer encoder)."""
        c, P = self.config, self.params
        if phonemes.size and (phonemes.min() < 0 or phonemes.max() >= c.vocab_size):
            raise ValueError(f"phoneme id outside vocabulary 0..{c.vocab_size - 1}")
        B, L = phonemes.shape
        x = ops.embedding_lookup(P["encoder.embed"], phonemes)
        x = ops.add(x, positional_encoding(L, c.enc_dim).astype(x.dtype))
        bias = _key_bias(phone_mask, x.dtype)
        for i in range(c.enc_layers):
            p = f"encoder.layer{i}"
            x = ops.layer_norm(ops.add(x, self_attention(x, P, f"{p}.attn", c.n_heads, bias)),
                               P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
            x = ops.layer_norm(ops.add(x, feed_forward(x, P, f"{p}.ff")), P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
        return x

    @staticmethod
    def regulate(enc: Tensor, align: np.ndarray) -> Tensor:
        """(B, P, E) x (B, P, L) alignment -> frame-rate (B, L, E)."""
        return ops.matmul(np.ascontiguousarray(align.transpose(0, 2, 1)).astype(enc.dtype), enc)

    def transformer_decode(self, frames: Tensor, spk: Tensor, frame_mask: np.ndarray) -> Tensor:
        """K layers of attention -> CLN -> feed-forward -> CLN; returns coarse mel (B, D, L)."""
        c, P = self.config, self.params
        if c.dec_layers < 1:
            raise ValueError("transformer_decode needs K >= 1; K = 0 bypasses the Transformer decoder")
        B, L, E = frames.shape
        x = ops.add(frames, positional_encoding(L, E).astype(frames.dtype))
        bias = _key_bias(frame_mask[:, 0], x.dtype)
        for i in range(c.dec_layers):
            p = f"decoder.layer{i}"
            x = cln_apply(ops.add(x, self_attention(x, P, f"{p}.attn", c.n_heads, bias)), spk, P, f"{p}.cln1", axis=-1)
            x = cln_apply(ops.add(x, feed_forward(x, P, f"{p}.ff")), spk, P, f"{p}.cln2", axis=-1)
        mel = ops.affine(x, P["decoder.proj.w"], P["decoder.proj.b"])
        return ops.transpose(mel, (0, 2, 1))

    def diffusion_inputs(self, batch: Batch) -> tuple[Tensor, Tensor, Tensor | None, np.ndarray | Tensor, np.ndarray]:
        """(condition (B,E,L), speaker emb, coarse mel or None, mu, sigma) for the denoiser.

        ``mu`` is the phoneme-independent prior mean (an array) for K = 0 and
        the coarse mel itself (a tensor) for K >= 1.
        """
        c = self.config
        spk = self.speaker_embedding(batch.speakers)
        enc = self.encode(batch.phonemes, batch.phone_mask)
        frames = self.regulate(enc, batch.align)
        mu, sigma = self.prior.resolve(c.prior_mode, batch.frame_phonemes, self.dtype)
        if c.dec_layers == 0:
            cond = ops.transpose(frames, (0, 2, 1))
            return cond, spk, None, mu * batch.frame_mask, sigma
        coarse = ops.mul(self.transformer_decode(frames, spk, batch.frame_mask), batch.frame_mask)
        # the coarse mel is both the post-net condition and its prior mean
        cond = ops.conv1d(coarse, self.params["postnet.cond_proj.w"], self.params["postnet.cond_proj.b"])
        return cond, spk, coarse, coarse, sigma

    def _denoise_fn(self, cond: Tensor, spk: Tensor, mask: np.ndarray):
        def denoise(z_t, t, rows=slice(None)):
            if rows == slice(None):
                return self.denoiser(z_t, t, cond, spk, mask)
            return self.denoiser(z_t, t, Tensor(cond.data[rows]), Tensor(spk.data[rows]), mask[rows])
        return denoise

    # training / inference ----------------------------------------------------------------

    def loss(self, batch: Batch, rng: RngStream, t=None, eps=None) -> Tensor:
        """Diffusion loss, plus the coarse-mel MSE when K >= 1."""
        if batch.mel is None:
            raise ValueError("training batch needs mel targets")
        cond, spk, coarse, mu, sigma = self.diffusion_inputs(batch)
        mask = batch.frame_mask
        x0 = batch.mel.astype(self.dtype)
        z0 = ops.mul(ops.sub(x0, mu), mask) if isinstance(mu, Tensor) else (x0 - mu) * mask
        loss = dif.training_loss(self._denoise_fn(cond, spk, mask), z0, sigma, self.schedule, rng,
                                 mask=mask, t=t, eps=eps, example_ids=batch.ids)
        if coarse is not None:
            denom = float(mask.sum()) * x0.shape[1]
            mel_loss = ops.weighted_mse(coarse, x0, np.broadcast_to(mask, x0.shape).astype(x0.dtype), denom=denom)
            loss = ops.add(loss, mel_loss)
        return loss

    def synthesize(self, batch: Batch, seed: int) -> np.ndarray:
        """Sampled mels (B, D, L); padded frames are zero."""
        with no_grad():
            cond, spk, _, mu, sigma = self.diffusion_inputs(batch)
            rng = RngStream(seed, stream_id("sample"))
            mu = mu.data if isinstance(mu, Tensor) else mu
            return dif.sample(self._denoise_fn(cond, spk, batch.frame_mask), mu, sigma, self.schedule,
                              rng, mask=batch.frame_mask)

    def coarse_mel(self, batch: Batch) -> np.ndarray:
        with no_grad():
            spk = self.speaker_embedding(batch.speakers)
            frames = self.regulate(self.encode(batch.phonemes, batch.phone_mask), batch.align)
            return self.transformer_decode(frames, spk, batch.frame_mask).data * batch.frame_mask

    # single-utterance conveniences ----------------------------------------------------------

    def encode_phonemes(self, seq: PhonemeSeq) -> np.ndarray:
        """EncodedText (E, P) for one phoneme sequence."""
        with no_grad():
            enc = self.encode(seq.phonemes[None], np.ones((1, len(seq.phonemes)), np.float32))
        return enc.data[0].T

    def synthesize_one(self, seq: PhonemeSeq, speaker: int, mixed: MixedDecoderConfig, seed: int) -> np.ndarray:
        if mixed != self.mixed:
            raise ValueError(f"model was built as {self.mixed.name}, asked for {mixed.name}")
        item = _Item(seq.phonemes, seq.durations, speaker)
        return self.synthesize(make_batch([item], self.config.mel_bins), seed)[0]


@dataclass
class _Item:
    phonemes: np.ndarray
    durations: np.ndarray
    speaker: int
    mel: np.ndarray | None = None
    id: str = "utt"


def length_regulate(encoded: np.ndarray, durations: np.ndarray) -> np.ndarray:
    """EncodedText (E, P) -> (E, L): column p repeated durations[p] times."""
    durations = np.asarray(durations, dtype=np.int64)
    if encoded.shape[1] != len(durations):
        raise ValueError(f"{len(durations)} durations for {encoded.shape[1]} phonemes")
    if (durations < 0).any():
        raise ValueError("negative duration")
    return encoded @ alignment_matrix(durations)


def count_model_params(cfg: RunConfig, n_speakers: int = 1) -> dict[str, int]:
    """Closed-form counts per component for a full acoustic model config."""
    E, F, D, V = cfg.enc_dim, cfg.ff_dim, cfg.mel_bins, cfg.vocab_size
    attn = 4 * (E * E + E)
    ff = (E * F + F) + (F * E + E)
    enc_layer = attn + ff + 2 * 2 * E
    cln_t = 2 * 2 * (cfg.speaker_dim * E + E)
    dec_layer = attn + ff + cln_t
    counts = {"encoder": V * E + cfg.enc_layers * enc_layer,
              "decoder_layers": cfg.dec_layers * dec_layer,
              "decoder_cln": cfg.dec_layers * cln_t,
              "decoder_proj": (E * D + D) if cfg.dec_layers else 0,
              "postnet_cond_proj": (D * E + E) if cfg.dec_layers else 0,
              "speaker_rows": n_speakers * cfg.speaker_dim}
    den = count_denoiser_params(denoiser_config(cfg))
    counts["denoiser"] = den["total"]
    counts["denoiser_cln"] = den["cln_generators"]
    counts["total"] = (counts["encoder"] + counts["decoder_layers"] + counts["decoder_proj"]
                       + counts["postnet_cond_proj"] + counts["speaker_rows"] + counts["denoiser"])
    return counts
