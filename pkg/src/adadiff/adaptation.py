"""Two-stage pretraining, finetune-set masks, speaker adaptation, accounting."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

from .acoustic import AcousticModel, count_model_params, denoiser_config, make_batch
from .autodiff import Adam, NonFiniteError, RngStream, Tape, backward, stream_id
from .config import RunConfig
from .corpus import Utterance
from .denoiser import count_denoiser_params
from .diffusion import estimate_prior

log = logging.getLogger(__name__)


class FinetuneSet(str, enum.Enum):
    SpkEmbOnly = "SpkEmbOnly"
    SpkEmbPlusCLN = "SpkEmbPlusCLN"
    WholeDecoder = "WholeDecoder"

    @classmethod
    def parse(cls, value: "str | FinetuneSet") -> "FinetuneSet":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown finetune set {value!r}; choose from {[s.value for s in cls]}") from None


DECODER_PREFIXES = ("denoiser.", "decoder.", "postnet.")


def _is_cln(name: str) -> bool:
    parts = name.split(".")
    return any(p == "cln" or p.startswith("cln") and p[3:].isdigit() for p in parts)


def select_trainable(model: AcousticModel, finetune_set: FinetuneSet | str, speaker: int) -> dict[str, bool]:
    """Boolean mask over parameter names for adapting to ``speaker``."""
    fs = FinetuneSet.parse(finetune_set)
    row = f"speaker.{speaker}"
    if row not in model.params:
        raise KeyError(f"model has no embedding row for speaker {speaker}")
    mask = {}
    for name in model.params:
        if name == row:
            on = True
        elif fs is FinetuneSet.SpkEmbOnly:
            on = False
        elif fs is FinetuneSet.SpkEmbPlusCLN:
            on = name.startswith(DECODER_PREFIXES) and _is_cln(name)
        else:
            on = name.startswith(DECODER_PREFIXES)
        mask[name] = on
    return mask


@dataclass(frozen=True)
class TrainPlan:
    stage1_steps: int = 2000
    stage2_steps: int = 1000
    batch_frames: int = 512
    lr: float = 1e-3

    def __post_init__(self):
        if not self.stage1_steps >= self.stage2_steps > 0:
            raise ValueError("need stage1_steps >= stage2_steps > 0")

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "TrainPlan":
        return cls(cfg.stage1_steps, cfg.stage2_steps, cfg.batch_frames, cfg.lr)


@dataclass(frozen=True)
class AdaptationConfig:
    steps: int = 2000
    lr: float = 2e-4
    utterances: int = 10

    def __post_init__(self):
        if self.steps <= 0 or self.lr <= 0 or self.utterances <= 0:
            raise ValueError("adaptation settings must be positive")

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "AdaptationConfig":
        return cls(cfg.adapt_steps, cfg.adapt_lr, cfg.adapt_utterances)


@dataclass
class TrainResult:
    model: AcousticModel
    losses: list[float] = field(default_factory=list)
    stages: list[int] = field(default_factory=list)

    def history_rows(self) -> list[dict]:
        return [{"step": i + 1, "stage": s, "loss": l} for i, (s, l) in enumerate(zip(self.stages, self.losses))]


def _adam(cfg: RunConfig, lr: float) -> Adam:
    return Adam(lr=lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)


def _frame_batches(utts: Sequence[Utterance], batch_frames: int, rng: RngStream):
    """Endless stream of utterance lists holding at least ``batch_frames`` frames."""
    while True:
        order = rng.permutation(len(utts))
        cur, frames = [], 0
        for i in order:
            cur.append(utts[i])
            frames += utts[i].n_frames
            if frames >= batch_frames:
                yield cur
                cur, frames = [], 0


def train_step(model: AcousticModel, opt: Adam, utts: Sequence[Utterance], rng: RngStream) -> float:
    batch = make_batch(utts)
    with Tape():
        loss = model.loss(batch, rng)
        grads = backward(loss, model.params)
    opt.step(model.params, grads)
    return float(loss.data)


def pretrain(utterances: Sequence[Utterance], plan: TrainPlan, config: RunConfig, seed: int,
             vocab_size: int | None = None) -> TrainResult:
    """Stage 1 trains everything; stage 2 freezes the encoder.

    ``utterances`` is the training split; the prior is estimated from it.
    """
    speakers = sorted({u.speaker for u in utterances})
    if len(speakers) < 2:
        raise ValueError("pretraining needs at least two speakers")
    prior = estimate_prior(((u.mel, u.frame_phonemes()) for u in utterances),
                           vocab_size or config.vocab_size, config.variance_floor)
    model = AcousticModel.create(config, speakers, prior, seed)
    result = TrainResult(model)
    rng = RngStream(seed, stream_id("pretrain"))
    batches = _frame_batches(list(utterances), plan.batch_frames, rng.spawn("batches"))
    opt = _adam(config, plan.lr)
    for stage, steps in ((1, plan.stage1_steps), (2, plan.stage2_steps)):
        if stage == 2:
            model.params.set_trainable({n: not n.startswith("encoder.") for n in model.params})
        for step in range(steps):
            try:
                loss = train_step(model, opt, next(batches), rng)
            except NonFiniteError as exc:
                raise NonFiniteError(f"pretraining diverged at stage {stage} step {step + 1}: {exc}") from exc
            result.losses.append(loss)
            result.stages.append(stage)
        log.info("stage %d done, last loss %.4f", stage, result.losses[-1])
    model.params.set_trainable(True)
    return result


def adapt(model: AcousticModel, target: Sequence[Utterance], finetune_set: FinetuneSet | str,
          config: AdaptationConfig, run: RunConfig, seed: int) -> TrainResult:
    """Finetune a copy of ``model`` on one unseen speaker's utterances.

    A fresh speaker row (mean of pretrained rows) is added; only the masked
    parameters move.  The input model is left untouched.
    """
    if not target:
        raise ValueError("adaptation needs at least one target utterance")
    speaker = target[0].speaker
    if any(u.speaker != speaker for u in target):
        raise ValueError("all adaptation utterances must come from one speaker")
    if speaker in model.speakers:
        raise ValueError(f"speaker {speaker} was seen in pretraining")
    adapted = model.copy()
    adapted.add_speaker(speaker)
    adapted.params.set_trainable(select_trainable(adapted, finetune_set, speaker))
    utts = list(target[: config.utterances])
    batch = make_batch(utts)
    rng = RngStream(seed, stream_id("adapt", speaker, FinetuneSet.parse(finetune_set).value))
    opt = _adam(run, config.lr)
    result = TrainResult(adapted)
    for step in range(config.steps):
        with Tape():
            loss = adapted.loss(batch, rng)
            grads = backward(loss, adapted.params)
        opt.step(adapted.params, grads)
        result.losses.append(float(loss.data))
        result.stages.append(0)
    return result


def accounting(model: AcousticModel, speaker: int) -> dict[str, int]:
    """Trainable-parameter count per finetune set, from the actual masks."""
    out = {}
    for fs in FinetuneSet:
        mask = select_trainable(model, fs, speaker)
        out[fs.value] = sum(model.params[n].size for n, on in mask.items() if on)
    return out


def accounting_closed_form(cfg: RunConfig) -> dict[str, int]:
    """Same table from the config alone (one adapted speaker row)."""
    c = count_model_params(cfg, n_speakers=1)
    whole = c["denoiser"] + c["decoder_layers"] + c["decoder_proj"] + c["postnet_cond_proj"] + cfg.speaker_dim
    return {"SpkEmbOnly": cfg.speaker_dim,
            "SpkEmbPlusCLN": cfg.speaker_dim + c["denoiser_cln"] + c["decoder_cln"],
            "WholeDecoder": whole}


def accounting_report(cfg: RunConfig) -> str:
    den = denoiser_config(cfg)
    groups = count_denoiser_params(den)
    table = accounting_closed_form(cfg)
    lines = [f"# N={den.n_blocks} C={den.channels} D={den.mel_bins} cln_cond={den.cln_cond_dim} K={cfg.dec_layers}",
             "group\tparams"]
    for k, v in groups.items():
        lines.append(f"denoiser.{k}\t{v}")
    lines.append(f"speaker_row\t{cfg.speaker_dim}")
    for k, v in table.items():
        lines.append(f"finetune.{k}\t{v}")
    return "\n".join(lines) + "\n"
