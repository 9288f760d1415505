"""Run configuration: a flat ``key = value`` text format with strict keys."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # synthetic corpus
    corpus_seed: int = 1234
    n_train_speakers: int = 12
    utts_per_speaker: int = 20
    n_heldout_speakers: int = 3
    n_adapt_utts: int = 10
    n_test_utts: int = 10
    vocab_size: int = 12
    mel_bins: int = 16
    min_phonemes: int = 8
    max_phonemes: int = 14
    min_duration: int = 2
    max_duration: int = 6
    noise_sigma: float = 0.05
    # diffusion
    T: int = 400
    beta_min: float = 1e-4
    beta_max: float = 0.02
    variance_floor: float = 1e-4
    prior_mode: str = "global_prior"
    # denoiser
    n_blocks: int = 4
    channels: int = 64
    kernel_size: int = 3
    dilation_cycle: int = 4
    step_sin_dim: int = 32
    step_hidden_dim: int = 64
    speaker_dim: int = 256
    step_cln_dim: int = 256
    cln_in_denoiser: bool = True
    # encoder / transformer decoder
    enc_dim: int = 32
    enc_layers: int = 2
    ff_dim: int = 64
    n_heads: int = 1
    dec_layers: int = 0
    # pretraining
    stage1_steps: int = 2000
    stage2_steps: int = 1000
    batch_frames: int = 512
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    # adaptation
    adapt_steps: int = 200
    adapt_lr: float = 2e-4
    adapt_utterances: int = 10
    finetune_set: str = "SpkEmbPlusCLN"
    # evaluation
    seed: int = 0
    compare_seeds: int = 10
    seed_batches: int = 5
    grid_seeds: int = 3
    probe_hidden: int = 64
    probe_steps: int = 600

    @classmethod
    def paper_scale(cls) -> "RunConfig":
        """Dimensions of the full-size model (accounting only; never trained here)."""
        return cls(n_blocks=12, channels=128, mel_bins=80, enc_dim=256, ff_dim=1024, n_heads=2,
                   step_sin_dim=128, step_hidden_dim=512, dilation_cycle=4,
                   stage1_steps=200_000, stage2_steps=100_000, batch_frames=50_000,
                   adapt_steps=2000)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dump(self) -> str:
        lines = [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict[str, str]:
        return {f.name: _fmt(getattr(self, f.name)) for f in fields(self)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, typ: str, raw: str):
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r} (expected {typ})") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines over ``base``; unknown keys are an error."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    return (base or RunConfig()).replace(**values)


def from_mapping(mapping: dict[str, str]) -> RunConfig:
    """Rebuild a config from ``as_dict`` output (checkpoint config blocks)."""
    types = {f.name: f.type for f in fields(RunConfig)}
    known = {k: _coerce(k, types[k], v) for k, v in mapping.items() if k in types}
    return RunConfig(**known)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)
