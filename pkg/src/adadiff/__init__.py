"""Adaptive diffusion acoustic model on a small numpy autodiff core."""

from .acoustic import AcousticModel, MixedDecoderConfig, PhonemeSeq
from .adaptation import AdaptationConfig, FinetuneSet, TrainPlan, adapt, pretrain
from .autodiff import RngStream, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import corpus_from_config, gen_corpus

__all__ = [
    "AcousticModel", "AdaptationConfig", "FinetuneSet", "MixedDecoderConfig", "PhonemeSeq", "RngStream",
    "RunConfig", "Tensor", "TrainPlan", "adapt", "corpus_from_config", "gen_corpus", "load_checkpoint",
    "pretrain", "save_checkpoint",
]
