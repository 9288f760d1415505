"""Model checkpoints on top of the ADDM container."""

from __future__ import annotations

from pathlib import Path

from .acoustic import AcousticModel
from .autodiff import ParamStore
from .config import RunConfig, from_mapping
from .diffusion import PhonemePrior
from .io import FormatError, decode_container, encode_container, load_container, save_container

SPEAKERS_KEY = "model.speakers"


def _split(model: AcousticModel) -> tuple[dict, dict]:
    tensors = dict(model.params.arrays())
    if model.prior is not None:
        tensors.update(model.prior.arrays())
    config = model.config.as_dict()
    config[SPEAKERS_KEY] = ",".join(str(s) for s in model.speakers)
    return tensors, config


def _join(tensors: dict, config: dict) -> AcousticModel:
    config = dict(config)
    try:
        speakers = [int(s) for s in config.pop(SPEAKERS_KEY).split(",") if s]
    except KeyError:
        raise FormatError("checkpoint lacks the speaker list") from None
    run = from_mapping(config)
    prior_arrays = {k: v for k, v in tensors.items() if k.startswith("prior.")}
    prior = PhonemePrior.from_arrays(prior_arrays, run.variance_floor) if prior_arrays else None
    params = ParamStore.from_arrays({k: v for k, v in tensors.items() if not k.startswith("prior.")})
    return AcousticModel(run, params, speakers, prior)


def encode_checkpoint(model: AcousticModel) -> bytes:
    return encode_container(*_split(model))


def decode_checkpoint(data: bytes) -> AcousticModel:
    return _join(*decode_container(data))


def save_checkpoint(model: AcousticModel, path: str | Path) -> None:
    save_container(path, *_split(model))


def load_checkpoint(path: str | Path) -> AcousticModel:
    return _join(*load_container(path))


def load_run_config(path: str | Path) -> RunConfig:
    _, config = load_container(path)
    config.pop(SPEAKERS_KEY, None)
    return from_mapping(config)
