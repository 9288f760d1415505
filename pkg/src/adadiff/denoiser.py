"""Bidirectional dilated-convolution denoiser with conditional layer norm.

Layout is channel-first, ``(batch, channels, frames)``.  Speaker identity
reaches the network only through the CLN placed after the input convolution;
with ``use_cln=False`` the denoiser is speaker-blind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, RngStream, Tensor, ops


@dataclass(frozen=True)
class DenoiserConfig:
    n_blocks: int = 4
    channels: int = 32
    kernel_size: int = 3
    dilation_cycle: int = 4
    mel_bins: int = 16
    step_sin_dim: int = 32
    step_hidden_dim: int = 64
    cond_dim: int = 32          # encoder-condition channels
    speaker_dim: int = 256
    step_cln_dim: int = 256
    use_cln: bool = True
    T: int = 400

    def __post_init__(self):
        if self.n_blocks < 1 or self.channels < 1:
            raise ValueError("need n_blocks >= 1 and channels >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.step_sin_dim % 2:
            raise ValueError("step_sin_dim must be even")

    @property
    def cln_cond_dim(self) -> int:
        return self.speaker_dim + self.step_cln_dim

    def dilation(self, i: int) -> int:
        return 2 ** (i % self.dilation_cycle)

    def receptive_radius(self) -> int:
        return sum(self.dilation(i) * (self.kernel_size - 1) // 2 for i in range(self.n_blocks))


def step_sinusoid(t, dim: int) -> np.ndarray:
    """[sin(t f_0..f_{h-1}), cos(t f_0..f_{h-1})] with f_i = 10^(4 i / (h - 1)).

    The lowest frequency is 1, so for t=1 the first sin/cos pair is (sin 1, cos 1).
    """
    half = dim // 2
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    expo = np.arange(half) * 4.0 / max(half - 1, 1)
    table = t[:, None] * 10.0 ** expo[None, :]
    return np.concatenate([np.sin(table), np.cos(table)], axis=1)


def _w(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape) * np.float32(1.0 / math.sqrt(fan_in))


def init_cln(params: ParamStore, prefix: str, cond_dim: int, channels: int) -> None:
    """Generators start at gamma == 1, beta == 0 for any condition."""
    params.add(f"{prefix}.gamma.w", np.zeros((cond_dim, channels), np.float32))
    params.add(f"{prefix}.gamma.b", np.ones(channels, np.float32))
    params.add(f"{prefix}.beta.w", np.zeros((cond_dim, channels), np.float32))
    params.add(f"{prefix}.beta.b", np.zeros(channels, np.float32))


def cln_scale_shift(params: ParamStore, prefix: str, cond: Tensor) -> tuple[Tensor, Tensor]:
    """(gamma, beta), each (B, C), from a (B, cond_dim) condition."""
    w = params[f"{prefix}.gamma.w"]
    if cond.shape[-1] != w.shape[0]:
        raise ValueError(f"CLN {prefix}: condition dim {cond.shape[-1]} != expected {w.shape[0]}")
    gamma = ops.affine(cond, w, params[f"{prefix}.gamma.b"])
    beta = ops.affine(cond, params[f"{prefix}.beta.w"], params[f"{prefix}.beta.b"])
    return gamma, beta


def cln_apply(h: Tensor, cond: Tensor, params: ParamStore, prefix: str, axis: int = 1) -> Tensor:
    """LN(h) * gamma(cond) + beta(cond), normalising over the channel ``axis``."""
    gamma, beta = cln_scale_shift(params, prefix, cond)
    B, C = gamma.shape
    shape = [1] * h.data.ndim
    shape[0], shape[axis] = B, C
    y = ops.layer_norm(h, axis=axis)
    return ops.add(ops.mul(y, ops.reshape(gamma, shape)), ops.reshape(beta, shape))


class Denoiser:
    """Noise predictor eps_theta(z_t, t, cond, speaker)."""

    def __init__(self, config: DenoiserConfig, params: ParamStore, prefix: str = "denoiser"):
        self.config = config
        self.params = params
        self.prefix = prefix

    @staticmethod
    def init_params(config: DenoiserConfig, params: ParamStore, rng: RngStream, prefix: str = "denoiser") -> None:
        c = config
        C, D, H, S = c.channels, c.mel_bins, c.step_hidden_dim, c.step_sin_dim
        p = prefix
        params.add(f"{p}.input.w", _w(rng, (C, D, 1), D))
        params.add(f"{p}.input.b", np.zeros(C, np.float32))
        params.add(f"{p}.step.fc1.w", _w(rng, (S, H), S))
        params.add(f"{p}.step.fc1.b", np.zeros(H, np.float32))
        params.add(f"{p}.step.fc2.w", _w(rng, (H, H), H))
        params.add(f"{p}.step.fc2.b", np.zeros(H, np.float32))
        params.add(f"{p}.step.cln_head.w", _w(rng, (H, c.step_cln_dim), H))
        params.add(f"{p}.step.cln_head.b", np.zeros(c.step_cln_dim, np.float32))
        if c.use_cln:
            init_cln(params, f"{p}.cln", c.cln_cond_dim, C)
        for i in range(c.n_blocks):
            b = f"{p}.block{i}"
            params.add(f"{b}.step_proj.w", _w(rng, (H, C), H))
            params.add(f"{b}.step_proj.b", np.zeros(C, np.float32))
            params.add(f"{b}.dilconv.w", _w(rng, (2 * C, C, c.kernel_size), C * c.kernel_size))
            params.add(f"{b}.dilconv.b", np.zeros(2 * C, np.float32))
            params.add(f"{b}.cond.w", _w(rng, (2 * C, c.cond_dim, 1), c.cond_dim))
            params.add(f"{b}.cond.b", np.zeros(2 * C, np.float32))
            if i < c.n_blocks - 1:  # the last residual output would feed nothing
                params.add(f"{b}.res.w", _w(rng, (C, C, 1), C))
                params.add(f"{b}.res.b", np.zeros(C, np.float32))
            params.add(f"{b}.skip.w", _w(rng, (C, C, 1), C))
            params.add(f"{b}.skip.b", np.zeros(C, np.float32))
        params.add(f"{p}.out1.w", _w(rng, (C, C, 1), C))
        params.add(f"{p}.out1.b", np.zeros(C, np.float32))
        params.add(f"{p}.out2.w", _w(rng, (D, C, 1), C))
        params.add(f"{p}.out2.b", np.zeros(D, np.float32))

    def step_embed(self, t) -> tuple[Tensor, Tensor]:
        """(block condition (B, H), CLN condition component (B, step_cln_dim))."""
        t = np.atleast_1d(np.asarray(t))
        if t.min() < 1 or t.max() > self.config.T:
            raise ValueError(f"step out of range 1..{self.config.T}")
        p, P = self.prefix, self.params
        dtype = P[f"{p}.step.fc1.w"].dtype
        x = Tensor(step_sinusoid(t, self.config.step_sin_dim).astype(dtype))
        h = ops.relu(ops.affine(x, P[f"{p}.step.fc1.w"], P[f"{p}.step.fc1.b"]))
        h = ops.relu(ops.affine(h, P[f"{p}.step.fc2.w"], P[f"{p}.step.fc2.b"]))
        cln = ops.affine(h, P[f"{p}.step.cln_head.w"], P[f"{p}.step.cln_head.b"])
        return h, cln

    def __call__(self, z_t, t, cond, speaker: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        """Predict scaled noise for ``z_t`` (B, D, L) given ``cond`` (B, cond_dim, L).

        ``speaker`` is a (B, speaker_dim) embedding; required when CLN is on.
        ``mask`` (B, 1, L) zeroes padded frames ahead of every dilated conv so a
        padded batch matches per-utterance evaluation exactly.
        """
        c, p, P = self.config, self.prefix, self.params
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        cond = cond if isinstance(cond, Tensor) else Tensor(cond)
        if z_t.shape[0] != cond.shape[0] or z_t.shape[2] != cond.shape[2]:
            raise ValueError(f"denoiser: z_t {z_t.shape} and condition {cond.shape} disagree on batch/length")
        if z_t.shape[1] != c.mel_bins:
            raise ValueError(f"denoiser: expected {c.mel_bins} mel bins, got {z_t.shape[1]}")
        B = z_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        step_h, step_cln = self.step_embed(t)

        h = ops.conv1d(z_t, P[f"{p}.input.w"], P[f"{p}.input.b"])
        if c.use_cln:
            if speaker is None:
                raise ValueError("denoiser with CLN needs a speaker embedding")
            h = cln_apply(h, ops.concat([speaker, step_cln], axis=1), P, f"{p}.cln")
        if mask is not None:
            h = ops.mul(h, mask)

        skip = None
        for i in range(c.n_blocks):
            b = f"{p}.block{i}"
            s = ops.affine(step_h, P[f"{b}.step_proj.w"], P[f"{b}.step_proj.b"])
            y = ops.add(h, ops.reshape(s, (B, c.channels, 1)))
            if mask is not None:
                y = ops.mul(y, mask)
            y = ops.conv1d(y, P[f"{b}.dilconv.w"], P[f"{b}.dilconv.b"], dilation=c.dilation(i))
            y = ops.add(y, ops.conv1d(cond, P[f"{b}.cond.w"], P[f"{b}.cond.b"]))
            y = ops.gated_tanh_sigmoid(y, axis=1)
            sk = ops.conv1d(y, P[f"{b}.skip.w"], P[f"{b}.skip.b"])
            skip = sk if skip is None else ops.add(skip, sk)
            if i < c.n_blocks - 1:
                r = ops.conv1d(y, P[f"{b}.res.w"], P[f"{b}.res.b"])
                h = ops.scale(ops.add(h, r), 1 / math.sqrt(2.0))
                if mask is not None:
                    h = ops.mul(h, mask)

        out = ops.relu(ops.scale(skip, 1 / math.sqrt(c.n_blocks)))
        out = ops.relu(ops.conv1d(out, P[f"{p}.out1.w"], P[f"{p}.out1.b"]))
        return ops.conv1d(out, P[f"{p}.out2.w"], P[f"{p}.out2.b"])


def count_denoiser_params(c: DenoiserConfig) -> dict[str, int]:
    """Closed-form parameter counts per group (independent of construction)."""
    C, D, H, S, E, k = c.channels, c.mel_bins, c.step_hidden_dim, c.step_sin_dim, c.cond_dim, c.kernel_size
    per_block = (H * C + C) + (2 * C * C * k + 2 * C) + (2 * C * E + 2 * C) + 2 * (C * C + C)
    last_res = C * C + C
    groups = {
        "input_conv": D * C + C,
        "step_mlp": (S * H + H) + (H * H + H) + (H * c.step_cln_dim + c.step_cln_dim),
        "blocks": c.n_blocks * per_block - last_res,
        "output_head": (C * C + C) + (C * D + D),
        "cln_generators": 2 * (c.cln_cond_dim * C + C) if c.use_cln else 0,
    }
    groups["total"] = sum(groups.values())
    return groups
