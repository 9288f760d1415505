"""Noise schedule, forward/reverse diffusion and the data-dependent prior.

Diffusion runs in prior-residual space: ``z0 = x0 - mu_prior``.  The forward
process adds scaled noise ``sigma_prior * eps`` and the denoiser is trained to
predict exactly that scaled noise, so the reverse update below needs no extra
rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import NonFiniteError, RngStream, Tensor, ops

PRIOR_MODES = ("standard_gaussian", "phoneme_prior", "global_prior")

# denoise(z_t, t_per_example, rows) -> predicted scaled noise, same shape as z_t
DenoiseFn = Callable[..., Tensor]


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 400
    beta_min: float = 1e-4
    beta_max: float = 0.02
    variance_floor: float = 1e-4
    prior_mode: str = "global_prior"

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not (0 < self.beta_min <= self.beta_max < 1):
            raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {self.beta_min}, {self.beta_max}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by step t = 1..T (stored 0-based)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"diffusion step out of range 1..{self.T}: {t.min()}..{t.max()}")
        return t

    def beta(self, t):
        return self.betas[self.check_t(t) - 1]

    def alpha(self, t):
        return self.alphas[self.check_t(t) - 1]

    def alpha_bar(self, t):
        """alpha_bar(0) is defined as 1 (no noise)."""
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() > self.T):
            raise ValueError(f"diffusion step out of range 0..{self.T}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]

    def posterior_std(self, t: int) -> float:
        """sigma_tilde_t = sqrt(beta_t (1 - abar_{t-1}) / (1 - abar_t))."""
        b = self.beta(t)
        return float(np.sqrt(b * (1 - self.alpha_bar(t - 1)) / (1 - self.alpha_bar(t))))


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule.  With T=1 the single beta is ``beta_min``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_min < 1 and 0 < beta_max < 1) or beta_min > beta_max:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if T == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        betas = beta_min + np.arange(T, dtype=np.float64) * (beta_max - beta_min) / (T - 1)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def schedule_from_config(cfg: DiffusionConfig) -> NoiseSchedule:
    return make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)


# -- prior ---------------------------------------------------------------------

@dataclass
class PhonemePrior:
    """Per-phoneme and global mel statistics over a training set."""

    phoneme_mean: np.ndarray   # (V, D); rows of unseen phonemes copy the global mean
    phoneme_var: np.ndarray    # (V, D)
    phoneme_count: np.ndarray  # (V,) frame counts
    global_mean: np.ndarray    # (D,)
    global_var: np.ndarray     # (D,)
    floor: float = 1e-4

    @property
    def mel_bins(self) -> int:
        return len(self.global_mean)

    def resolve(self, mode: str, frame_phonemes: np.ndarray, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        """Per-frame (mu, sigma) arrays of shape (B, D, L) for ``frame_phonemes`` (B, L)."""
        fp = np.asarray(frame_phonemes)
        B, L = fp.shape
        D = self.mel_bins
        if mode == "standard_gaussian":
            return np.zeros((B, D, L), dtype), np.ones((B, D, L), dtype)
        if mode == "global_prior":
            mu = np.broadcast_to(self.global_mean[None, :, None], (B, D, L))
            sd = np.broadcast_to(np.sqrt(self.global_var)[None, :, None], (B, D, L))
            return mu.astype(dtype), sd.astype(dtype)
        if mode == "phoneme_prior":
            idx = np.clip(fp, 0, len(self.phoneme_mean) - 1)
            mu = self.phoneme_mean[idx].transpose(0, 2, 1)
            sd = np.sqrt(self.phoneme_var[idx]).transpose(0, 2, 1)
            return mu.astype(dtype), sd.astype(dtype)
        raise ValueError(f"unknown prior mode {mode!r}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {"prior.phoneme_mean": self.phoneme_mean, "prior.phoneme_var": self.phoneme_var,
                "prior.phoneme_count": self.phoneme_count.astype(np.float32),
                "prior.global_mean": self.global_mean, "prior.global_var": self.global_var}

    @classmethod
    def from_arrays(cls, a: dict[str, np.ndarray], floor: float) -> "PhonemePrior":
        return cls(a["prior.phoneme_mean"], a["prior.phoneme_var"], a["prior.phoneme_count"].astype(np.int64),
                   a["prior.global_mean"], a["prior.global_var"], floor)


def estimate_prior(frames: Iterable[tuple[np.ndarray, np.ndarray]], vocab_size: int,
                   floor: float = 1e-4) -> PhonemePrior:
    """Statistics from ``(mel (D, L), frame_phonemes (L,))`` pairs.

    Variances are population variances, clamped to ``floor`` after pooling.
    """
    s1 = s2 = None
    counts = np.zeros(vocab_size, dtype=np.int64)
    for mel, ph in frames:
        mel = np.asarray(mel, dtype=np.float64)
        ph = np.asarray(ph)
        if s1 is None:
            D = mel.shape[0]
            s1 = np.zeros((vocab_size, D))
            s2 = np.zeros((vocab_size, D))
        np.add.at(s1, ph, mel.T)
        np.add.at(s2, ph, (mel * mel).T)
        counts += np.bincount(ph, minlength=vocab_size)
    if s1 is None or counts.sum() == 0:
        raise ValueError("cannot estimate a prior from an empty corpus")
    n = counts.sum()
    g_mean = s1.sum(0) / n
    g_var = s2.sum(0) / n - g_mean ** 2
    seen = counts > 0
    p_mean = np.tile(g_mean, (vocab_size, 1))
    p_var = np.tile(g_var, (vocab_size, 1))
    p_mean[seen] = s1[seen] / counts[seen, None]
    p_var[seen] = s2[seen] / counts[seen, None] - p_mean[seen] ** 2
    return PhonemePrior(p_mean.astype(np.float32), np.maximum(p_var, floor).astype(np.float32), counts,
                        g_mean.astype(np.float32), np.maximum(g_var, floor).astype(np.float32), floor)


# -- forward process and loss ----------------------------------------------------

def _bcast(v: np.ndarray | float, ndim: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def q_sample(z0: np.ndarray, t, eps: np.ndarray, sigma: np.ndarray | float,
             schedule: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) sigma * eps; ``t`` scalar or per example."""
    ab = _bcast(schedule.alpha_bar(schedule.check_t(t)), z0.ndim)
    out = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * (sigma * eps)
    return out.astype(z0.dtype)


class DiffusionLossError(NonFiniteError):
    def __init__(self, msg: str, t: np.ndarray, example_ids: Sequence):
        super().__init__(msg)
        self.t = t
        self.example_ids = list(example_ids)


def training_loss(denoise: DenoiseFn, z0: np.ndarray, sigma: np.ndarray, schedule: NoiseSchedule,
                  rng: RngStream | None = None, mask: np.ndarray | None = None,
                  t: np.ndarray | None = None, eps: np.ndarray | None = None,
                  example_ids: Sequence | None = None) -> Tensor:
    """Prior-weighted noise-prediction MSE: mean of (n - n_hat)^2 / sigma^2.

    ``z0`` is (B, D, L) in residual space, ``sigma`` the prior std broadcastable
    to it, ``mask`` (B, 1, L) marks real frames.  ``t`` and ``eps`` may be
    injected; otherwise they are drawn from ``rng`` (t uniform on 1..T).
    ``z0`` may be a tracked tensor when the prior mean is itself learned.
    """
    B = z0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    if eps is None:
        eps = rng.normal(z0.shape, dtype=z0.dtype)
    t = schedule.check_t(t)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=z0.dtype), z0.shape)
    noise = (sigma * eps).astype(z0.dtype)
    if isinstance(z0, Tensor):
        ab = _bcast(schedule.alpha_bar(t), z0.data.ndim)
        z_t = ops.add(ops.mul(z0, np.sqrt(ab).astype(z0.dtype)), (np.sqrt(1.0 - ab) * noise).astype(z0.dtype))
    else:
        z_t = q_sample(z0, t, eps, sigma, schedule)
    ids = list(range(B)) if example_ids is None else list(example_ids)
    try:
        pred = denoise(z_t, t, slice(None))
        if mask is None:
            weights = (1.0 / (sigma * sigma)).astype(z0.dtype)
            denom = None
        else:
            weights = (mask / (sigma * sigma)).astype(z0.dtype)
            denom = float(mask.sum()) * z0.shape[1]
        loss = ops.weighted_mse(pred, noise, weights, denom=denom)
    except NonFiniteError:
        bad = []
        for i in range(B):
            try:
                zi = z_t.data if isinstance(z_t, Tensor) else z_t
                denoise(zi[i:i + 1], t[i:i + 1], slice(i, i + 1))
            except NonFiniteError:
                bad.append(i)
        bad = bad or list(range(B))
        raise DiffusionLossError(
            f"non-finite diffusion loss at t={t[bad].tolist()} for examples {[ids[i] for i in bad]}",
            t[bad], [ids[i] for i in bad]) from None
    return loss


# -- reverse process -------------------------------------------------------------

def p_sample_step(denoise: DenoiseFn, z_t: np.ndarray, t: int, sigma: np.ndarray | float,
                  schedule: NoiseSchedule, rng: RngStream | None, mask: np.ndarray | None = None) -> np.ndarray:
    """Ancestral update z_t -> z_{t-1}; no noise is injected at t = 1."""
    t = int(schedule.check_t(t))
    B = z_t.shape[0]
    eps_hat = denoise(z_t, np.full(B, t), slice(None))
    eps_hat = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
    beta = schedule.beta(t)
    coef = beta / np.sqrt(1.0 - schedule.alpha_bar(t))
    mean = (z_t - coef * eps_hat) / np.sqrt(schedule.alpha(t))
    if t > 1:
        xi = rng.normal(z_t.shape, dtype=z_t.dtype)
        mean = mean + schedule.posterior_std(t) * (sigma * xi)
    out = mean.astype(z_t.dtype)
    if mask is not None:
        out = out * mask
    return out


def sample(denoise: DenoiseFn, mu: np.ndarray, sigma: np.ndarray, schedule: NoiseSchedule,
           seed: int | RngStream, mask: np.ndarray | None = None) -> np.ndarray:
    """Draw z_T ~ N(0, sigma^2), run t = T..1, return z_0 + mu (shape of ``mu``)."""
    rng = seed if isinstance(seed, RngStream) else RngStream(seed, 0)
    z = (np.asarray(sigma) * rng.normal(mu.shape, dtype=mu.dtype)).astype(mu.dtype)
    if mask is not None:
        z = z * mask
    for t in range(schedule.T, 0, -1):
        z = p_sample_step(denoise, z, t, sigma, schedule, rng, mask)
    out = z + mu
    return out * mask if mask is not None else out
