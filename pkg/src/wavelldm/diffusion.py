"""Conditional latent DDPM: schedule, forward process, training loss, ancestral sampler.

Timesteps are 1-based (``t = 1..T``) everywhere in this module; schedule
arrays are stored 0-based, so ``beta_t`` is ``schedule.betas[t - 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad

Estimator = Callable[[Tensor, Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class VarianceSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def T(self) -> int:
        return self.betas.size

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if t.size == 0 or t.min() < 1 or t.max() > self.T:
            raise ValueError(f"timestep must lie in [1, {self.T}], got {t}")
        return t.astype(np.int64)


def make_schedule(kind: str = "linear", T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> VarianceSchedule:
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}; only 'linear' is provided")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_1 < beta_T < 1.0:
        raise ValueError(f"need 0 < beta_1 < beta_T < 1, got {beta_1}, {beta_T}")
    betas = np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1])
    alphas = 1.0 - betas
    # float64 running product: relative error stays near T * 1e-16
    return VarianceSchedule(betas, alphas, np.cumprod(alphas), np.sqrt(betas))


def scaled_schedule(T: int, reference_T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> VarianceSchedule:
    """Linear schedule for a short chain with endpoints scaled by ``reference_T / T``.

    Keeps the terminal ``alpha_bar_T`` close to that of the ``reference_T``-step
    chain, so sampling can still start from ``N(0, I)``.
    """
    k = reference_T / T
    return make_schedule("linear", T, beta_1 * k, min(beta_T * k, 0.999))


def _bcast(v: np.ndarray, like: Tensor | np.ndarray) -> np.ndarray:
    """Per-batch coefficient reshaped to broadcast against ``(B, ...)``."""
    v = np.asarray(v)
    ndim = like.ndim
    if v.ndim == 0:
        return v
    return v.reshape((-1,) + (1,) * (ndim - 1))


def forward_step(z_prev, t, eps, schedule: VarianceSchedule):
    """One noising step ``z_t = sqrt(alpha_t) z_{t-1} + sqrt(1 - alpha_t) eps``."""
    t = schedule.check_t(t)
    a = _bcast(schedule.alphas[t - 1], np.asarray(z_prev))
    return np.sqrt(a) * z_prev + np.sqrt(1.0 - a) * eps


def forward_marginal(z0, t, eps, schedule: VarianceSchedule):
    """Closed-form ``z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps``; works on arrays or tensors."""
    t = schedule.check_t(t)
    like = z0.data if isinstance(z0, Tensor) else np.asarray(z0)
    ab = _bcast(schedule.alpha_bars[t - 1], like)
    return z0 * np.sqrt(ab).astype(like.dtype) + eps * np.sqrt(1.0 - ab).astype(like.dtype)


def training_step(
    z0: np.ndarray, cond: np.ndarray, estimator: Estimator, schedule: VarianceSchedule, rng: np.random.Generator
) -> Tensor:
    """Noise-prediction loss ``mean((eps - eps_theta(z_t, z'_0, t))^2)`` at a random ``t`` per sample."""
    z0 = np.asarray(z0)
    cond = np.asarray(cond)
    if z0.shape != cond.shape:
        raise ValueError(f"clean and conditioning latents differ in shape: {z0.shape} vs {cond.shape}")
    t = rng.integers(1, schedule.T + 1, size=z0.shape[0])
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    return noise_prediction_loss(z0, cond, t, eps, estimator, schedule)


def noise_prediction_loss(z0, cond, t, eps, estimator: Estimator, schedule: VarianceSchedule) -> Tensor:
    """The loss of :func:`training_step` for given timesteps and noise."""
    z_t = forward_marginal(np.asarray(z0), t, eps, schedule)
    pred = estimator(Tensor(z_t), Tensor(np.asarray(cond)), np.asarray(t))
    return ((pred - Tensor(eps, dtype=pred.dtype)) ** 2).mean()


def reverse_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: VarianceSchedule, noise: np.ndarray | None):
    """``z_{t-1} = (z_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * noise``.

    ``noise`` is ignored at ``t = 1``.
    """
    a, ab = schedule.alphas[t - 1], schedule.alpha_bars[t - 1]
    mean = (z_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if t > 1 and noise is not None:
        mean = mean + schedule.sigmas[t - 1] * noise
    return mean.astype(z_t.dtype)


def sample(
    cond: np.ndarray, estimator: Estimator, schedule: VarianceSchedule, seed: int, z_T: np.ndarray | None = None
) -> np.ndarray:
    """Ancestral sampling from ``z_T ~ N(0, I)`` down to ``z_0`` given the conditioning latent.

    Noise for step ``t`` comes from its own generator seeded by ``(seed, t)``,
    so results do not depend on anything but ``seed`` and the inputs.
    """
    cond = np.asarray(cond)
    dtype = cond.dtype if cond.dtype.kind == "f" else np.float32
    z = np.random.default_rng([seed, 0]).standard_normal(cond.shape).astype(dtype) if z_T is None else np.array(z_T, dtype)
    cond_t = Tensor(cond.astype(dtype))
    with no_grad():
        for t in range(schedule.T, 0, -1):
            eps_hat = estimator(Tensor(z), cond_t, np.full(z.shape[0], t)).data
            noise = np.random.default_rng([seed, t]).standard_normal(z.shape).astype(dtype) if t > 1 else None
            z = reverse_step(z, eps_hat, t, schedule, noise)
    return z


@dataclass(frozen=True)
class LatentStats:
    """Per-channel affine map between codec latents and the unit-scale diffusion space."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, channels: int) -> "LatentStats":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))

    @classmethod
    def fit(cls, latents: np.ndarray, floor: float = 1e-4) -> "LatentStats":
        """Statistics over batch and time of ``(B, C, L)`` latents."""
        lat = np.asarray(latents, dtype=np.float64)
        return cls(lat.mean(axis=(0, 2)).astype(np.float32), np.maximum(lat.std(axis=(0, 2)), floor).astype(np.float32))

    def normalize(self, z: np.ndarray) -> np.ndarray:
        return ((z - self.mean[:, None]) / self.std[:, None]).astype(np.float32)

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return (z * self.std[:, None] + self.mean[:, None]).astype(np.float32)


def restore(
    waveform: np.ndarray,
    codec,
    estimator: Estimator,
    schedule: VarianceSchedule,
    seed: int = 0,
    stats: LatentStats | None = None,
) -> np.ndarray:
    """Degraded waveform ``(B, 1, N)`` -> restored waveform of the same shape.

    ``N`` must be a multiple of the codec's samples-per-latent and the latent
    length must suit the estimator; see ``pipeline.audio.pad_to_multiple``.
    The sampler runs in the space normalized by ``stats``.
    """
    x = np.asarray(waveform, dtype=np.float32)
    if x.ndim == 1:
        x = x[None, None]
    elif x.ndim == 2:
        x = x[:, None]
    codec.check_length(x.shape[-1])
    with no_grad():
        cond = codec.latent(Tensor(x)).data
        stats = stats or LatentStats.identity(cond.shape[1])
        z0 = stats.denormalize(sample(stats.normalize(cond), estimator, schedule, seed))
        y = codec.decode_latent(Tensor(z0)).data
    return y.reshape(np.asarray(waveform).shape)

