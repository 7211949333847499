"""Codec training losses and the multi-period discriminator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dsp
from . import functional as F
from .nn import Conv2d, Module
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class MelScale:
    stft: dsp.StftConfig
    mel: dsp.MelConfig
    weight: float = 1.0


def default_mel_scales(sample_rate: int = 48000) -> tuple[MelScale, ...]:
    return tuple(
        MelScale(st, dsp.MelConfig(sample_rate=sample_rate, n_mel=n))
        for st, n in zip(dsp.SPECTRAL_RESOLUTIONS, (40, 80, 160))
    )


@dataclass(frozen=True)
class LossWeights:
    mel: float = 30.0
    spectral: float = 20.0
    fm: float = 2.0
    adv: float = 1.0

    def __post_init__(self):
        if min(self.mel, self.spectral, self.fm, self.adv) < 0:
            raise ValueError("loss weights must be nonnegative")


def _check_pair(x: Tensor, x_hat: Tensor) -> None:
    if x.shape != x_hat.shape:
        raise ValueError(f"signal shapes differ: {x.shape} vs {x_hat.shape}")


def mel_loss(x: Tensor, x_hat: Tensor, scales: Sequence[MelScale] | None = None) -> Tensor:
    """Sum over scales of ``weight * mean |logmel(x) - logmel(x_hat)|``."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    _check_pair(x, x_hat)
    scales = scales or default_mel_scales()
    if not scales:
        raise ValueError("need at least one mel scale")
    total = None
    for s in scales:
        if s.weight <= 0:
            raise ValueError("mel scale weights must be positive")
        ref = dsp.log_mel_spectrogram(x, s.stft, s.mel)
        est = dsp.log_mel_spectrogram(x_hat, s.stft, s.mel)
        term = (ref - est).abs().mean() * s.weight
        total = term if total is None else total + term
    return total


def spectral_loss(
    x: Tensor, x_hat: Tensor, resolutions: Sequence[dsp.StftConfig] = dsp.SPECTRAL_RESOLUTIONS, reduction: str = "mean"
) -> Tensor:
    """L1 distance between STFT magnitudes, accumulated over resolutions.

    ``reduction="sum"`` gives the plain L1 norm per resolution; ``"mean"``
    divides each term by its element count so resolutions weigh equally.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    _check_pair(x, x_hat)
    total = None
    for cfg in resolutions:
        diff = (dsp.magnitude_spectrogram(x, cfg) - dsp.magnitude_spectrogram(x_hat, cfg)).abs()
        term = diff.mean() if reduction == "mean" else diff.sum()
        total = term if total is None else total + term
    return total


def feature_matching_loss(
    feats_real: Sequence[Tensor], feats_fake: Sequence[Tensor], weights: Sequence[float] | None = None
) -> Tensor:
    """``sum_l w_l * mean |phi_l(x) - phi_l(x_hat)|``; real features are treated as constants."""
    if len(feats_real) != len(feats_fake) or not feats_real:
        raise ValueError(f"feature tap counts differ or are empty: {len(feats_real)} vs {len(feats_fake)}")
    weights = [1.0] * len(feats_real) if weights is None else list(weights)
    if len(weights) != len(feats_real):
        raise ValueError("one weight per feature layer required")
    total = None
    for w, fr, ff in zip(weights, feats_real, feats_fake):
        if fr.shape != ff.shape:
            raise ValueError(f"feature shapes differ: {fr.shape} vs {ff.shape}")
        term = (ff - fr.detach()).abs().mean() * w
        total = term if total is None else total + term
    return total


def lsgan_losses(real_scores: Sequence[Tensor], fake_scores: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
    """Least-squares GAN objectives summed over sub-discriminators.

    Returns ``(generator_loss, discriminator_loss)``: the discriminator
    targets 1 on real and 0 on fake, the generator targets 1 on fake.
    """
    gen = None
    disc = None
    for r, f in zip(real_scores, fake_scores):
        d = ((r - 1.0) ** 2).mean() + (f**2).mean()
        g = ((f - 1.0) ** 2).mean()
        disc = d if disc is None else disc + d
        gen = g if gen is None else gen + g
    return gen, disc


class PeriodDiscriminator(Module):
    """Folds the waveform into ``(B, 1, N/p, p)`` and applies strided ``(k, 1)`` convolutions."""

    def __init__(self, period: int, channels=(8, 16, 32), kernel: int = 5, stride: int = 3, *, rng):
        self.period = period
        convs = []
        c_in = 1
        for c in channels:
            convs.append(Conv2d(c_in, c, (kernel, 1), stride=(stride, 1), padding=(kernel // 2, 0), rng=rng))
            c_in = c
        convs.append(Conv2d(c_in, c_in, (kernel, 1), padding=(kernel // 2, 0), rng=rng))
        self.convs = convs
        self.post = Conv2d(c_in, 1, (3, 1), padding=(1, 0), rng=rng)

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        b, _, n = x.shape
        pad = (-n) % self.period
        h = x.reshape(b, n)
        if pad:
            h = F.pad_last(h, 0, pad, mode="reflect")
        h = h.reshape(b, 1, (n + pad) // self.period, self.period)
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.1)
            feats.append(h)
        h = self.post(h)
        feats.append(h)
        return h, feats


class MultiPeriodDiscriminator(Module):
    def __init__(self, periods=(2, 3, 5), channels=(8, 16, 32), seed: int = 1):
        rng = np.random.default_rng(seed)
        self.discs = [PeriodDiscriminator(p, channels, rng=rng) for p in periods]

    def forward(self, x: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        """Return per-period score maps and the flattened list of feature taps."""
        scores, feats = [], []
        for d in self.discs:
            s, f = d(x)
            scores.append(s)
            feats.extend(f)
        return scores, feats


def adversarial_losses(disc: MultiPeriodDiscriminator, x: Tensor, x_hat: Tensor) -> tuple[Tensor, Tensor]:
    """``(gen_loss, disc_loss)``; the discriminator term sees ``x_hat`` detached."""
    real, _ = disc(as_tensor(x))
    fake_for_disc, _ = disc(as_tensor(x_hat).detach())
    fake_for_gen, _ = disc(as_tensor(x_hat))
    _, d_loss = lsgan_losses(real, fake_for_disc)
    g_loss, _ = lsgan_losses([r.detach() for r in real], fake_for_gen)
    return g_loss, d_loss


@dataclass
class LossComponents:
    adv: Tensor | float = 0.0
    mel: Tensor | float = 0.0
    spectral: Tensor | float = 0.0
    fm: Tensor | float = 0.0

    def values(self) -> dict[str, float]:
        return {k: float(v.item() if isinstance(v, Tensor) else v) for k, v in vars(self).items()}


def total_loss(c: LossComponents, w: LossWeights | None = None):
    """``adv_w * L_adv + mel_w * L_mel + spectral_w * L_spectral + fm_w * L_fm``."""
    w = w or LossWeights()
    return w.adv * c.adv + w.mel * c.mel + w.spectral * c.spectral + w.fm * c.fm
