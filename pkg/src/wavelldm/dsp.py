"""STFT, mel filterbank and log-mel features.

The STFT is a differentiable op on :class:`Tensor` signals: its backward pass
is the adjoint real DFT followed by windowed overlap-add. Spectrograms are
returned as ``(B, n_fft//2 + 1, frames, 2)`` tensors holding real and
imaginary parts.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import functional as F
from .tensor import Tensor, as_tensor, matmul


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 2048
    win_length: int = 2048
    hop_length: int = 512
    center: bool = True

    def __post_init__(self):
        if not 0 < self.hop_length <= self.win_length <= self.n_fft:
            raise ValueError(f"need 0 < hop <= win <= n_fft, got {self}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def num_frames(self, n: int) -> int:
        if self.center:
            n += 2 * (self.n_fft // 2)
        return 1 + (n - self.n_fft) // self.hop_length


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 48000
    n_mel: int = 160
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.n_mel < 1:
            raise ValueError("n_mel must be >= 1")
        if not 0.0 <= self.f_min < self.upper <= self.sample_rate / 2:
            raise ValueError(f"need 0 <= f_min < f_max <= sample_rate/2, got {self}")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def upper(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else self.f_max


# resolutions used by the multi-scale spectral loss
SPECTRAL_RESOLUTIONS = (StftConfig(512, 512, 128), StftConfig(1024, 1024, 256), StftConfig(2048, 2048, 512))


@lru_cache(maxsize=None)
def hann_window(win_length: int, n_fft: int) -> np.ndarray:
    """Periodic Hann window of ``win_length`` zero-padded (centred) to ``n_fft``."""
    n = np.arange(win_length)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)
    left = (n_fft - win_length) // 2
    return np.pad(w, (left, n_fft - win_length - left))


def _frame_dft(x: Tensor, cfg: StftConfig) -> Tensor:
    xd = x.data
    b, n = xd.shape
    if n < cfg.n_fft:
        raise ValueError(f"signal of {n} samples is shorter than one frame ({cfg.n_fft})")
    window = hann_window(cfg.win_length, cfg.n_fft).astype(xd.dtype)
    frames = np.lib.stride_tricks.sliding_window_view(xd, cfg.n_fft, axis=-1)[:, :: cfg.hop_length]
    n_frames = frames.shape[1]
    spec = np.fft.rfft(frames * window, axis=-1)
    out = np.stack([spec.real, spec.imag], axis=-1).astype(xd.dtype).transpose(0, 2, 1, 3)
    starts = np.arange(n_frames) * cfg.hop_length
    index = (starts[:, None] + np.arange(cfg.n_fft)[None, :]).ravel()

    def backward(g):
        gc = g[..., 0] + 1j * g[..., 1]
        gc = gc.transpose(0, 2, 1).copy()
        gc[..., 1:-1] *= 0.5
        if cfg.n_fft % 2:
            gc[..., -1] *= 0.5
        gframes = np.fft.irfft(gc, n=cfg.n_fft, axis=-1) * cfg.n_fft * window
        gx = np.empty((b, n), dtype=g.dtype)
        for r in range(b):
            gx[r] = np.bincount(index, weights=gframes[r].ravel(), minlength=n)[:n]
        return (gx,)

    return Tensor._result(out, (x,), backward, "stft")


def stft(signal: Tensor, cfg: StftConfig) -> Tensor:
    """Hann-windowed short-time DFT of ``(B, 1, N)`` or ``(B, N)`` signals.

    Returns ``(B, n_fft//2 + 1, frames, 2)`` (real, imaginary).
    """
    signal = as_tensor(signal)
    if signal.ndim == 3:
        if signal.shape[1] != 1:
            raise ValueError(f"expected mono (B, 1, N) signal, got {signal.shape}")
        signal = signal.reshape(signal.shape[0], signal.shape[2])
    elif signal.ndim != 2:
        raise ValueError(f"expected (B, 1, N) or (B, N) signal, got {signal.shape}")
    if cfg.center:
        pad = cfg.n_fft // 2
        if signal.shape[1] <= pad:
            raise ValueError(f"signal of {signal.shape[1]} samples too short for centred STFT with n_fft={cfg.n_fft}")
        signal = F.pad_last(signal, pad, pad, mode="reflect")
    return _frame_dft(signal, cfg)


def magnitude_spectrogram(signal: Tensor, cfg: StftConfig) -> Tensor:
    """``|STFT|`` with shape ``(B, n_fft//2 + 1, frames)``."""
    return F.magnitude(stft(signal, cfg))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=32)
def mel_filterbank(cfg: MelConfig, n_fft: int) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mel, n_fft//2 + 1)``.

    Filters have unit peak; raises if any filter covers no FFT bin.
    """
    freqs = np.arange(n_fft // 2 + 1) * cfg.sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper), cfg.n_mel + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"{empty.size} of {cfg.n_mel} mel filters are empty at n_fft={n_fft}; reduce n_mel or raise n_fft"
        )
    fb.setflags(write=False)
    return fb


def log_mel_spectrogram(signal: Tensor, stft_cfg: StftConfig, mel_cfg: MelConfig) -> Tensor:
    """``log(max(mel @ |STFT|, log_floor))`` with shape ``(B, n_mel, frames)``."""
    mag = magnitude_spectrogram(signal, stft_cfg)
    fb = Tensor(mel_filterbank(mel_cfg, stft_cfg.n_fft), dtype=mag.dtype)
    return matmul(fb, mag).clamp_min(mel_cfg.log_floor).log()
