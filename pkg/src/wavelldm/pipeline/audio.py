"""WAV I/O, degradation synthesis and the bundled synthetic corpus."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.size and np.abs(self.samples).max() > 1.0:
            raise ValueError("samples must lie in [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def load_wav(path) -> AudioClip:
    """Read PCM16 or float32 RIFF/WAVE; multichannel files keep the first channel."""
    try:
        sr, data = wavfile.read(str(path))
    except (ValueError, EOFError) as exc:
        raise ValueError(f"{path}: not a readable RIFF/WAVE file ({exc})") from exc
    if data.ndim == 2:
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = np.clip(data, -1.0, 1.0)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}; expected PCM16 or float32")
    return AudioClip(samples, int(sr))


def save_wav(clip: AudioClip, path) -> None:
    """Write PCM16; values are rounded to the nearest step of 1/32768."""
    pcm = np.clip(np.round(clip.samples.astype(np.float64) * 32768.0), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), clip.sample_rate, pcm)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Windowed-sinc polyphase resampling."""
    if clip.sample_rate == target_rate:
        return clip
    g = np.gcd(clip.sample_rate, target_rate)
    y = resample_poly(clip.samples.astype(np.float64), target_rate // g, clip.sample_rate // g)
    return AudioClip(np.clip(y, -1.0, 1.0), target_rate)


def pad_to_multiple(x: np.ndarray, multiple: int) -> tuple[np.ndarray, int]:
    """Zero-pad the last axis up to a multiple; returns the padded array and the original length."""
    n = x.shape[-1]
    pad = (-n) % multiple
    if pad:
        x = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, pad)])
    return x, n


# ---------------------------------------------------------------------------
# degradation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "mask"
    mask_ms: float = 250.0
    snr_db: float = 10.0

    def __post_init__(self):
        if self.kind not in ("mask", "noise", "both"):
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.mask_ms < 0 or not np.isfinite(self.snr_db):
            raise ValueError("mask_ms must be >= 0 and snr_db finite")


@dataclass
class DegradationInfo:
    mask_start: int | None = None
    mask_length: int = 0
    snr_db: float | None = None
    gain: float = 1.0
    extra: dict = field(default_factory=dict)


def active_power(x: np.ndarray, frame: int = 480, threshold_db: float = 40.0) -> float:
    """Mean power over frames within ``threshold_db`` of the loudest frame."""
    x = np.asarray(x, dtype=np.float64)
    n = max(1, x.size // frame)
    frames = x[: n * frame].reshape(n, -1) if x.size >= frame else x[None]
    p = (frames**2).mean(axis=1)
    if p.max() <= 0:
        return 0.0
    keep = p >= p.max() * 10.0 ** (-threshold_db / 10.0)
    return float(p[keep].mean())


def mix_at_snr(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> tuple[np.ndarray, float]:
    """Scale ``noise`` so that active-signal power over noise power equals ``snr_db``."""
    ps = active_power(signal)
    pn = float(np.mean(np.asarray(noise, dtype=np.float64) ** 2))
    if ps <= 0 or pn <= 0:
        raise ValueError("signal and noise must both carry energy")
    scale = np.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0)))
    return signal + scale * noise, scale


def degrade(clip: AudioClip, spec: DegradationSpec, rng: np.random.Generator, noise: np.ndarray | None = None):
    """Apply a zeroed mask and/or additive noise; returns ``(clip, DegradationInfo)``.

    The mask start is uniform over valid positions. Noise is mixed at the
    exact requested SNR; if the mixture would clip, the whole result is
    scaled down and the gain is recorded.
    """
    x = clip.samples.astype(np.float64).copy()
    info = DegradationInfo()
    if spec.kind in ("mask", "both") and spec.mask_ms > 0:
        length = int(round(spec.mask_ms * clip.sample_rate / 1000.0))
        if length > x.size:
            raise ValueError(f"mask of {spec.mask_ms} ms ({length} samples) exceeds clip length {x.size}")
        start = int(rng.integers(0, x.size - length + 1))
        x[start : start + length] = 0.0
        info.mask_start, info.mask_length = start, length
    if spec.kind in ("noise", "both"):
        if noise is None:
            noise = rng.standard_normal(x.size)
        noise = np.resize(np.asarray(noise, dtype=np.float64), x.size)
        x, _ = mix_at_snr(x, noise, spec.snr_db)
        info.snr_db = spec.snr_db
        peak = np.abs(x).max()
        if peak > 1.0:
            info.gain = 1.0 / peak
            x = x * info.gain
    return AudioClip(x.astype(np.float32), clip.sample_rate), info


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def synth_clip(rng: np.random.Generator, sample_rate: int = 48000, n: int = 49152, noise_floor: float = 3e-3) -> np.ndarray:
    """Sum of a few enveloped, slowly gliding sinusoids plus short noise bursts.

    A constant white background at ``noise_floor`` (RMS, before peak
    normalization) stands in for the self-noise of a real recording.
    """
    t = np.arange(n) / sample_rate
    y = np.zeros(n)
    for _ in range(rng.integers(2, 5)):
        f0 = rng.uniform(120.0, 3000.0)
        glide = rng.uniform(-0.1, 0.1)
        phase = 2 * np.pi * np.cumsum(f0 * (1 + glide * t)) / sample_rate
        env = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * t + rng.uniform(0, 2 * np.pi))
        y += rng.uniform(0.1, 0.3) * env * np.sin(phase + rng.uniform(0, 2 * np.pi))
    for _ in range(rng.integers(1, 4)):
        length = int(rng.uniform(0.02, 0.08) * sample_rate)
        start = int(rng.integers(0, n - length))
        y[start : start + length] += rng.uniform(0.05, 0.15) * rng.standard_normal(length) * np.hanning(length)
    y += noise_floor * rng.standard_normal(n)
    return (0.9 * y / np.abs(y).max()).astype(np.float32)


def toy_corpus(count: int = 10, seed: int = 0, sample_rate: int = 48000, n: int = 49152, noise_floor: float = 3e-3) -> list[AudioClip]:
    rng = np.random.default_rng(seed)
    return [AudioClip(synth_clip(rng, sample_rate, n, noise_floor), sample_rate) for _ in range(count)]


def write_corpus(directory, clips: list[AudioClip], prefix: str = "clip") -> list[Path]:
    directory = Path(directory)
    paths = []
    for i, clip in enumerate(clips):
        p = directory / f"{prefix}_{i:03d}.wav"
        save_wav(clip, p)
        paths.append(p)
    return paths


def random_crops(clips: list[AudioClip], batch: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """``(batch, 1, length)`` crops from randomly chosen clips."""
    out = np.empty((batch, 1, length), dtype=np.float32)
    for b in range(batch):
        s = clips[int(rng.integers(len(clips)))].samples
        if s.size < length:
            raise ValueError(f"clip of {s.size} samples shorter than crop length {length}")
        start = int(rng.integers(0, s.size - length + 1))
        out[b, 0] = s[start : start + length]
    return out
