"""Objective quality metrics: log-spectral distance and STOI, plus the report table."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.signal import resample_poly

from .dsp import StftConfig, hann_window

# ---------------------------------------------------------------------------
# LSD
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LsdConfig:
    stft: StftConfig = StftConfig(2048, 2048, 512, center=True)
    floor: float = 1e-10

    def __post_init__(self):
        if self.floor <= 0:
            raise ValueError("power floor must be positive")


def power_spectrogram(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """``|STFT|^2`` of a 1-D signal, shape ``(frames, bins)``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if cfg.center:
        if x.size <= cfg.n_fft // 2:
            raise ValueError(f"signal of {x.size} samples too short for n_fft={cfg.n_fft}")
        x = np.pad(x, cfg.n_fft // 2, mode="reflect")
    if x.size < cfg.n_fft:
        raise ValueError(f"signal of {x.size} samples is shorter than one frame ({cfg.n_fft})")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop_length]
    spec = np.fft.rfft(frames * hann_window(cfg.win_length, cfg.n_fft), axis=-1)
    return spec.real**2 + spec.imag**2


def lsd(reference: np.ndarray, estimate: np.ndarray, cfg: LsdConfig = LsdConfig()) -> float:
    """Frame mean of ``sqrt(mean_bins (log10 P_ref - log10 P_est)^2)`` with floored powers."""
    reference = np.asarray(reference).reshape(-1)
    estimate = np.asarray(estimate).reshape(-1)
    if reference.size != estimate.size:
        raise ValueError(f"length mismatch: reference {reference.size} vs estimate {estimate.size}")
    if reference.size == 0:
        raise ValueError("empty signal")
    pr = np.log10(np.maximum(power_spectrogram(reference, cfg.stft), cfg.floor))
    pe = np.log10(np.maximum(power_spectrogram(estimate, cfg.stft), cfg.floor))
    return float(np.mean(np.sqrt(np.mean((pr - pe) ** 2, axis=1))))


# ---------------------------------------------------------------------------
# STOI
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StoiConfig:
    rate: int = 10000
    frame: int = 256
    n_fft: int = 512
    bands: int = 15
    min_freq: float = 150.0
    segment: int = 30  # frames, 384 ms at 10 kHz with hop 128
    beta_db: float = -15.0
    dyn_range_db: float = 40.0


_EPS = np.finfo(np.float64).eps


def third_octave_bands(cfg: StoiConfig) -> np.ndarray:
    """``(bands, n_fft//2 + 1)`` 0/1 matrix; band edges snap to the nearest FFT bin."""
    f = np.linspace(0, cfg.rate, cfg.n_fft + 1)[: cfg.n_fft // 2 + 1]
    k = np.arange(cfg.bands, dtype=np.float64)
    lo = cfg.min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = cfg.min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((cfg.bands, f.size))
    for i in range(cfg.bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _frames(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    # frame starts run over range(0, len - frame, hop), as in the reference implementation
    starts = np.arange(0, max(x.size - frame, 0), hop)
    return x[starts[:, None] + np.arange(frame)[None, :]]


def _window(frame: int) -> np.ndarray:
    return np.hanning(frame + 2)[1:-1]


def remove_silent_frames(x: np.ndarray, y: np.ndarray, cfg: StoiConfig) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames of ``x`` more than ``dyn_range_db`` below its loudest frame (from both signals)."""
    hop = cfg.frame // 2
    w = _window(cfg.frame)
    xf = _frames(x, cfg.frame, hop) * w
    yf = _frames(y, cfg.frame, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy - energy.max() + cfg.dyn_range_db > 0
    xf, yf = xf[keep], yf[keep]

    def overlap_add(frames):
        n = frames.shape[0]
        out = np.zeros((n - 1) * hop + cfg.frame) if n else np.zeros(0)
        for i in range(n):
            out[i * hop : i * hop + cfg.frame] += frames[i]
        return out

    return overlap_add(xf), overlap_add(yf)


def _band_envelopes(x: np.ndarray, cfg: StoiConfig, obm: np.ndarray) -> np.ndarray:
    frames = _frames(x, cfg.frame, cfg.frame // 2) * _window(cfg.frame)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)  # (bands, frames)


def _to_rate(x: np.ndarray, sample_rate: int, rate: int) -> np.ndarray:
    if sample_rate == rate:
        return x
    r = Fraction(rate, sample_rate)
    return resample_poly(x, r.numerator, r.denominator)


def stoi(reference: np.ndarray, estimate: np.ndarray, sample_rate: int, cfg: StoiConfig = StoiConfig()) -> float:
    """Short-time objective intelligibility of ``estimate`` against a clean ``reference``."""
    x = np.asarray(reference, dtype=np.float64).reshape(-1)
    y = np.asarray(estimate, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: reference {x.size} vs estimate {y.size}")
    x = _to_rate(x, sample_rate, cfg.rate)
    y = _to_rate(y, sample_rate, cfg.rate)
    x, y = remove_silent_frames(x, y, cfg)
    obm = third_octave_bands(cfg)
    xb = _band_envelopes(x, cfg, obm) if x.size >= cfg.frame else np.zeros((cfg.bands, 0))
    yb = _band_envelopes(y, cfg, obm) if y.size >= cfg.frame else np.zeros((cfg.bands, 0))
    n = xb.shape[1]
    if n < cfg.segment:
        raise ValueError(
            f"only {n} active frames after silence removal; STOI needs at least {cfg.segment} "
            f"({cfg.segment * cfg.frame // 2 / cfg.rate * 1000:.0f} ms of active signal)"
        )
    idx = np.arange(cfg.segment)[None, :] + np.arange(n - cfg.segment + 1)[:, None]
    xs = xb[:, idx].transpose(1, 0, 2)  # (segments, bands, N)
    ys = yb[:, idx].transpose(1, 0, 2)
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    clip = 10 ** (-cfg.beta_db / 20)
    yp = np.minimum(ys * scale, xs * (1 + clip))
    yp = yp - yp.mean(axis=2, keepdims=True)
    xc = xs - xs.mean(axis=2, keepdims=True)
    yp /= np.linalg.norm(yp, axis=2, keepdims=True) + _EPS
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + _EPS
    return float(np.sum(yp * xc) / (xs.shape[0] * xs.shape[1]))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

REPORT_FIELDS = ("path", "lsd", "stoi")
SUMMARY_KEY = "MEAN"


@dataclass
class MetricRow:
    path: str
    lsd: float
    stoi: float


def evaluate_set(pairs: Iterable[tuple[str, np.ndarray, np.ndarray]], sample_rate: int) -> tuple[list[MetricRow], MetricRow]:
    """Score ``(name, reference, estimate)`` triples; returns per-file rows and their mean."""
    rows = [MetricRow(str(name), lsd(ref, est), stoi(ref, est, sample_rate)) for name, ref, est in pairs]
    if not rows:
        raise ValueError("evaluate_set needs at least one pair")
    return rows, summarize(rows)


def summarize(rows: list[MetricRow]) -> MetricRow:
    return MetricRow(SUMMARY_KEY, float(np.mean([r.lsd for r in rows])), float(np.mean([r.stoi for r in rows])))


def write_report(path, rows: list[MetricRow], summary: MetricRow | None = None) -> None:
    """Tab-separated: header ``path lsd stoi``, one line per file, then a ``MEAN`` line."""
    summary = summary or summarize(rows)
    lines = ["\t".join(REPORT_FIELDS)]
    for r in [*rows, summary]:
        if "\t" in r.path or "\n" in r.path:
            raise ValueError(f"path {r.path!r} contains a tab or newline")
        lines.append(f"{r.path}\t{r.lsd:.9g}\t{r.stoi:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> tuple[list[MetricRow], MetricRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != REPORT_FIELDS:
        raise ValueError(f"{path}: not a metrics report (header must be {' '.join(REPORT_FIELDS)})")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{i}: expected 3 fields, got {len(parts)}")
        rows.append(MetricRow(parts[0], float(parts[1]), float(parts[2])))
    if not rows or rows[-1].path != SUMMARY_KEY:
        raise ValueError(f"{path}: missing {SUMMARY_KEY} summary line")
    return rows[:-1], rows[-1]
