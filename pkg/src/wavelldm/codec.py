"""FireflyGAN-style neural audio codec.

Waveform -> log-mel -> ConvNeXt encoder -> strided downsampling -> grouped
finite scalar quantization -> transposed-conv upsampling -> HiFi-GAN-style
decoder with parallel multi-kernel blocks and a final tanh.

The continuous downsampled latent (``z_down``) is what the diffusion stage
works on; the decoder only ever sees quantized latents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsp
from . import functional as F
from .nn import ChannelLayerNorm, Conv1d, ConvTranspose1d, Module, Parameter
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class EncoderConfig:
    n_mel: int = 160
    widths: tuple[int, ...] = (64, 64)
    depths: tuple[int, ...] = (1, 1)
    d: int = 64
    drop_path: float = 0.0
    layer_scale: float = 0.1

    def __post_init__(self):
        if len(self.widths) != len(self.depths) or not self.widths:
            raise ValueError("widths and depths must be non-empty and the same length")


@dataclass(frozen=True)
class GfsqConfig:
    levels: tuple[int, ...] = (8, 5, 5, 5)
    groups: int = 1
    downsample: int = 2
    c_down: int = 32

    def __post_init__(self):
        if any(lv < 2 for lv in self.levels):
            raise ValueError(f"every level must be >= 2, got {self.levels}")
        if self.groups < 1 or self.downsample < 1 or self.c_down < 1:
            raise ValueError("groups, downsample and c_down must be positive")

    @property
    def channels(self) -> int:
        """Quantized channel count: ``len(levels) * groups``."""
        return len(self.levels) * self.groups


@dataclass(frozen=True)
class DecoderConfig:
    d: int = 64
    channels: int = 96
    rates: tuple[int, ...] = (8, 8, 4, 2)
    parallel_kernels: tuple[int, ...] = (3, 7, 11)

    def __post_init__(self):
        if any(r < 2 or r % 2 for r in self.rates):
            raise ValueError(f"upsample rates must be even, got {self.rates}")
        if self.channels % (2 ** len(self.rates)):
            raise ValueError("decoder channels must halve cleanly at every stage")

    @property
    def hop(self) -> int:
        return int(np.prod(self.rates))


@dataclass(frozen=True)
class CodecConfig:
    sample_rate: int = 48000
    stft: dsp.StftConfig = field(default_factory=lambda: dsp.StftConfig(2048, 2048, 512, center=False))
    n_mel: int = 160
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gfsq: GfsqConfig = field(default_factory=GfsqConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.decoder.hop != self.stft.hop_length:
            raise ValueError(f"decoder upsampling {self.decoder.hop} must equal hop length {self.stft.hop_length}")
        if self.encoder.n_mel != self.n_mel or self.encoder.d != self.decoder.d:
            raise ValueError("encoder/decoder widths inconsistent with n_mel / d")

    @property
    def mel(self) -> dsp.MelConfig:
        return dsp.MelConfig(sample_rate=self.sample_rate, n_mel=self.n_mel)

    @property
    def samples_per_latent(self) -> int:
        """Waveform samples per ``z_down`` frame."""
        return self.stft.hop_length * self.gfsq.downsample


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


class ConvNeXtBlock1D(Module):
    """Depthwise conv -> LN -> pointwise x4 -> GELU -> pointwise -> gamma -> drop path -> residual."""

    def __init__(self, channels: int, drop_path: float = 0.0, layer_scale: float = 0.1, *, rng):
        self.dwconv = Conv1d(channels, channels, 7, padding=3, groups=channels, rng=rng)
        self.norm = ChannelLayerNorm(channels)
        self.pw1 = Conv1d(channels, 4 * channels, 1, rng=rng)
        self.pw2 = Conv1d(4 * channels, channels, 1, rng=rng)
        self.gamma = Parameter(np.full(channels, layer_scale))
        self.drop_path = drop_path
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        h = self.pw2(F.gelu(self.pw1(self.norm(self.dwconv(x)))))
        h = h * self.gamma.reshape(1, -1, 1)
        return x + F.drop_path(h, self.drop_path, self.training, self.rng)


class ConvNeXtEncoder(Module):
    """``(B, n_mel, L) -> (B, d, L)``; every stage keeps the length."""

    def __init__(self, cfg: EncoderConfig, *, rng):
        self.cfg = cfg
        self.stem = Conv1d(cfg.n_mel, cfg.widths[0], 7, padding=3, rng=rng)
        self.stem_norm = ChannelLayerNorm(cfg.widths[0])
        self.transitions = []
        self.stages = []
        for i, (w, depth) in enumerate(zip(cfg.widths, cfg.depths)):
            if i > 0:
                self.transitions.append(_Transition(cfg.widths[i - 1], w, rng=rng))
            self.stages.append(_Stage([ConvNeXtBlock1D(w, cfg.drop_path, cfg.layer_scale, rng=rng) for _ in range(depth)]))
        self.out_norm = ChannelLayerNorm(cfg.widths[-1])
        self.proj = Conv1d(cfg.widths[-1], cfg.d, 1, rng=rng)

    def forward(self, mel: Tensor) -> Tensor:
        mel = as_tensor(mel)
        if mel.ndim != 3 or mel.shape[1] != self.cfg.n_mel:
            raise ValueError(f"encoder expects (B, {self.cfg.n_mel}, L), got {mel.shape}")
        h = self.stem_norm(self.stem(mel))
        for i, stage in enumerate(self.stages):
            if i > 0:
                h = self.transitions[i - 1](h)
            h = stage(h)
        return self.proj(self.out_norm(h))


class _Transition(Module):
    def __init__(self, c_in, c_out, *, rng):
        self.norm = ChannelLayerNorm(c_in)
        self.conv = Conv1d(c_in, c_out, 1, rng=rng)

    def forward(self, x):
        return self.conv(self.norm(x))


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


# ---------------------------------------------------------------------------
# down / up sampling and quantization
# ---------------------------------------------------------------------------


class FDown(Module):
    """Strided convolution ``(B, d, L) -> (B, C_down, L / factor)``."""

    def __init__(self, d: int, c_down: int, factor: int, *, rng):
        self.factor = factor
        self.conv = Conv1d(d, c_down, factor, stride=factor, rng=rng)

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[-1] % self.factor:
            raise ValueError(f"latent length {z.shape[-1]} not divisible by downsample factor {self.factor}")
        return self.conv(z)


class FUp(Module):
    """Project quantized channels back to ``C_down`` and upsample to ``(B, d, L)``.

    With ``factor == 1`` this is two pointwise projections.
    """

    def __init__(self, c: int, c_down: int, d: int, factor: int, *, rng):
        self.factor = factor
        self.proj = Conv1d(c, c_down, 1, rng=rng)
        if factor > 1:
            self.up = ConvTranspose1d(c_down, d, factor, stride=factor, rng=rng)
        else:
            self.up = Conv1d(c_down, d, 1, rng=rng)

    def forward(self, zq: Tensor) -> Tensor:
        return self.up(self.proj(zq))


@dataclass
class QuantizedLatent:
    """Quantized values (with straight-through gradient) and their integer indices."""

    values: Tensor
    indices: np.ndarray
    levels: tuple[int, ...]
    groups: int

    @property
    def codebooks(self) -> list[list[np.ndarray]]:
        return codebooks(self.levels, self.groups)


def half_levels(levels) -> np.ndarray:
    return np.array([lv // 2 for lv in levels], dtype=np.int64)


def codebooks(levels, groups: int) -> list[list[np.ndarray]]:
    """Per-group, per-channel lookup tables ``index -> quantized value``."""
    tables = [np.arange(-h, h + 1, dtype=np.float32) for h in half_levels(levels)]
    return [list(tables) for _ in range(groups)]


def gfsq_quantize(z: Tensor, cfg: GfsqConfig) -> QuantizedLatent:
    """Quantize ``(B, groups * len(levels), L)`` with ``round(floor(L_i / 2) * tanh(z))``.

    Rounding uses a straight-through gradient; the ``tanh`` scaling keeps its
    true gradient. Indices are the quantized values shifted by ``floor(L_i / 2)``.
    """
    z = as_tensor(z)
    c = len(cfg.levels)
    if z.ndim != 3 or z.shape[1] != cfg.channels:
        raise ValueError(f"expected (B, {cfg.channels}, L) latent for {cfg.groups} groups of {c}, got {z.shape}")
    half = np.tile(half_levels(cfg.levels), cfg.groups).astype(z.dtype)
    scaled = z.tanh() * half.reshape(1, -1, 1)
    q = F.round_ste(scaled)
    indices = (q.data.astype(np.int64) + half.astype(np.int64).reshape(1, -1, 1))
    return QuantizedLatent(q, indices, tuple(cfg.levels), cfg.groups)


def codebook_lookup(indices: np.ndarray, levels, groups: int) -> np.ndarray:
    """Decode integer indices through the per-group codebooks (bit-exact inverse of quantization)."""
    indices = np.asarray(indices)
    c = len(levels)
    if indices.ndim != 3 or indices.shape[1] != c * groups:
        raise ValueError(f"expected (B, {c * groups}, L) indices, got {indices.shape}")
    books = codebooks(levels, groups)
    out = np.empty(indices.shape, dtype=np.float32)
    for g in range(groups):
        for i in range(c):
            ch = g * c + i
            table = books[g][i]
            idx = indices[:, ch]
            if idx.min() < 0 or idx.max() >= len(table):
                raise IndexError(f"index out of range for channel {ch}: table has {len(table)} entries")
            out[:, ch] = table[idx]
    return out


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


class ParallelBlock(Module):
    """Parallel same-width convolutions with different kernels, summed, then SiLU."""

    def __init__(self, channels: int, kernels=(3, 7, 11), *, rng):
        self.branches = [Conv1d(channels, channels, k, padding=k // 2, rng=rng) for k in kernels]

    def forward(self, x: Tensor) -> Tensor:
        # sum of centred "same" convolutions == one convolution with the summed, zero-padded kernels
        kmax = max(b.weight.shape[-1] for b in self.branches)
        weight = None
        bias = None
        for b in self.branches:
            p = (kmax - b.weight.shape[-1]) // 2
            w = F.pad_last(b.weight, p, p, mode="constant") if p else b.weight
            weight = w if weight is None else weight + w
            bias = b.bias if bias is None else bias + b.bias
        return F.silu(F.conv1d(x, weight, bias, padding=kmax // 2))


class Decoder(Module):
    """``(B, d, L) -> (B, 1, L * prod(rates))`` waveform in ``[-1, 1]``."""

    def __init__(self, cfg: DecoderConfig, *, rng):
        self.cfg = cfg
        self.conv_pre = Conv1d(cfg.d, cfg.channels, 7, padding=3, rng=rng)
        self.ups = []
        self.blocks = []
        ch = cfg.channels
        for r in cfg.rates:
            self.ups.append(ConvTranspose1d(ch, ch // 2, 2 * r, stride=r, padding=r // 2, rng=rng))
            ch //= 2
            self.blocks.append(ParallelBlock(ch, cfg.parallel_kernels, rng=rng))
        self.conv_post = Conv1d(ch, 1, 7, padding=3, rng=rng)

    def forward(self, zq: Tensor) -> Tensor:
        zq = as_tensor(zq)
        if zq.ndim != 3 or zq.shape[1] != self.cfg.d:
            raise ValueError(f"decoder expects (B, {self.cfg.d}, L), got {zq.shape}")
        h = self.conv_pre(zq)
        for up, block in zip(self.ups, self.blocks):
            h = block(up(F.silu(h)))
        return self.conv_post(F.silu(h)).tanh()


# ---------------------------------------------------------------------------
# full codec
# ---------------------------------------------------------------------------


@dataclass
class CodecOutput:
    x_hat: Tensor
    z: Tensor
    z_down: Tensor
    z_hat: Tensor
    indices: np.ndarray


class Codec(Module):
    def __init__(self, cfg: CodecConfig | None = None, seed: int = 0):
        cfg = cfg or CodecConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        g = cfg.gfsq
        self.encoder = ConvNeXtEncoder(cfg.encoder, rng=rng)
        self.f_down = FDown(cfg.encoder.d, g.c_down, g.downsample, rng=rng)
        self.pre_quant = Conv1d(g.c_down, g.channels, 1, rng=rng)
        self.f_up = FUp(g.channels, g.c_down, cfg.encoder.d, g.downsample, rng=rng)
        self.decoder = Decoder(cfg.decoder, rng=rng)

    def check_length(self, n: int) -> None:
        unit = self.cfg.samples_per_latent
        if n % unit:
            raise ValueError(
                f"waveform length {n} must be a multiple of {unit} samples; pad by {(-n) % unit} (see pipeline.pad_to_multiple)"
            )

    def mel(self, x: Tensor) -> Tensor:
        """Log-mel front-end producing exactly ``N / hop`` frames."""
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, N) waveform, got {x.shape}")
        st = self.cfg.stft
        pad = (st.n_fft - st.hop_length) // 2
        xp = F.pad_last(x.reshape(x.shape[0], x.shape[2]), pad, pad, mode="reflect")
        return dsp.log_mel_spectrogram(xp, st, self.cfg.mel)

    def encode(self, mel: Tensor) -> Tensor:
        return self.encoder(mel)

    def latent(self, x: Tensor) -> Tensor:
        """Continuous ``z_down`` for a waveform batch."""
        self.check_length(as_tensor(x).shape[-1])
        return self.f_down(self.encode(self.mel(x)))

    def quantize(self, z_down: Tensor) -> QuantizedLatent:
        return gfsq_quantize(self.pre_quant(z_down), self.cfg.gfsq)

    def decode(self, zq: Tensor) -> Tensor:
        return self.decoder(zq)

    def decode_latent(self, z_down: Tensor) -> Tensor:
        """``z_down -> quantize -> f_up -> decoder``."""
        return self.decode(self.f_up(self.quantize(z_down).values))

    def forward(self, x: Tensor) -> CodecOutput:
        x = as_tensor(x)
        self.check_length(x.shape[-1])
        z = self.encode(self.mel(x))
        z_down = self.f_down(z)
        q = self.quantize(z_down)
        x_hat = self.decode(self.f_up(q.values))
        return CodecOutput(x_hat, z, z_down, q.values, q.indices)
