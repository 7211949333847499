"""Rotary U-Net noise estimator ``eps_theta(z_t, z'_0, t)``.

The latent ``(B, d, L)`` is treated as a one-channel image over
(feature, time). Every stage is a residual block, a T-ConvNeXt block that
receives the timestep and the conditioning latent through FiLM, and a
linear attention layer with rotary position embeddings along time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import ChannelLayerNorm, Conv2d, ConvTranspose2d, GroupNorm, Linear, Module
from .tensor import Tensor, as_tensor, concat, matmul


@dataclass(frozen=True)
class UNetConfig:
    c_base: int = 64
    stages: int = 4
    heads: int = 4
    time_dim: int = 64
    norm_groups: int = 8
    drop_path: float = 0.0
    zero_init_out: bool = True

    def __post_init__(self):
        if self.c_base % self.norm_groups:
            raise ValueError("c_base must be divisible by norm_groups")
        if self.c_base % (2 * self.heads):
            raise ValueError("per-head channels must be even for rotary embeddings")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def multiple(self) -> int:
        return 2**self.stages


# ---------------------------------------------------------------------------
# functional pieces
# ---------------------------------------------------------------------------


def sinusoidal_embed(t, width: int) -> np.ndarray:
    """Interleaved ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]`` with ``w_i = 10000^(-2i/width)``.

    ``t`` may be a scalar or a 1-D array; the result is ``(len(t), width)``.
    """
    if width % 2:
        raise ValueError(f"embedding width must be even, got {width}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 10000.0 ** (-np.arange(width // 2) * 2.0 / width)
    ang = t[:, None] * freqs[None, :]
    out = np.empty((t.size, width))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def film(u: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """``(1 + gamma) * u + beta``."""
    u, gamma, beta = as_tensor(u), as_tensor(gamma), as_tensor(beta)
    try:
        np.broadcast_shapes(u.shape, gamma.shape, beta.shape)
    except ValueError as exc:
        raise ValueError(f"FiLM shapes incompatible: {u.shape}, {gamma.shape}, {beta.shape}") from exc
    return (gamma + 1.0) * u + beta


def rope_angles(positions, channels: int, base: float = 10000.0) -> np.ndarray:
    """``theta[n, i] = p_n * base^(-2i / channels)``, shape ``(n, channels / 2)``."""
    freqs = base ** (-np.arange(channels // 2) * 2.0 / channels)
    return np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]


def rope_rotate(x: Tensor, positions=None) -> Tensor:
    """Rotate channel pairs ``(2i, 2i+1)`` of ``(..., n, channels)`` by ``theta[n, i]``.

    ``positions`` defaults to ``0..n-1``.
    """
    x = as_tensor(x)
    n, ch = x.shape[-2], x.shape[-1]
    if ch % 2:
        raise ValueError(f"rotary embedding needs an even channel count, got {ch}")
    pos = np.arange(n) if positions is None else np.asarray(positions)
    if pos.shape != (n,):
        raise ValueError(f"expected {n} positions, got shape {pos.shape}")
    ang = rope_angles(pos, ch)
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)

    def rotate(a, s):
        ev, od = a[..., 0::2], a[..., 1::2]
        out = np.empty_like(a)
        out[..., 0::2] = ev * cos - od * s
        out[..., 1::2] = ev * s + od * cos
        return out

    # the adjoint of a rotation is the rotation by the opposite angle
    return Tensor._result(rotate(x.data, sin), (x,), lambda g: (rotate(g, -sin),), "rope")


def linear_attention(q: Tensor, k: Tensor, v: Tensor, positions=None) -> Tensor:
    """Kernelized attention over ``(..., n, dk)`` queries/keys and ``(..., n, dv)`` values.

    ``phi(RoPE(Q)) (phi(RoPE(K))^T V) / phi(RoPE(Q)) (phi(RoPE(K))^T 1)`` with
    ``phi = elu + 1``; cost is linear in ``n``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    qf = F.elu_plus_one(rope_rotate(q, positions))
    kf = F.elu_plus_one(rope_rotate(k, positions))
    kt = kf.swapaxes(-1, -2)
    num = matmul(qf, matmul(kt, v))
    den = matmul(qf, kt.sum(axis=-1, keepdims=True))
    return num / den


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


class ResBlock(Module):
    """GN -> SiLU -> conv3x3 -> +time bias -> GN -> SiLU -> conv3x3, plus residual."""

    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int, *, rng):
        self.norm1 = GroupNorm(groups, c_in)
        self.conv1 = Conv2d(c_in, c_out, 3, padding=1, rng=rng)
        self.time = Linear(time_dim, c_out, rng=rng)
        self.norm2 = GroupNorm(groups, c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, padding=1, rng=rng)
        self.skip = Conv2d(c_in, c_out, 1, rng=rng) if c_in != c_out else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb).reshape(temb.shape[0], -1, 1, 1)
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class TConvNeXtBlock(Module):
    """DWConv7 -> channel LayerNorm -> FiLM(t, z'_0) -> pw x4 -> GELU -> pw -> residual.

    FiLM parameters come from a 1x1 conv over ``concat[delta(t), psi(z'_0)]``
    where ``psi`` resizes the conditioning latent to the feature map.
    The last pointwise conv starts at zero, so the block is the identity at init.
    """

    def __init__(self, channels: int, time_dim: int, drop_path: float = 0.0, *, rng):
        self.dwconv = Conv2d(channels, channels, 7, padding=3, groups=channels, rng=rng)
        self.norm = ChannelLayerNorm(channels)
        self.film = Conv2d(time_dim + 1, 2 * channels, 1, rng=rng)
        self.pw1 = Conv2d(channels, 4 * channels, 1, rng=rng)
        self.pw2 = Conv2d(4 * channels, channels, 1, rng=rng)
        self.pw2.weight.data[:] = 0.0
        self.pw2.bias.data[:] = 0.0
        self.drop_path = drop_path
        self.rng = rng

    def forward(self, x: Tensor, t_emb: np.ndarray, cond: Tensor) -> Tensor:
        b, c, h, w = x.shape
        u = self.norm(self.dwconv(x))
        td = np.broadcast_to(np.asarray(t_emb, dtype=x.dtype)[:, :, None, None], (b, t_emb.shape[1], h, w))
        psi = F.interpolate_nearest(as_tensor(cond), (h, w))
        gb = self.film(concat([Tensor(np.ascontiguousarray(td)), psi], axis=1))
        y = film(u, gb[:, :c], gb[:, c:])
        y = self.pw2(F.gelu(self.pw1(y)))
        return x + F.drop_path(y, self.drop_path, self.training, self.rng)


class RotaryAttention(Module):
    """Multi-head linear attention along time, independently for each feature row."""

    def __init__(self, channels: int, heads: int, *, rng):
        if channels % heads or (channels // heads) % 2:
            raise ValueError(f"{channels} channels cannot form {heads} heads of even width")
        self.heads = heads
        self.norm = ChannelLayerNorm(channels)
        self.qkv = Conv2d(channels, 3 * channels, 1, rng=rng)
        self.out = Conv2d(channels, channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        hd = c // self.heads
        qkv = self.qkv(self.norm(x))  # (B, 3C, H, W)
        # -> (3, B, heads, H, W, hd): every (batch, head, row) is one length-W sequence
        qkv = qkv.reshape(b, 3, self.heads, hd, h, w).transpose(1, 0, 2, 4, 5, 3)
        att = linear_attention(qkv[0], qkv[1], qkv[2])
        att = att.transpose(0, 1, 4, 2, 3).reshape(b, c, h, w)
        return x + self.out(att)


class _Level(Module):
    def __init__(self, c_in: int, c_out: int, cfg: UNetConfig, *, rng):
        self.res = ResBlock(c_in, c_out, cfg.time_dim, cfg.norm_groups, rng=rng)
        self.convnext = TConvNeXtBlock(c_out, cfg.time_dim, cfg.drop_path, rng=rng)
        self.attn = RotaryAttention(c_out, cfg.heads, rng=rng)

    def forward(self, x, t_emb, temb_t, cond):
        return self.attn(self.convnext(self.res(x, temb_t), t_emb, cond))


class UNet(Module):
    """``(B, d, L) -> (B, d, L)`` noise prediction; ``d`` and ``L`` must be multiples of ``2**stages``."""

    def __init__(self, cfg: UNetConfig | None = None, seed: int = 0):
        cfg = cfg or UNetConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        c = cfg.c_base
        self.in_conv = Conv2d(1, c, 3, padding=1, rng=rng)
        self.down = []
        self.downsample = []
        for i in range(cfg.stages):
            ch = c * 2**i
            self.down.append(_Level(ch, ch, cfg, rng=rng))
            self.downsample.append(Conv2d(ch, 2 * ch, 3, stride=2, padding=1, rng=rng))
        mid = c * 2**cfg.stages
        self.mid = _Level(mid, mid, cfg, rng=rng)
        self.mid_res = ResBlock(mid, mid, cfg.time_dim, cfg.norm_groups, rng=rng)
        self.upsample = []
        self.up = []
        for i in reversed(range(cfg.stages)):
            ch = c * 2**i
            self.upsample.append(ConvTranspose2d(2 * ch, ch, 2, stride=2, rng=rng))
            self.up.append(_Level(2 * ch, ch, cfg, rng=rng))
        self.out_norm = GroupNorm(cfg.norm_groups, c)
        self.out_conv = Conv2d(c, 1, 3, padding=1, rng=rng)
        if cfg.zero_init_out:
            self.out_conv.weight.data[:] = 0.0
            self.out_conv.bias.data[:] = 0.0

    def _check(self, z: Tensor) -> None:
        m = self.cfg.multiple
        if z.ndim != 3:
            raise ValueError(f"expected (B, d, L) latent, got {z.shape}")
        _, d, n = z.shape
        if d % m or n % m:
            raise ValueError(
                f"latent dims (d={d}, L={n}) must be multiples of {m}; pad d by {(-d) % m} and L by {(-n) % m}"
            )

    def _embed(self, t, batch: int, dtype) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t), (batch,))
        return sinusoidal_embed(t, self.cfg.time_dim).astype(dtype)

    def encode_path(self, z_t: Tensor, cond: Tensor, t) -> tuple[Tensor, list[Tensor], np.ndarray]:
        """Run the down path and bottleneck; returns ``(bottleneck, skips, t_emb)``."""
        z_t, cond = as_tensor(z_t), as_tensor(cond)
        self._check(z_t)
        if cond.shape != z_t.shape:
            raise ValueError(f"conditioning latent {cond.shape} must match z_t {z_t.shape}")
        b, d, n = z_t.shape
        t_emb = self._embed(t, b, z_t.dtype)
        temb_t = Tensor(t_emb)
        cond4 = cond.reshape(b, 1, d, n)
        h = self.in_conv(z_t.reshape(b, 1, d, n))
        skips = []
        for level, ds in zip(self.down, self.downsample):
            h = level(h, t_emb, temb_t, cond4)
            skips.append(h)
            h = ds(h)
        h = self.mid(h, t_emb, temb_t, cond4)
        h = self.mid_res(h, temb_t)
        return h, skips, t_emb

    def forward(self, z_t: Tensor, cond: Tensor, t, skip_mask=None) -> Tensor:
        """``skip_mask[i] = 0`` zeroes the skip connection of down-stage ``i`` (ablation)."""
        h, skips, t_emb = self.encode_path(z_t, cond, t)
        b, d, n = as_tensor(z_t).shape
        temb_t = Tensor(t_emb)
        cond4 = as_tensor(cond).reshape(b, 1, d, n)
        for j, (us, level) in enumerate(zip(self.upsample, self.up)):
            i = self.cfg.stages - 1 - j
            skip = skips[i]
            if skip_mask is not None and not skip_mask[i]:
                skip = skip * 0.0
            h = level(concat([us(h), skip], axis=1), t_emb, temb_t, cond4)
        out = self.out_conv(F.silu(self.out_norm(h)))
        return out.reshape(b, d, n)


def parameter_groups(model: UNet) -> dict[str, list[str]]:
    """Checkpoint names grouped by top-level stage (``unet.<stage>.<param>``)."""
    groups: dict[str, list[str]] = {}
    for name, _ in model.named_parameters():
        groups.setdefault(name.split(".")[0], []).append(f"unet.{name}")
    return groups

