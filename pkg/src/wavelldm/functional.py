"""Differentiable operators built on :class:`~wavelldm.tensor.Tensor`.

Convolutions share one 2-D kernel-tap loop; the 1-D variants run it with a
unit height. Weight layouts follow the usual conventions: ``(C_out, C_in/groups,
k...)`` for convolutions and ``(C_in, C_out/groups, k...)`` for transposed
convolutions.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tensor import Tensor, as_tensor, concat, matmul, mean_reduce, sum_reduce  # noqa: F401

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------------------
# convolution kernels (numpy level)
# ---------------------------------------------------------------------------


def _out_size(n, k, s, p, d):
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def _tap(xp, i, j, dh, dw, sh, sw, ho, wo):
    return xp[..., i * dh : i * dh + sh * (ho - 1) + 1 : sh, j * dw : j * dw + sw * (wo - 1) + 1 : sw]


def _im2col(xp, kh, kw, dh, dw, sh, sw, ho, wo):
    """Gather kernel taps of a padded ``(B, G, Cg, Hp, Wp)`` array into ``(B, G, Cg*kh*kw, ho*wo)``."""
    b, g, cg = xp.shape[:3]
    cols = np.empty((b, g, cg, kh * kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j] = _tap(xp, i, j, dh, dw, sh, sw, ho, wo)
    return cols.reshape(b, g, cg * kh * kw, ho * wo)


def _col2im(cols, shape, kh, kw, dh, dw, sh, sw, ho, wo):
    b, g, cg = shape[:3]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(b, g, cg, kh * kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            _tap(out, i, j, dh, dw, sh, sw, ho, wo)[...] += cols[:, :, :, i * kw + j]
    return out


def _conv2d_fwd(x, w, stride, padding, dilation, groups):
    b, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    ho, wo = _out_size(h, kh, sh, ph, dh), _out_size(wd, kw, sw, pw, dw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    og = o // groups
    xg = xp.reshape(b, groups, cg, *xp.shape[2:])
    wg = w.reshape(groups, og, cg, kh, kw)
    if cg == 1 and og == 1:
        out = np.zeros((b, groups, 1, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += wg[None, :, :, 0, i, j, None, None] * _tap(xg, i, j, dh, dw, sh, sw, ho, wo)
        return out.reshape(b, o, ho, wo)
    if kh == kw == 1 and sh == sw == 1:
        cols = xg.reshape(b, groups, cg, ho * wo)
    else:
        cols = _im2col(xg, kh, kw, dh, dw, sh, sw, ho, wo)
    out = np.matmul(wg.reshape(groups, og, cg * kh * kw), cols)
    return out.reshape(b, o, ho, wo)


def _conv2d_bwd_input(g, w, in_shape, stride, padding, dilation, groups):
    b, c, h, wd = in_shape
    o, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    ho, wo = g.shape[2:]
    og = o // groups
    wg = w.reshape(groups, og, cg, kh, kw)
    padded = (b, groups, cg, h + 2 * ph, wd + 2 * pw)
    if cg == 1 and og == 1:
        gxp = np.zeros(padded, dtype=g.dtype)
        g5 = g.reshape(b, groups, 1, ho, wo)
        for i in range(kh):
            for j in range(kw):
                _tap(gxp, i, j, dh, dw, sh, sw, ho, wo)[...] += wg[None, :, :, 0, i, j, None, None] * g5
    else:
        wt = np.swapaxes(wg.reshape(groups, og, cg * kh * kw), -1, -2)
        dcols = np.matmul(wt, g.reshape(b, groups, og, ho * wo))
        if kh == kw == 1 and sh == sw == 1 and not (ph or pw):
            return dcols.reshape(b, c, h, wd)
        gxp = _col2im(dcols, padded, kh, kw, dh, dw, sh, sw, ho, wo)
    gx = gxp[:, :, :, ph : ph + h, pw : pw + wd]
    return np.ascontiguousarray(gx).reshape(b, c, h, wd)


def _conv2d_bwd_weight(g, x, w_shape, stride, padding, dilation, groups):
    b, c, h, wd = x.shape
    o, cg, kh, kw = w_shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    ho, wo = g.shape[2:]
    og = o // groups
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    xg = xp.reshape(b, groups, cg, *xp.shape[2:])
    gg = g.reshape(b, groups, og, ho * wo)
    if cg == 1 and og == 1:
        gw = np.zeros((groups, 1, 1, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = _tap(xg, i, j, dh, dw, sh, sw, ho, wo).reshape(b, groups, ho * wo)
                gw[:, 0, 0, i, j] = np.einsum("bgn,bgn->g", gg[:, :, 0], xs)
        return gw.reshape(w_shape)
    if kh == kw == 1 and sh == sw == 1:
        cols = xg.reshape(b, groups, cg, ho * wo)
    else:
        cols = _im2col(xg, kh, kw, dh, dw, sh, sw, ho, wo)
    gw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(axis=0)
    return gw.reshape(w_shape)


def _check_conv(x, w, groups, transposed=False):
    c_in = x.shape[1]
    if groups < 1 or c_in % groups:
        raise ValueError(f"input channels {c_in} not divisible by groups={groups}")
    expect = w.shape[0] if transposed else w.shape[1] * groups
    if expect != c_in:
        raise ValueError(f"weight {w.shape} expects {expect} input channels, input has {c_in}")
    if not transposed and w.shape[0] % groups:
        raise ValueError(f"output channels {w.shape[0]} not divisible by groups={groups}")


# ---------------------------------------------------------------------------
# convolution ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1, groups=1) -> Tensor:
    """2-D cross-correlation over ``(B, C, H, W)`` input."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    _check_conv(x, weight, groups)
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    kh, kw = weight.shape[2:]
    for n, k, s, p, d in zip(x.shape[2:], (kh, kw), stride, padding, dilation):
        if _out_size(n, k, s, p, d) < 1:
            raise ValueError(f"conv2d output would be empty: input {x.shape}, kernel {weight.shape}")
    xd, wd = x.data, weight.data
    out = _conv2d_fwd(xd, wd, stride, padding, dilation, groups)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gx = _conv2d_bwd_input(g, wd, xd.shape, stride, padding, dilation, groups) if x.requires_grad else None
        gw = _conv2d_bwd_weight(g, xd, wd.shape, stride, padding, dilation, groups) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._result(out, parents, backward, "conv2d")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1, groups=1) -> Tensor:
    """1-D cross-correlation over ``(B, C, L)`` input."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError(f"conv1d expects 3-D input and weight, got {x.shape} and {weight.shape}")
    y = conv2d(
        x.unsqueeze(2), weight.unsqueeze(2), bias, (1, stride), (0, padding), (1, dilation), groups
    )
    return y.squeeze(2)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1) -> Tensor:
    """Per-channel 2-D convolution; ``weight`` is ``(C, 1, kh, kw)``."""
    return conv2d(x, weight, bias, stride, padding, dilation, groups=as_tensor(x).shape[1])


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, output_padding=0, dilation=1, groups=1
) -> Tensor:
    """Adjoint of :func:`conv2d` (a.k.a. fractionally strided convolution)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    _check_conv(x, weight, groups, transposed=True)
    stride, padding, dilation, output_padding = _pair(stride), _pair(padding), _pair(dilation), _pair(output_padding)
    b, c_in, h, wd = x.shape
    c_out = weight.shape[1] * groups
    kh, kw = weight.shape[2:]
    ho = (h - 1) * stride[0] - 2 * padding[0] + dilation[0] * (kh - 1) + output_padding[0] + 1
    wo = (wd - 1) * stride[1] - 2 * padding[1] + dilation[1] * (kw - 1) + output_padding[1] + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv_transpose2d output would be empty for input {x.shape}")
    xd, wdat = x.data, weight.data
    out_shape = (b, c_out, ho, wo)
    out = _conv2d_bwd_input(xd, wdat, out_shape, stride, padding, dilation, groups)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gx = _conv2d_fwd(g, wdat, stride, padding, dilation, groups) if x.requires_grad else None
        if gx is not None and gx.shape != xd.shape:
            gx = gx[:, :, : xd.shape[2], : xd.shape[3]]
        gw = _conv2d_bwd_weight(xd, g, wdat.shape, stride, padding, dilation, groups) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._result(out, parents, backward, "conv_transpose2d")


def conv_transpose1d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, output_padding=0, dilation=1, groups=1
) -> Tensor:
    """1-D transposed convolution: ``L_out = (L-1)*stride - 2*padding + dilation*(k-1) + output_padding + 1``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError(f"conv_transpose1d expects 3-D input and weight, got {x.shape} and {weight.shape}")
    y = conv_transpose2d(
        x.unsqueeze(2), weight.unsqueeze(2), bias, (1, stride), (0, padding), (0, output_padding), (1, dilation), groups
    )
    return y.squeeze(2)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, axes=(-1,), gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance over ``axes``, then apply ``gamma``, ``beta``.

    ``gamma`` and ``beta`` must broadcast against ``x``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % x.ndim for a in axes)
    n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ValueError("layer_norm over a zero-sized axis")
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        # d xhat: g - mean(g) - xhat * mean(g * xhat), scaled by inv
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return ((g - gm - xhat * gxm) * inv,)

    out = Tensor._result(xhat.astype(xd.dtype, copy=False), (x,), backward, "layer_norm")
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Group normalization over ``(B, C, ...)``; affine params are per channel."""
    x = as_tensor(x)
    b, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    spatial = x.shape[2:]
    xg = x.reshape(b, groups, -1)
    y = layer_norm(xg, axes=(2,), eps=eps).reshape(x.shape)
    bshape = (1, c) + (1,) * len(spatial)
    if gamma is not None:
        y = y * as_tensor(gamma).reshape(bshape)
    if beta is not None:
        y = y + as_tensor(beta).reshape(bshape)
    return y


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    a = x.data
    cdf = 0.5 * (1.0 + erf(a * _SQRT1_2))
    pdf = np.exp(-0.5 * a * a) * _INV_SQRT_2PI
    return Tensor._result((a * cdf).astype(a.dtype), (x,), lambda g: (g * (cdf + a * pdf),), "gelu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    a = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * a))
    return Tensor._result(a * s, (x,), lambda g: (g * (s + a * s * (1.0 - s)),), "silu")


def tanh_act(x: Tensor) -> Tensor:
    return as_tensor(x).tanh()


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    a = x.data
    neg = alpha * np.expm1(np.minimum(a, 0.0))
    out = np.where(a > 0, a, neg)
    return Tensor._result(out, (x,), lambda g: (g * np.where(a > 0, 1.0, neg + alpha),), "elu")


def elu_plus_one(x: Tensor) -> Tensor:
    """``elu(x) + 1``, a strictly positive feature map.

    Equals ``exp(x)`` for ``x <= 0``; floored at the smallest normal float so
    the result stays positive where ``exp`` would underflow.
    """
    x = as_tensor(x)
    a = x.data
    e = np.exp(np.minimum(a, 0.0))
    out = np.maximum(np.where(a > 0, a + 1.0, e), np.finfo(a.dtype).tiny)
    return Tensor._result(out.astype(a.dtype), (x,), lambda g: (g * np.where(a > 0, 1.0, e),), "elu_plus_one")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    x = as_tensor(x)
    a = x.data
    return Tensor._result(np.where(a > 0, a, slope * a), (x,), lambda g: (np.where(a > 0, g, slope * g),), "leaky_relu")


# ---------------------------------------------------------------------------
# indexing / resampling
# ---------------------------------------------------------------------------


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index; the backward scatters with addition."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    n = x.shape[axis]

    def backward(g):
        moved = np.moveaxis(g, axis, -1)
        flat = moved.reshape(-1, moved.shape[-1])
        out = np.empty((flat.shape[0], n), dtype=g.dtype)
        for r in range(flat.shape[0]):
            out[r] = np.bincount(index, weights=flat[r], minlength=n)
        out = out.reshape(moved.shape[:-1] + (n,))
        return (np.moveaxis(out, -1, axis),)

    return Tensor._result(np.take(x.data, index, axis=axis), (x,), backward, "take")


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    """Source index for nearest-neighbour resizing: ``floor(i * n_in / n_out)``."""
    return (np.arange(n_out) * n_in) // n_out


def interpolate_nearest(x: Tensor, size) -> Tensor:
    """Nearest-neighbour resize of the trailing spatial axes to ``size``."""
    x = as_tensor(x)
    if isinstance(size, int):
        size = (size,)
    size = tuple(int(s) for s in size)
    if len(size) > x.ndim - 2:
        raise ValueError(f"cannot resize {len(size)} spatial axes of a {x.ndim}-D tensor")
    if any(s < 1 for s in size):
        raise ValueError(f"invalid target size {size}")
    out = x
    for k, s in enumerate(size):
        axis = x.ndim - len(size) + k
        if out.shape[axis] != s:
            out = take(out, nearest_index(out.shape[axis], s), axis)
    return out


def pad_last(x: Tensor, left: int, right: int, mode: str = "reflect") -> Tensor:
    """Pad the last axis; ``mode`` is ``reflect`` or ``constant`` (zeros)."""
    x = as_tensor(x)
    n = x.shape[-1]
    if mode == "constant":
        widths = [(0, 0)] * (x.ndim - 1) + [(left, right)]
        return Tensor._result(
            np.pad(x.data, widths), (x,), lambda g: (g[..., left : left + n],), "pad"
        )
    if mode != "reflect":
        raise ValueError(f"unknown pad mode {mode!r}")
    if left >= n or right >= n:
        raise ValueError(f"reflect padding ({left}, {right}) needs a longer signal than {n}")
    index = np.pad(np.arange(n), (left, right), mode="reflect")
    return take(x, index, axis=-1)


def drop_path(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Stochastic depth: drop whole samples with probability ``p`` and rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop_path probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return as_tensor(x)
    rng = rng or np.random.default_rng()
    x = as_tensor(x)
    keep = (rng.random(x.shape[0]) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep.reshape((-1,) + (1,) * (x.ndim - 1))


def round_ste(x: Tensor) -> Tensor:
    """Round to nearest integer; gradient passes straight through."""
    x = as_tensor(x)
    return Tensor._result(np.round(x.data), (x,), lambda g: (g,), "round_ste")


def magnitude(spec: Tensor) -> Tensor:
    """Modulus of a ``(..., 2)`` real/imaginary tensor; zero has zero gradient."""
    spec = as_tensor(spec)
    if spec.shape[-1] != 2:
        raise ValueError(f"expected trailing real/imag axis of size 2, got {spec.shape}")
    re, im = spec.data[..., 0], spec.data[..., 1]
    mag = np.sqrt(re * re + im * im)

    def backward(g):
        safe = np.where(mag > 0, mag, 1.0)
        scale = np.where(mag > 0, g / safe, 0.0)
        return (np.stack([scale * re, scale * im], axis=-1).astype(spec.dtype),)

    return Tensor._result(mag, (spec,), backward, "magnitude")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``(out, in)``."""
    y = matmul(as_tensor(x), as_tensor(weight).transpose(1, 0))
    return y + bias if bias is not None else y
