import numpy as np
import pytest

from wavelldm import estimator as E
from wavelldm.gradcheck import max_gradient_error, random_projection
from wavelldm.tensor import Tensor, no_grad


def quadratic_attention(q, k, v, positions=None):
    """O(n^2) reference: explicit kernel weights, rotary embedding applied per vector."""
    n, dk = q.shape[-2:]
    pos = np.arange(n) if positions is None else positions
    freqs = 10000.0 ** (-np.arange(dk // 2) * 2.0 / dk)

    def rot(x, p):
        out = x.copy()
        for i, f in enumerate(freqs):
            c, s = np.cos(p * f), np.sin(p * f)
            out[2 * i] = c * x[2 * i] - s * x[2 * i + 1]
            out[2 * i + 1] = s * x[2 * i] + c * x[2 * i + 1]
        return out

    def phi(x):
        return np.where(x > 0, x + 1.0, np.exp(x))

    out = np.zeros(q.shape[:-1] + (v.shape[-1],))
    for idx in np.ndindex(q.shape[:-2]):
        qs = np.array([phi(rot(q[idx][i], pos[i])) for i in range(n)])
        ks = np.array([phi(rot(k[idx][j], pos[j])) for j in range(n)])
        for i in range(n):
            w = np.array([qs[i] @ ks[j] for j in range(n)])
            out[idx][i] = (w / w.sum()) @ v[idx]
    return out


# -- timestep embedding ------------------------------------------------------


def test_embedding_at_zero():
    e = E.sinusoidal_embed(0, 16)[0]
    assert (e[0::2] == 0).all() and (e[1::2] == 1).all()


def test_embedding_is_injective_and_bounded():
    e = E.sinusoidal_embed(np.arange(1, 1001), 64)
    assert len({tuple(r) for r in e.round(12)}) == 1000
    assert np.abs(e).max() <= 1.0


def test_embedding_rejects_odd_width():
    with pytest.raises(ValueError):
        E.sinusoidal_embed(3, 7)


# -- FiLM --------------------------------------------------------------------


def test_film_cases(rng):
    u = rng.standard_normal((2, 3, 4, 5))
    b = rng.standard_normal((2, 3, 4, 5))
    g = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_array_equal(E.film(Tensor(u), Tensor(np.zeros_like(u)), Tensor(np.zeros_like(u))).data, Tensor(u).data)
    np.testing.assert_allclose(E.film(Tensor(u), Tensor(-np.ones_like(u)), Tensor(b)).data, Tensor(b).data)
    np.testing.assert_allclose(E.film(Tensor(u), Tensor(g), Tensor(b)).data, (1 + g) * u + b, rtol=1e-5, atol=1e-6)


def test_film_shape_mismatch():
    with pytest.raises(ValueError, match="FiLM"):
        E.film(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 3))))


# -- T-ConvNeXt --------------------------------------------------------------


def _convnext_inputs(rng, c=8, h=8, w=8, tdim=6):
    x = Tensor(rng.standard_normal((2, c, h, w)), requires_grad=True)
    temb = E.sinusoidal_embed(np.array([3, 17]), tdim)
    cond = Tensor(rng.standard_normal((2, 1, 16, 16)))
    return x, temb, cond


def test_tconvnext_identity_at_init(rng):
    blk = E.TConvNeXtBlock(8, 6, rng=np.random.default_rng(0))
    x, temb, cond = _convnext_inputs(rng)
    y = blk(x, temb, cond)
    assert y.shape == x.shape
    np.testing.assert_array_equal(y.data, x.data)


def test_tconvnext_uses_conditioning(rng):
    blk = E.TConvNeXtBlock(8, 6, rng=np.random.default_rng(0))
    blk.pw2.weight.data[:] = np.random.default_rng(1).normal(scale=0.1, size=blk.pw2.weight.shape)
    x, temb, cond = _convnext_inputs(rng)
    a = blk(x, temb, cond).data
    b = blk(x, temb, Tensor(cond.data + 1.0)).data
    c = blk(x, E.sinusoidal_embed(np.array([4, 17]), 6), cond).data
    assert not np.allclose(a, b) and not np.allclose(a[0], c[0]) and np.allclose(a[1], c[1])


@pytest.mark.gradcheck
def test_tconvnext_gradients(f64, rng):
    blk = E.TConvNeXtBlock(4, 6, rng=np.random.default_rng(0))
    blk.pw2.weight.data[:] = np.random.default_rng(1).normal(scale=0.3, size=blk.pw2.weight.shape)
    x, temb, cond = _convnext_inputs(rng, c=4)
    w = random_projection(x.shape)
    params = [x, blk.dwconv.weight, blk.film.weight, blk.pw1.bias, blk.norm.gamma]
    assert max_gradient_error(lambda: (blk(x, temb, cond) * w).sum(), params, step=1e-6) < 1e-3


# -- RoPE --------------------------------------------------------------------


def test_rope_position_zero_is_identity(rng):
    v = rng.standard_normal((1, 6))
    np.testing.assert_array_equal(E.rope_rotate(Tensor(v)).data, Tensor(v).data)


def test_rope_preserves_norm(rng):
    v = rng.standard_normal((100, 37, 16)).astype(np.float32)
    out = E.rope_rotate(Tensor(v)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(v, axis=-1), rtol=1e-5)


def test_rope_relative_position_property(rng):
    for _ in range(100):
        q, k = rng.standard_normal((2, 1, 8))
        m, n = rng.integers(0, 50, size=2)
        pos = lambda p: np.array([p])  # noqa: E731
        d0 = E.rope_rotate(Tensor(q), pos(m)).data @ E.rope_rotate(Tensor(k), pos(n)).data.T
        d5 = E.rope_rotate(Tensor(q), pos(m + 5)).data @ E.rope_rotate(Tensor(k), pos(n + 5)).data.T
        assert abs(d0 - d5).max() < 1e-5


def test_rope_rejects_odd_channels():
    with pytest.raises(ValueError, match="even"):
        E.rope_rotate(Tensor(np.zeros((3, 5))))


@pytest.mark.gradcheck
def test_rope_gradient(f64, rng):
    x = Tensor(rng.standard_normal((2, 5, 6)), requires_grad=True)
    w = random_projection(x.shape)
    assert max_gradient_error(lambda: (E.rope_rotate(x) * w).sum(), [x]) < 1e-3


# -- linear attention --------------------------------------------------------


def test_attention_single_position_returns_value(rng):
    q, k, v = (rng.standard_normal((3, 1, 4)) for _ in range(3))
    np.testing.assert_allclose(E.linear_attention(Tensor(q), Tensor(k), Tensor(v)).data, Tensor(v).data, rtol=1e-6)


def test_attention_matches_quadratic_oracle(f64):
    rng = np.random.default_rng(11)
    for _ in range(50):
        heads = int(rng.integers(1, 5))
        n = int(rng.integers(1, 33))
        dk = 2 * int(rng.integers(1, 5))
        dv = int(rng.integers(1, 6))
        q, k = rng.standard_normal((2, heads, n, dk))
        v = rng.standard_normal((heads, n, dv))
        got = E.linear_attention(Tensor(q), Tensor(k), Tensor(v)).data
        assert np.abs(got - quadratic_attention(q, k, v)).max() < 1e-5


def test_attention_output_is_convex_combination(rng):
    q, k = rng.standard_normal((2, 2, 20, 4))
    v = rng.standard_normal((2, 20, 3))
    out = E.linear_attention(Tensor(q), Tensor(k), Tensor(v)).data
    lo, hi = v.min(axis=1, keepdims=True), v.max(axis=1, keepdims=True)
    assert (out >= lo - 1e-5).all() and (out <= hi + 1e-5).all()


@pytest.mark.gradcheck
def test_attention_gradients(f64, rng):
    q, k, v = (Tensor(rng.standard_normal((2, 7, 4)), requires_grad=True) for _ in range(3))
    w = random_projection((2, 7, 4))
    assert max_gradient_error(lambda: (E.linear_attention(q, k, v) * w).sum(), [q, k, v]) < 1e-3


@pytest.mark.gradcheck
def test_rotary_attention_module_gradients(f64, rng):
    att = E.RotaryAttention(8, 2, rng=np.random.default_rng(0))
    x = Tensor(rng.standard_normal((1, 8, 3, 6)), requires_grad=True)
    w = random_projection(x.shape)
    assert max_gradient_error(lambda: (att(x) * w).sum(), [x, att.qkv.weight, att.out.bias]) < 1e-3


def test_rotary_attention_rows_are_independent(rng):
    att = E.RotaryAttention(8, 4, rng=np.random.default_rng(0))
    x = rng.standard_normal((1, 8, 3, 6))
    y = att(Tensor(x)).data
    x2 = x.copy()
    x2[:, :, 2] += 1.0
    y2 = att(Tensor(x2)).data
    np.testing.assert_array_equal(y[:, :, :2], y2[:, :, :2])


# -- U-Net -------------------------------------------------------------------


TINY = E.UNetConfig(c_base=8, time_dim=8, zero_init_out=False)


def test_unet_shape_and_bottleneck_at_full_width():
    model = E.UNet(E.UNetConfig(c_base=64), seed=0)
    z = Tensor(np.random.default_rng(0).standard_normal((2, 16, 32)))
    with no_grad():
        h, skips, _ = model.encode_path(z, z, np.array([1, 500]))
        out = model(z, z, np.array([1, 500]))
    assert h.shape == (2, 1024, 1, 2)
    assert [s.shape[1] for s in skips] == [64, 128, 256, 512]
    assert out.shape == (2, 16, 32)


def test_unet_rejects_indivisible_dims():
    model = E.UNet(TINY, seed=0)
    with pytest.raises(ValueError, match="pad d by 0 and L by 6"):
        model(Tensor(np.zeros((1, 16, 26))), Tensor(np.zeros((1, 16, 26))), 1)


def test_unet_zero_init_output_is_zero():
    model = E.UNet(E.UNetConfig(c_base=8, time_dim=8), seed=0)
    z = Tensor(np.random.default_rng(0).standard_normal((1, 16, 16)))
    assert not model(z, z, 5).data.any()


def test_unet_skip_ablation_changes_output():
    model = E.UNet(TINY, seed=0)
    rng = np.random.default_rng(0)
    z, c = Tensor(rng.standard_normal((1, 16, 32))), Tensor(rng.standard_normal((1, 16, 32)))
    with no_grad():
        full = model(z, c, 7).data
        for i in range(4):
            mask = [True] * 4
            mask[i] = False
            assert np.abs(model(z, c, 7, skip_mask=mask).data - full).max() > 1e-6, f"skip {i} is dead"


def test_unet_depends_on_conditioning_and_time():
    model = E.UNet(TINY, seed=0)
    rng = np.random.default_rng(0)
    # the conditioning path opens once the zero-initialized T-ConvNeXt outputs move
    for m in model.modules():
        if isinstance(m, E.TConvNeXtBlock):
            m.pw2.weight.data[:] = rng.normal(scale=0.1, size=m.pw2.weight.shape)
    z, c = Tensor(rng.standard_normal((1, 16, 16))), Tensor(rng.standard_normal((1, 16, 16)))
    with no_grad():
        a = model(z, c, 7).data
        assert not np.allclose(a, model(z, Tensor(c.data * 2), 7).data)
        assert not np.allclose(a, model(z, c, 8).data)


@pytest.mark.gradcheck
def test_unet_gradients_tiny(f64):
    model = E.UNet(TINY, seed=0)
    rng = np.random.default_rng(0)
    for m in model.modules():
        if isinstance(m, E.TConvNeXtBlock):
            m.pw2.weight.data[:] = rng.normal(scale=0.1, size=m.pw2.weight.shape)
    z = Tensor(rng.standard_normal((1, 16, 16)), requires_grad=True)
    c = Tensor(rng.standard_normal((1, 16, 16)))
    w = random_projection((1, 16, 16))
    params = [z, model.out_conv.bias, model.mid.attn.out.bias, model.down[0].convnext.film.bias, model.up[2].res.time.weight]
    assert max_gradient_error(lambda: (model(z, c, 9) * w).sum(), params, step=1e-6) < 1e-3


def test_checkpoint_names_are_grouped_by_stage():
    groups = E.parameter_groups(E.UNet(TINY, seed=0))
    assert {"in_conv", "down", "downsample", "mid", "up", "upsample", "out_conv"} <= set(groups)
    assert all(n.startswith("unet.") for names in groups.values() for n in names)
