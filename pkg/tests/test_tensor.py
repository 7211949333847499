import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavelldm import functional as F
from wavelldm.gradcheck import max_gradient_error, random_projection
from wavelldm.tensor import NonFiniteError, Tensor, concat, matmul, tape


# -- brute-force oracles -------------------------------------------------------


def conv1d_loops(x, w, b, stride=1, padding=0, dilation=1, groups=1):
    bsz, cin, n = x.shape
    cout, cg, k = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    lout = (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    og = cout // groups
    y = np.zeros((bsz, cout, lout))
    for bi in range(bsz):
        for o in range(cout):
            g = o // og
            for t in range(lout):
                acc = b[o] if b is not None else 0.0
                for c in range(cg):
                    for kk in range(k):
                        acc += w[o, c, kk] * xp[bi, g * cg + c, t * stride + kk * dilation]
                y[bi, o, t] = acc
    return y


def conv2d_loops(x, w, b, stride=1, padding=0):
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    y = np.zeros((bsz, cout, ho, wo))
    for bi in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    y[bi, o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return y


def conv_transpose1d_scatter(x, w, stride, padding):
    bsz, cin, n = x.shape
    _, cout, k = w.shape
    full = np.zeros((bsz, cout, (n - 1) * stride + k))
    for bi in range(bsz):
        for c in range(cin):
            for t in range(n):
                full[bi, :, t * stride : t * stride + k] += x[bi, c, t] * w[c]
    return full[:, :, padding : full.shape[2] - padding]


# -- convolution -------------------------------------------------------------


def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 7))
    y = F.conv1d(Tensor(x), Tensor(np.ones((1, 1, 1))), Tensor([0.0]))
    np.testing.assert_allclose(y.data, x, rtol=1e-6)


def test_conv1d_zero_input_gives_bias():
    w = np.random.default_rng(1).standard_normal((3, 2, 3))
    bias = np.array([0.5, -1.0, 2.0])
    y = F.conv1d(Tensor(np.zeros((1, 2, 6))), Tensor(w), Tensor(bias), padding=1)
    np.testing.assert_allclose(y.data, np.broadcast_to(bias[None, :, None], (1, 3, 6)))


@pytest.mark.parametrize(
    "stride,padding,dilation,groups", [(1, 0, 1, 1), (2, 1, 1, 1), (1, 2, 2, 1), (1, 1, 1, 2), (3, 2, 1, 2)]
)
def test_conv1d_matches_loop_oracle(f64, stride, padding, dilation, groups):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 5 + 4 * stride))
    w = rng.standard_normal((4, 2 // groups, 3))
    b = rng.standard_normal(4)
    y = F.conv1d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation, groups)
    np.testing.assert_allclose(y.data, conv1d_loops(x, w, b, stride, padding, dilation, groups), atol=1e-12)


def test_conv1d_small_random_case():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 5)).astype(np.float32)
    w = rng.standard_normal((2, 2, 3)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    y = F.conv1d(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(y.data, conv1d_loops(x, w, b), atol=1e-5)


def test_conv1d_shape_errors():
    with pytest.raises(ValueError, match="input channels"):
        F.conv1d(Tensor(np.zeros((1, 3, 8))), Tensor(np.zeros((2, 2, 3))))
    with pytest.raises(ValueError, match="groups"):
        F.conv1d(Tensor(np.zeros((1, 3, 8))), Tensor(np.zeros((2, 1, 3))), groups=2)
    with pytest.raises(ValueError, match="empty"):
        F.conv1d(Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros((1, 1, 5))))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_loop_oracle(f64, stride, padding):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    y = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    np.testing.assert_allclose(y.data, conv2d_loops(x, w, b, stride, padding), atol=1e-12)


def test_depthwise_identity():
    x = np.random.default_rng(5).standard_normal((1, 4, 3, 5))
    y = F.depthwise_conv2d(Tensor(x), Tensor(np.ones((4, 1, 1, 1))))
    np.testing.assert_allclose(y.data, x, rtol=1e-6)


def test_transposed_stride2_manual_expansion():
    a, b = 1.5, -2.0
    y = F.conv_transpose1d(Tensor([[[a, b]]]), Tensor(np.ones((1, 1, 2))), stride=2)
    np.testing.assert_allclose(y.data, [[[a, a, b, b]]])


@pytest.mark.parametrize("stride,padding,k", [(2, 0, 2), (2, 1, 4), (4, 2, 8), (1, 1, 3)])
def test_transposed_conv1d_matches_scatter_oracle(f64, stride, padding, k):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 5))
    w = rng.standard_normal((3, 2, k))
    y = F.conv_transpose1d(Tensor(x), Tensor(w), stride=stride, padding=padding)
    assert y.shape[2] == (5 - 1) * stride - 2 * padding + k
    np.testing.assert_allclose(y.data, conv_transpose1d_scatter(x, w, stride, padding), atol=1e-12)


def test_transposed_is_adjoint_of_conv(f64):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    y = F.conv2d(Tensor(x), Tensor(w), stride=2, padding=1)
    u = rng.standard_normal(y.shape)
    xt = F.conv_transpose2d(Tensor(u), Tensor(w), stride=2, padding=1, output_padding=1)
    assert xt.shape == x.shape
    np.testing.assert_allclose((y.data * u).sum(), (x * xt.data).sum(), rtol=1e-10)


# -- normalization and activations --------------------------------------------


def test_layer_norm_constant_input():
    y = F.layer_norm(Tensor(np.full((2, 5), 3.0)), axes=(1,))
    np.testing.assert_array_equal(y.data, 0.0)


def test_layer_norm_moments():
    x = np.random.default_rng(8).standard_normal((3, 4, 6)) * 5 + 2
    y = F.layer_norm(Tensor(x), axes=(1, 2), eps=1e-8).data.astype(np.float64)
    assert np.abs(y.mean(axis=(1, 2))).max() < 1e-5
    assert np.abs(y.var(axis=(1, 2)) - 1).max() < 1e-5


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        F.layer_norm(Tensor(np.ones((2, 2))), eps=0.0)


def test_activation_values_at_zero():
    z = Tensor([0.0])
    assert F.gelu(z).item() == 0.0
    assert F.silu(z).item() == 0.0
    assert F.tanh_act(z).item() == 0.0
    assert F.elu_plus_one(z).item() == 1.0


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_elu_plus_one_positive(v):
    assert F.elu_plus_one(Tensor([v], dtype=np.float64)).data[0] > 0


def test_elu_plus_one_positive_f32_range():
    x = np.linspace(-15, 30, 10001, dtype=np.float32)
    assert (F.elu_plus_one(Tensor(x)).data > 0).all()


# -- misc ops ----------------------------------------------------------------


def test_matmul_identity():
    x = np.random.default_rng(9).standard_normal((3, 4))
    np.testing.assert_allclose(matmul(Tensor(x), Tensor(np.eye(4))).data, x, rtol=1e-6)


def test_matmul_shape_error():
    with pytest.raises(ValueError, match="inner"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_add_shape_error():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))


def test_concat_shape_error():
    with pytest.raises(ValueError, match="concat"):
        concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


def test_drop_path_identity_cases():
    x = Tensor(np.random.default_rng(10).standard_normal((4, 3)))
    np.testing.assert_array_equal(F.drop_path(x, 0.0, training=True).data, x.data)
    np.testing.assert_array_equal(F.drop_path(x, 0.5, training=False).data, x.data)
    with pytest.raises(ValueError):
        F.drop_path(x, 1.0, training=True)


def test_drop_path_train_mode_rescales_whole_samples():
    x = Tensor(np.ones((2000, 3)))
    y = F.drop_path(x, 0.25, training=True, rng=np.random.default_rng(0)).data
    dropped = (y == 0).all(axis=1)
    np.testing.assert_allclose(y[~dropped], 1 / 0.75, rtol=1e-6)
    assert abs(y.mean() - 1.0) < 0.05


def test_interpolate_nearest_index_mapping():
    a, b = 3.0, -1.0
    y = F.interpolate_nearest(Tensor([[[a, b]]]), 4)
    np.testing.assert_array_equal(y.data, [[[a, a, b, b]]])
    src = np.arange(6.0).reshape(1, 1, 2, 3)
    y2 = F.interpolate_nearest(Tensor(src), (4, 6)).data[0, 0]
    oracle = np.array([[src[0, 0, i * 2 // 4, j * 3 // 6] for j in range(6)] for i in range(4)])
    np.testing.assert_array_equal(y2, oracle)


def test_checked_mode_rejects_nan():
    with pytest.raises(NonFiniteError), np.errstate(divide="ignore"):
        Tensor([0.0]).log()


# -- autodiff ----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 1.0)


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_until_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_tape_is_topological():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * 2.0
    z = (y + x).sum()
    order = tape(z)
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert order[-1] is z


def test_backward_linearity(f64):
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal(6), requires_grad=True)

    def f():
        return (x.tanh() * x).sum()

    def g():
        return F.gelu(x).sum()

    a, b = 0.7, -1.3
    f().backward()
    gf = x.grad.copy()
    x.grad = None
    g().backward()
    gg = x.grad.copy()
    x.grad = None
    (a * f() + b * g()).backward()
    np.testing.assert_allclose(x.grad, a * gf + b * gg, atol=1e-6)


# -- finite-difference suite -------------------------------------------------


def _fd(fn, params):
    return max_gradient_error(fn, params, step=1e-3)


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


@pytest.mark.gradcheck
def test_gelu_grad_at_half(f64):
    x = Tensor([0.5], requires_grad=True)
    assert _fd(lambda: F.gelu(x).sum(), [x]) < 1e-3


GRAD_CASES = {
    "conv1d": lambda r: _case_conv1d(r),
    "conv1d_grouped_strided": lambda r: _case_conv1d(r, stride=2, groups=2, dilation=2),
    "conv2d": lambda r: _case_conv2d(r),
    "depthwise_conv2d": lambda r: _case_dw(r),
    "conv_transpose1d": lambda r: _case_ct1(r),
    "conv_transpose2d": lambda r: _case_ct2(r),
    "layer_norm": lambda r: _case_unary(r, lambda t: F.layer_norm(t, axes=(1,)), (2, 5, 3)),
    "group_norm": lambda r: _case_unary(r, lambda t: F.group_norm(t, 2), (2, 4, 3)),
    "gelu": lambda r: _case_unary(r, F.gelu, (4, 5)),
    "silu": lambda r: _case_unary(r, F.silu, (4, 5)),
    "tanh": lambda r: _case_unary(r, F.tanh_act, (4, 5)),
    "elu_plus_one": lambda r: _case_unary(r, F.elu_plus_one, (4, 5)),
    "leaky_relu": lambda r: _case_unary(r, F.leaky_relu, (4, 5)),
    "sigmoid": lambda r: _case_unary(r, F.sigmoid, (4, 5)),
    "interpolate": lambda r: _case_unary(r, lambda t: F.interpolate_nearest(t, (5, 7)), (2, 1, 3, 4)),
    "reflect_pad": lambda r: _case_unary(r, lambda t: F.pad_last(t, 3, 2), (2, 6)),
    "magnitude": lambda r: _case_unary(r, F.magnitude, (3, 4, 2)),
    "exp_log_sqrt": lambda r: _case_unary(r, lambda t: (t * t + 1.0).log().sqrt().exp(), (3, 3)),
    "div_pow_abs": lambda r: _case_binary(r, lambda a, b: (a / (b * b + 1.0)) ** 2 + a.abs()),
    "matmul": lambda r: _case_matmul(r),
    "concat_getitem": lambda r: _case_binary(r, lambda a, b: concat([a, b], axis=1)[:, 1:5] * 2.0),
    "mean_transpose": lambda r: _case_unary(r, lambda t: t.transpose(1, 0).mean(axis=1), (3, 4)),
}


def _case_unary(rng, op, shape):
    x = _param(rng, *shape)
    w = random_projection(op(x.detach()).shape)
    return (lambda: (op(x) * w).sum()), [x]


def _case_binary(rng, op):
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    w = random_projection(op(a.detach(), b.detach()).shape)
    return (lambda: (op(a, b) * w).sum()), [a, b]


def _case_matmul(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    w = random_projection((2, 3, 5))
    return (lambda: (matmul(a, b) * w).sum()), [a, b]


def _case_conv1d(rng, stride=1, groups=1, dilation=1):
    x, wt, b = _param(rng, 2, 4, 11), _param(rng, 4, 4 // groups, 3), _param(rng, 4)
    op = lambda: F.conv1d(x, wt, b, stride, 1, dilation, groups)  # noqa: E731
    w = random_projection(op().shape)
    return (lambda: (op() * w).sum()), [x, wt, b]


def _case_conv2d(rng):
    x, wt, b = _param(rng, 2, 3, 5, 5), _param(rng, 2, 3, 3, 3), _param(rng, 2)
    op = lambda: F.conv2d(x, wt, b, 2, 1)  # noqa: E731
    w = random_projection(op().shape)
    return (lambda: (op() * w).sum()), [x, wt, b]


def _case_dw(rng):
    x, wt = _param(rng, 2, 3, 5, 5), _param(rng, 3, 1, 3, 3)
    op = lambda: F.depthwise_conv2d(x, wt, padding=1)  # noqa: E731
    w = random_projection(op().shape)
    return (lambda: (op() * w).sum()), [x, wt]


def _case_ct1(rng):
    x, wt, b = _param(rng, 2, 3, 5), _param(rng, 3, 2, 4), _param(rng, 2)
    op = lambda: F.conv_transpose1d(x, wt, b, stride=2, padding=1)  # noqa: E731
    w = random_projection(op().shape)
    return (lambda: (op() * w).sum()), [x, wt, b]


def _case_ct2(rng):
    x, wt = _param(rng, 1, 2, 3, 3), _param(rng, 2, 3, 2, 2)
    op = lambda: F.conv_transpose2d(x, wt, stride=2)  # noqa: E731
    w = random_projection(op().shape)
    return (lambda: (op() * w).sum()), [x, wt]


@pytest.mark.gradcheck
@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradients_match_finite_differences(f64, name):
    fn, params = GRAD_CASES[name](np.random.default_rng(0))
    assert _fd(fn, params) < 1e-3


@pytest.mark.gradcheck
def test_composite_conv_norm_gelu_graph(f64):
    rng = np.random.default_rng(12)
    x, wt, b = _param(rng, 2, 3, 9), _param(rng, 4, 3, 3), _param(rng, 4)

    def loss():
        h = F.conv1d(x, wt, b, padding=1)
        h = F.layer_norm(h, axes=(1,))
        return F.gelu(h).sum()

    assert _fd(loss, [x, wt, b]) < 1e-3


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 3), st.integers(1, 4), st.integers(1, 12), st.integers(1, 5), st.integers(1, 3), st.integers(0, 3)
)
def test_conv1d_shape_algebra_is_total(b, c, n, k, stride, padding):
    x = Tensor(np.zeros((b, c, n)))
    w = Tensor(np.zeros((2, c, k)))
    expected = (n + 2 * padding - (k - 1) - 1) // stride + 1
    if expected < 1:
        with pytest.raises(ValueError):
            F.conv1d(x, w, stride=stride, padding=padding)
    else:
        assert F.conv1d(x, w, stride=stride, padding=padding).shape == (b, 2, expected)
