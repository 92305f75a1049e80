"""Oracle and finite-difference checks for the tensor primitives.

The convolution oracle below is a straight seven-loop transcription of the
cross-correlation sum.  It is deliberately slow and obvious; every fast-path
result must match it to near machine precision before the gradient checks
mean anything.
"""
from __future__ import annotations

import numpy as np
import pytest

from _gradcheck import max_rel_err, projected
from hemiseg.autodiff import Graph, Tensor, backward
from hemiseg.ops import (
    activation,
    batch_norm,
    channel_mean,
    concat_channels,
    conv3d,
    conv_output_extent,
    depthwise_separable_conv3d,
    elementwise_add,
    elementwise_mul,
    global_avg_pool,
    relu,
    scale_by_map,
    sigmoid,
    softmax_channels,
    trilinear_upsample,
)


def conv3d_reference(x, w, b=None, stride=(1, 1, 1), padding=(0, 0, 0),
                     dilation=(1, 1, 1), groups=1):
    """Seven nested loops, no vectorization, no shortcuts."""
    n, cin, di, hi, wi = x.shape
    cout, cin_g, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    dd, dh, dw = dilation
    xp = np.zeros((n, cin, di + 2 * pd, hi + 2 * ph, wi + 2 * pw))
    xp[:, :, pd:pd + di, ph:ph + hi, pw:pw + wi] = x
    od = conv_output_extent(di, kd, sd, pd, dd)
    oh = conv_output_extent(hi, kh, sh, ph, dh)
    ow = conv_output_extent(wi, kw, sw, pw, dw)
    out = np.zeros((n, cout, od, oh, ow))
    cog = cout // groups
    for bi in range(n):
        for co in range(cout):
            g = co // cog
            for z in range(od):
                for y in range(oh):
                    for t in range(ow):
                        acc = 0.0
                        for ci in range(cin_g):
                            for a in range(kd):
                                for bb in range(kh):
                                    for cc in range(kw):
                                        acc += (xp[bi, g * cin_g + ci,
                                                   z * sd + a * dd,
                                                   y * sh + bb * dh,
                                                   t * sw + cc * dw]
                                                * w[co, ci, a, bb, cc])
                        out[bi, co, z, y, t] = acc
    if b is not None:
        out += b.reshape(1, cout, 1, 1, 1)
    return out


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


# ----------------------------------------------------------------------
# value oracles
# ----------------------------------------------------------------------

CONV_CASES = [
    # n, cin, cout, spatial, kernel, stride, padding, dilation, groups, bias
    (2, 3, 4, (5, 6, 5), (3, 3, 3), (1, 1, 1), (1, 1, 1), (1, 1, 1), 1, True),
    (1, 4, 6, (6, 5, 7), (3, 1, 3), (2, 1, 2), (1, 0, 1), (1, 1, 1), 2, True),
    (1, 3, 3, (7, 7, 7), (3, 3, 3), (1, 1, 1), (2, 2, 2), (2, 2, 2), 3, False),
    (2, 2, 4, (4, 4, 4), (1, 1, 1), (1, 1, 1), (0, 0, 0), (1, 1, 1), 1, True),
    (1, 5, 5, (6, 6, 6), (3, 3, 3), (1, 1, 1), (1, 1, 1), (1, 1, 1), 5, False),
    (1, 2, 4, (9, 8, 9), (3, 3, 3), (2, 2, 2), (1, 1, 1), (2, 2, 2), 1, False),
]


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv3d_matches_loop_oracle(case):
    n, cin, cout, spatial, kernel, stride, padding, dilation, groups, use_bias = case
    rng = np.random.default_rng(hash(case) % (2**32))
    x = rng.normal(size=(n, cin) + spatial)
    w = rng.normal(size=(cout, cin // groups) + kernel)
    b = rng.normal(size=cout) if use_bias else None
    want = conv3d_reference(x, w, b, stride, padding, dilation, groups)
    got = conv3d(Tensor(x), Tensor(w), None if b is None else Tensor(b),
                 stride=stride, padding=padding, dilation=dilation, groups=groups)
    assert got.shape == want.shape
    np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)


def test_conv_output_extent_table():
    # floor((n + 2p - d(k-1) - 1)/s) + 1, a few hand-computed rows
    assert conv_output_extent(5, 3, 2, 1, 2) == 2
    assert conv_output_extent(32, 3, 1, 1, 1) == 32
    assert conv_output_extent(32, 3, 2, 1, 1) == 16
    assert conv_output_extent(7, 3, 1, 2, 2) == 7
    assert conv_output_extent(1, 1, 1, 0, 1) == 1


def test_depthwise_equals_grouped_per_channel():
    """groups == Cin == Cout must agree with stacking C independent convs."""
    rng = np.random.default_rng(7)
    c = 4
    x = rng.normal(size=(2, c, 5, 5, 5))
    w = rng.normal(size=(c, 1, 3, 3, 3))
    got = conv3d(Tensor(x), Tensor(w), padding=1, groups=c).data
    for ch in range(c):
        single = conv3d(Tensor(x[:, ch:ch + 1]), Tensor(w[ch:ch + 1]), padding=1).data
        np.testing.assert_allclose(got[:, ch:ch + 1], single, rtol=1e-12, atol=1e-12)


def test_separable_equals_composition():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 3, 5, 5, 5))
    dw = rng.normal(size=(3, 1, 3, 3, 3))
    pw = rng.normal(size=(5, 3, 1, 1, 1))
    b = rng.normal(size=5)
    got = depthwise_separable_conv3d(Tensor(x), Tensor(dw), Tensor(pw), Tensor(b),
                                     padding=1).data
    spatial = conv3d(Tensor(x), Tensor(dw), padding=1, groups=3)
    want = conv3d(spatial, Tensor(pw), Tensor(b)).data
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_upsample_factor2_hand_weights():
    """Half-pixel-center interpolation on two samples.

    Output positions map to source coordinates -0.25, 0.25, 0.75, 1.25;
    after edge clamping the rows of the interpolation matrix are
    (1, 0), (3/4, 1/4), (1/4, 3/4), (0, 1).
    """
    x = np.zeros((1, 1, 1, 1, 2))
    x[0, 0, 0, 0] = [10.0, 30.0]
    out = trilinear_upsample(Tensor(x), (1, 1, 2)).data
    np.testing.assert_allclose(out[0, 0, 0, 0], [10.0, 15.0, 25.0, 30.0])


def test_upsample_preserves_constant_fields():
    rng = np.random.default_rng(9)
    for _ in range(5):
        c = float(rng.normal())
        x = np.full((1, 2, 3, 4, 2), c)
        out = trilinear_upsample(Tensor(x), 2).data
        assert out.shape == (1, 2, 6, 8, 4)
        np.testing.assert_allclose(out, c, rtol=0, atol=1e-12)


def test_upsample_factor1_is_identity():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(1, 2, 3, 3, 3))
    np.testing.assert_array_equal(trilinear_upsample(Tensor(x), 1).data, x)


def test_batch_norm_train_formula_and_running_update():
    rng = np.random.default_rng(11)
    x = rng.normal(loc=2.0, scale=3.0, size=(2, 3, 4, 4, 4))
    gamma = rng.normal(size=3)
    beta = rng.normal(size=3)
    rm = rng.normal(size=3)
    rv = np.abs(rng.normal(size=3)) + 0.5
    rm0, rv0 = rm.copy(), rv.copy()
    eps = 1e-5
    out = batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv,
                     train=True, momentum=0.1, eps=eps).data
    mean = x.mean(axis=(0, 2, 3, 4))
    var = x.var(axis=(0, 2, 3, 4))
    want = (gamma.reshape(1, 3, 1, 1, 1)
            * (x - mean.reshape(1, 3, 1, 1, 1))
            / np.sqrt(var.reshape(1, 3, 1, 1, 1) + eps)
            + beta.reshape(1, 3, 1, 1, 1))
    np.testing.assert_allclose(out, want, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(rm, 0.9 * rm0 + 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 * rv0 + 0.1 * var, rtol=1e-12)


def test_batch_norm_eval_uses_running_stats():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(1, 2, 3, 3, 3))
    gamma = np.array([2.0, 0.5])
    beta = np.array([-1.0, 3.0])
    rm = np.array([0.25, -0.5])
    rv = np.array([4.0, 0.25])
    out = batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm.copy(), rv.copy(),
                     train=False, eps=1e-5).data
    want = (gamma.reshape(1, 2, 1, 1, 1)
            * (x - rm.reshape(1, 2, 1, 1, 1))
            / np.sqrt(rv.reshape(1, 2, 1, 1, 1) + 1e-5)
            + beta.reshape(1, 2, 1, 1, 1))
    np.testing.assert_allclose(out, want, rtol=1e-12, atol=1e-12)
    # eval mode must not touch the running arrays
    stash_m, stash_v = rm.copy(), rv.copy()
    batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), stash_m, stash_v,
               train=False, eps=1e-5)
    np.testing.assert_array_equal(stash_m, rm)
    np.testing.assert_array_equal(stash_v, rv)


def test_softmax_channels_properties():
    rng = np.random.default_rng(13)
    for _ in range(20):
        shape = (int(rng.integers(1, 3)), int(rng.integers(2, 5)),
                 int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        x = rng.normal(scale=5.0, size=shape)
        s = softmax_channels(Tensor(x)).data
        assert np.all(s > 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        shifted = softmax_channels(Tensor(x + rng.normal() * np.ones_like(x))).data
        np.testing.assert_allclose(s, shifted, rtol=1e-12, atol=1e-12)


def test_activation_dispatch():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(1, 3, 2, 2, 2))
    np.testing.assert_array_equal(activation(Tensor(x), "relu").data, relu(Tensor(x)).data)
    np.testing.assert_array_equal(activation(Tensor(x), "sigmoid").data, sigmoid(Tensor(x)).data)
    np.testing.assert_array_equal(activation(Tensor(x), "softmax_channel").data,
                                  softmax_channels(Tensor(x)).data)
    with pytest.raises(ValueError, match="unknown activation"):
        activation(Tensor(x), "tanh")


def test_global_avg_pool_and_channel_mean_values():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(2, 3, 4, 5, 4))
    pooled = global_avg_pool(Tensor(x)).data
    assert pooled.shape == (2, 3, 1, 1, 1)
    np.testing.assert_allclose(pooled[:, :, 0, 0, 0], x.mean(axis=(2, 3, 4)), rtol=1e-12)
    cm = channel_mean(Tensor(x)).data
    assert cm.shape == (2, 1, 4, 5, 4)
    np.testing.assert_allclose(cm[:, 0], x.mean(axis=1), rtol=1e-12)


def test_concat_channels_layout():
    rng = np.random.default_rng(16)
    a = rng.normal(size=(1, 2, 3, 3, 3))
    b = rng.normal(size=(1, 4, 3, 3, 3))
    out = concat_channels([Tensor(a), Tensor(b)]).data
    assert out.shape == (1, 6, 3, 3, 3)
    np.testing.assert_array_equal(out[:, :2], a)
    np.testing.assert_array_equal(out[:, 2:], b)


def test_scale_by_map_broadcast():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(1, 3, 2, 2, 2))
    m = rng.normal(size=(1, 1, 2, 2, 2))
    out = scale_by_map(Tensor(x), Tensor(m)).data
    np.testing.assert_allclose(out, x * m, rtol=1e-12)


# ----------------------------------------------------------------------
# gradient checks against central differences
# ----------------------------------------------------------------------

TOL = 1e-4


def test_grad_conv3d_dense():
    rng = np.random.default_rng(20)
    for trial in range(3):
        x = _t(rng, 1, 2, 4, 5, 4)
        w = _t(rng, 3, 2, 3, 3, 3)
        b = _t(rng, 3)
        fn = projected(lambda: conv3d(x, w, b, stride=(2, 1, 2), padding=1), rng)
        assert max_rel_err(fn, [x, w, b], rng=rng) < TOL


def test_grad_conv3d_grouped_and_dilated():
    rng = np.random.default_rng(21)
    x = _t(rng, 1, 4, 6, 5, 6)
    w = _t(rng, 6, 2, 3, 3, 3)
    fn = projected(lambda: conv3d(x, w, padding=2, dilation=2, groups=2), rng)
    assert max_rel_err(fn, [x, w], rng=rng) < TOL


def test_grad_conv3d_depthwise():
    rng = np.random.default_rng(22)
    x = _t(rng, 2, 3, 4, 4, 4)
    w = _t(rng, 3, 1, 3, 3, 3)
    fn = projected(lambda: conv3d(x, w, padding=1, groups=3), rng)
    assert max_rel_err(fn, [x, w], rng=rng) < TOL


def test_grad_separable():
    rng = np.random.default_rng(23)
    x = _t(rng, 1, 3, 4, 4, 4)
    dw = _t(rng, 3, 1, 3, 3, 3)
    pw = _t(rng, 4, 3, 1, 1, 1)
    b = _t(rng, 4)
    fn = projected(lambda: depthwise_separable_conv3d(x, dw, pw, b, padding=1), rng)
    assert max_rel_err(fn, [x, dw, pw, b], rng=rng) < TOL


def test_grad_batch_norm_train():
    rng = np.random.default_rng(24)
    x = _t(rng, 2, 3, 3, 4, 3)
    gamma = _t(rng, 3)
    beta = _t(rng, 3)
    rm = np.zeros(3)
    rv = np.ones(3)
    fn = projected(lambda: batch_norm(x, gamma, beta, rm, rv, train=True), rng)
    assert max_rel_err(fn, [x, gamma, beta], rng=rng) < TOL


def test_grad_batch_norm_eval():
    rng = np.random.default_rng(25)
    x = _t(rng, 1, 3, 3, 3, 3)
    gamma = _t(rng, 3)
    beta = _t(rng, 3)
    rm = rng.normal(size=3)
    rv = np.abs(rng.normal(size=3)) + 0.5
    fn = projected(lambda: batch_norm(x, gamma, beta, rm, rv, train=False), rng)
    assert max_rel_err(fn, [x, gamma, beta], rng=rng) < TOL


def test_grad_relu():
    # keep samples away from the kink so central differences are valid
    rng = np.random.default_rng(26)
    data = rng.normal(size=(1, 2, 3, 3, 3))
    data += 0.2 * np.sign(data)
    x = Tensor(data, requires_grad=True)
    fn = projected(lambda: relu(x), rng)
    assert max_rel_err(fn, [x], rng=rng) < TOL


def test_grad_sigmoid_softmax():
    rng = np.random.default_rng(27)
    x = _t(rng, 1, 3, 2, 3, 2)
    fn = projected(lambda: sigmoid(x), rng)
    assert max_rel_err(fn, [x], rng=rng) < TOL
    y = _t(rng, 2, 4, 2, 2, 2)
    fn = projected(lambda: softmax_channels(y), rng)
    assert max_rel_err(fn, [y], rng=rng) < TOL


def test_grad_upsample():
    rng = np.random.default_rng(28)
    x = _t(rng, 1, 2, 3, 4, 3)
    fn = projected(lambda: trilinear_upsample(x, 2), rng)
    assert max_rel_err(fn, [x], rng=rng) < TOL
    y = _t(rng, 1, 2, 2, 3, 5)
    fn = projected(lambda: trilinear_upsample(y, (1, 2, 2)), rng)
    assert max_rel_err(fn, [y], rng=rng) < TOL


def test_grad_pool_concat_arith():
    rng = np.random.default_rng(29)
    x = _t(rng, 1, 3, 3, 3, 3)
    fn = projected(lambda: global_avg_pool(x), rng)
    assert max_rel_err(fn, [x], rng=rng) < TOL
    a = _t(rng, 1, 2, 2, 2, 2)
    b = _t(rng, 1, 3, 2, 2, 2)
    fn = projected(lambda: concat_channels([a, b]), rng)
    assert max_rel_err(fn, [a, b], rng=rng) < TOL
    c = _t(rng, 1, 2, 2, 2, 2)
    fn = projected(lambda: elementwise_add(a, c), rng)
    assert max_rel_err(fn, [a, c], rng=rng) < TOL
    fn = projected(lambda: elementwise_mul(a, c), rng)
    assert max_rel_err(fn, [a, c], rng=rng) < TOL


def test_grad_scale_by_map_channel_mean():
    rng = np.random.default_rng(30)
    x = _t(rng, 1, 3, 2, 3, 2)
    m = _t(rng, 1, 1, 2, 3, 2)
    fn = projected(lambda: scale_by_map(x, m), rng)
    assert max_rel_err(fn, [x, m], rng=rng) < TOL
    fn = projected(lambda: channel_mean(x), rng)
    assert max_rel_err(fn, [x], rng=rng) < TOL


def test_grad_composed_block():
    """A conv -> bn -> relu -> upsample -> mul chain checked end to end."""
    rng = np.random.default_rng(31)
    x = _t(rng, 1, 2, 3, 3, 3)
    w = _t(rng, 2, 2, 3, 3, 3)
    gamma = Tensor(np.ones(2), requires_grad=True)
    beta = Tensor(np.zeros(2), requires_grad=True)
    rm = np.zeros(2)
    rv = np.ones(2)

    def build():
        h = conv3d(x, w, padding=1)
        h = batch_norm(h, gamma, beta, rm, rv, train=True)
        h = sigmoid(h)
        h = trilinear_upsample(h, 2)
        return elementwise_mul(h, h)

    fn = projected(build, rng)
    assert max_rel_err(fn, [x, w, gamma, beta], rng=rng) < TOL


# ----------------------------------------------------------------------
# domain validation
# ----------------------------------------------------------------------

def test_conv3d_rejects_bad_arguments():
    rng = np.random.default_rng(40)
    x = Tensor(rng.normal(size=(1, 4, 5, 5, 5)))
    with pytest.raises(ValueError, match="odd"):
        conv3d(x, Tensor(rng.normal(size=(2, 4, 2, 3, 3))))
    with pytest.raises(ValueError, match="groups"):
        conv3d(x, Tensor(rng.normal(size=(2, 4, 3, 3, 3))), groups=3)
    with pytest.raises(ValueError, match="input channels"):
        conv3d(x, Tensor(rng.normal(size=(2, 3, 3, 3, 3))))
    with pytest.raises(ValueError, match="bias"):
        conv3d(x, Tensor(rng.normal(size=(2, 4, 3, 3, 3))), Tensor(np.zeros(3)))
    with pytest.raises(ValueError, match="5D"):
        conv3d(Tensor(np.zeros((4, 5, 5, 5))), Tensor(rng.normal(size=(2, 4, 3, 3, 3))))
    with pytest.raises(ValueError, match="stride/dilation"):
        conv3d(x, Tensor(rng.normal(size=(2, 4, 3, 3, 3))), stride=0)
    with pytest.raises(ValueError, match="output extent"):
        conv3d(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(rng.normal(size=(1, 1, 5, 5, 5))))


def test_misc_validation():
    x5 = Tensor(np.zeros((1, 2, 2, 2, 2)))
    with pytest.raises(ValueError, match="factors"):
        trilinear_upsample(x5, 0)
    with pytest.raises(ValueError, match="channel axis"):
        softmax_channels(Tensor(np.zeros(4)))
    with pytest.raises(ValueError, match="at least one"):
        concat_channels([])
    with pytest.raises(ValueError, match="mismatch"):
        concat_channels([x5, Tensor(np.zeros((1, 2, 3, 2, 2)))])
    with pytest.raises(ValueError, match="mismatch"):
        elementwise_add(x5, Tensor(np.zeros((1, 3, 2, 2, 2))))
    with pytest.raises(ValueError, match="map"):
        scale_by_map(x5, Tensor(np.zeros((1, 2, 2, 2, 2))))
    with pytest.raises(ValueError, match="gamma"):
        batch_norm(x5, Tensor(np.zeros(3)), Tensor(np.zeros(2)),
                   np.zeros(2), np.ones(2), train=True)
    with pytest.raises(ValueError, match="eps"):
        batch_norm(x5, Tensor(np.zeros(2)), Tensor(np.zeros(2)),
                   np.zeros(2), np.ones(2), train=True, eps=0.0)


def test_conv3d_backward_skips_frozen_inputs():
    """requires_grad=False leaves stay grad-free even through the fast path."""
    rng = np.random.default_rng(41)
    x = Tensor(rng.normal(size=(1, 2, 3, 3, 3)))
    w = Tensor(rng.normal(size=(2, 2, 3, 3, 3)), requires_grad=True)
    with Graph() as g:
        out = conv3d(x, w, padding=1)
        loss = Tensor(out.data.sum())
        from hemiseg.autodiff import record
        record([out], loss, lambda gout: [np.full(out.shape, gout)])
        backward(g, loss)
    assert x.grad is None
    assert w.grad is not None
