import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smfd import tensor as T

SOBEL = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], dtype=np.float64)


def _as4(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None, :, :, None]


def _kernel4(k):
    return np.asarray(k, dtype=np.float64)[:, :, None, None]


# ---------------------------------------------------------------------------
# worked examples


def test_conv_valid_top_left():
    x = _as4(np.arange(1, 26).reshape(5, 5))
    y = T.conv2d(x, _kernel4(SOBEL))
    assert y.shape == (1, 3, 3, 1)
    assert y[0, 0, 0, 0] == -8


def test_conv_padded_strided_top_left():
    x = _as4(np.arange(1, 26).reshape(5, 5))
    y = T.conv2d(x, _kernel4(SOBEL), stride=2, padding=1)
    assert y.shape == (1, 3, 3, 1)
    assert y[0, 0, 0, 0] == -11


def test_conv_zero_weights_annihilate():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 6, 5, 3))
    y = T.conv2d(x, np.zeros((3, 3, 3, 4)), np.zeros(4), padding="same")
    assert y.shape == (2, 6, 5, 4) and not y.any()


def test_conv_matches_bruteforce():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 7, 6, 3))
    w = rng.standard_normal((3, 2, 3, 4))
    b = rng.standard_normal(4)
    y = T.conv2d(x, w, b, stride=2, padding=1)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(y)
    for i in range(y.shape[1]):
        for j in range(y.shape[2]):
            patch = xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 2, :]
            ref[:, i, j] = np.einsum("nhwc,hwco->no", patch, w) + b
    np.testing.assert_allclose(y, ref, atol=1e-12)


@given(w=st.integers(3, 12), f=st.integers(1, 3), p=st.integers(0, 2), s=st.integers(1, 3))
@settings(max_examples=60, deadline=None)
def test_conv_extent_formula(w, f, p, s):
    x = np.zeros((1, w, w, 1))
    y = T.conv2d(x, np.zeros((f, f, 1, 1)), stride=s, padding=p)
    assert y.shape[1] == (w - f + 2 * p) // s + 1 == T.output_extent(w, f, 2 * p, s)


def test_same_padding_extra_goes_bottom_right():
    assert T.resolve_padding("same", 4, 4, 2, 2, 1) == (0, 1, 0, 1)
    assert T.resolve_padding("same", 5, 5, 3, 3, 1) == (1, 1, 1, 1)
    assert T.resolve_padding("valid", 5, 5, 3, 3, 1) == (0, 0, 0, 0)
    with pytest.raises(ValueError):
        T.resolve_padding("full", 5, 5, 3, 3, 1)


def test_conv_channel_mismatch_raises():
    with pytest.raises(T.ShapeError):
        T.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)))
    with pytest.raises(T.ShapeError):
        T.conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 2, 1)))


def test_max_and_avg_pool():
    x = _as4([[1, 3, 2, 1], [4, 2, 0, 5], [7, 1, 9, 2], [0, 6, 3, 4]])
    y, sw = T.pool2d(x, 2, 2, "max")
    np.testing.assert_array_equal(y[0, :, :, 0], [[4, 5], [7, 9]])
    assert sw is not None
    y, sw = T.pool2d(_as4([[1, 2], [3, 4]]), 2, 2, "avg")
    assert sw is None and y[0, 0, 0, 0] == 2.5


@pytest.mark.parametrize("mode", ["max", "avg"])
def test_pool_constant(mode):
    y, _ = T.pool2d(np.full((1, 6, 6, 2), 3.25), 2, 2, mode)
    assert np.all(y == 3.25)


def test_nearest_matrix():
    y = T.upsample(_as4([[1, 2], [3, 4]]), "nearest", 2)
    np.testing.assert_array_equal(
        y[0, :, :, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_unpool_matrix():
    vals = _as4([[5, 8], [3, 7]])
    # 1-indexed (1,1),(1,4),(3,1),(3,4) -> in-window flat indices
    sw = np.array([[0, 1], [0, 1]])[None, :, :, None]
    y = T.upsample(vals, "unpool", 2, aux=sw, out_shape=(1, 4, 4, 1))
    expect = np.zeros((4, 4))
    expect[0, 0], expect[0, 3], expect[2, 0], expect[2, 3] = 5, 8, 3, 7
    np.testing.assert_array_equal(y[0, :, :, 0], expect)


def test_unpool_rejects_bad_target():
    with pytest.raises(T.ShapeError):
        T.unpool(np.ones((1, 2, 2, 1)), np.zeros((1, 2, 2, 1), int), (1, 3, 3, 1))
    with pytest.raises(T.ShapeError):
        T.unpool(np.ones((1, 2, 2, 1)), np.full((1, 2, 2, 1), 4), (1, 4, 4, 1))


def test_unpool_of_pool_keeps_maxima_only():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 6, 3))
    y, sw = T.pool2d(x, 2, 2, "max")
    back = T.unpool(y, sw, x.shape)
    win_max = x.reshape(2, 3, 2, 3, 2, 3).max(axis=(2, 4))
    assert np.count_nonzero(back) == y.size
    np.testing.assert_array_equal(back.reshape(2, 3, 2, 3, 2, 3).sum(axis=(2, 4)), win_max)
    mask = back != 0
    np.testing.assert_array_equal(back[mask], x[mask])


def test_pixel_shuffle_shape_and_index_map():
    x = np.arange(36, dtype=np.float64).reshape(1, 3, 3, 4)
    y = T.upsample(x, "pixel_shuffle", 2)
    assert y.shape == (1, 6, 6, 1)
    for yy in range(6):
        for xx in range(6):
            assert y[0, yy, xx, 0] == x[0, yy // 2, xx // 2, (yy % 2) * 2 + xx % 2]


@given(h=st.integers(1, 4), w=st.integers(1, 4), c=st.integers(1, 3), r=st.integers(1, 3))
@settings(max_examples=40, deadline=None)
def test_pixel_shuffle_inverse(h, w, c, r):
    x = np.random.default_rng(h * 100 + w * 10 + c).standard_normal((2, h, w, c * r * r))
    np.testing.assert_array_equal(T.space_to_depth(T.depth_to_space(x, r), r), x)


def test_pixel_shuffle_rejects_indivisible_channels():
    with pytest.raises(T.ShapeError):
        T.depth_to_space(np.zeros((1, 2, 2, 3)), 2)


def test_transpose_conv_matrix():
    spec = T.ConvSpec(_kernel4([[1, 2], [3, 4]]), None, stride=2)
    y = T.upsample(_as4([[1, 2], [3, 4]]), "transpose", aux=spec)
    np.testing.assert_array_equal(
        y[0, :, :, 0], [[1, 2, 2, 4], [3, 4, 6, 8], [3, 6, 4, 8], [9, 12, 12, 16]])


def test_transpose_conv_bruteforce():
    rng = np.random.default_rng(4)
    x, w = rng.standard_normal((1, 3, 2, 2)), rng.standard_normal((3, 3, 2, 3))
    y = T.conv_transpose2d(x, w, stride=2)
    ref = np.zeros((1, 7, 5, 3))
    for i in range(3):
        for j in range(2):
            ref[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] += np.einsum("c,hwco->hwo", x[0, i, j], w)
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_upsample_aux_errors():
    with pytest.raises(ValueError):
        T.upsample(np.zeros((1, 2, 2, 1)), "unpool")
    with pytest.raises(ValueError):
        T.upsample(np.zeros((1, 2, 2, 1)), "transpose")
    with pytest.raises(ValueError):
        T.upsample(np.zeros((1, 2, 2, 1)), "bicubic")


# ---------------------------------------------------------------------------
# batchnorm and activations


def test_batchnorm_hand_values():
    x = np.array([1.0, 2.0, 3.0])[:, None]
    y, (mu, var) = T.batchnorm(x, np.ones(1), np.zeros(1), eps=1e-12)
    assert mu[0] == 2 and var[0] == pytest.approx(2 / 3)
    np.testing.assert_allclose(y[:, 0], [-1.2247449, 0, 1.2247449], atol=1e-6)


def test_batchnorm_constant_gives_beta():
    y, _ = T.batchnorm(np.full((4, 3, 3, 2), 7.0), np.array([2.0, 3.0]), np.array([0.5, -1.0]))
    np.testing.assert_allclose(y[..., 0], 0.5)
    np.testing.assert_allclose(y[..., 1], -1.0)


def test_batchnorm_normalizes_and_is_idempotent():
    x = np.random.default_rng(5).normal(3, 2, (8, 4, 4, 3))
    g, b = np.ones(3), np.zeros(3)
    y, _ = T.batchnorm(x, g, b)
    assert np.abs(y.mean(axis=(0, 1, 2))).max() <= 1e-6
    assert np.abs(y.var(axis=(0, 1, 2)) - 1).max() <= 1e-4
    y2, _ = T.batchnorm(y, g, b)
    np.testing.assert_allclose(y2, y, atol=1e-4)


def test_batchnorm_running_and_infer():
    x = np.random.default_rng(6).standard_normal((5, 2, 2, 2))
    run = (np.zeros(2), np.ones(2))
    _, (m, v) = T.batchnorm(x, np.ones(2), np.zeros(2), running=run)
    np.testing.assert_allclose(m, 0.1 * x.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(v, 0.9 + 0.1 * x.var(axis=(0, 1, 2)))
    y, used = T.batchnorm(x, np.ones(2), np.zeros(2), "infer", running=run)
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5))
    with pytest.raises(ValueError):
        T.batchnorm(x, np.ones(2), np.zeros(2), "infer")
    with pytest.raises(T.ShapeError):
        T.batchnorm(x, np.ones(3), np.zeros(3))


def test_activation_values():
    assert T.activate(np.array(0.0), "sigmoid") == 0.5
    assert T.activate(np.array(0.0), "tanh") == 0
    np.testing.assert_array_equal(T.activate(np.array([-3.0, 3.0]), "relu"), [0, 3])
    np.testing.assert_allclose(T.activate(np.full((2, 5), 4.0), "softmax"), 0.2)
    with pytest.raises(ValueError):
        T.activate(np.zeros(2), "gelu")


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.floats(-50, 50))
@settings(max_examples=50, deadline=None)
def test_softmax_sums_and_shift_invariance(logits, shift):
    z = np.array(logits)
    p = T.activate(z, "softmax")
    assert abs(p.sum() - 1) <= 1e-6
    np.testing.assert_allclose(T.activate(z + shift, "softmax"), p, atol=1e-9)


# ---------------------------------------------------------------------------
# gradient checks


def test_relu_away_from_zero():
    x = np.random.default_rng(7).uniform(0.1, 1, (3, 4)) * np.array([1, -1, 1, -1])
    rep = T.grad_check(lambda a: T.activate(a, "relu"),
                       lambda dy, a: [T.activate_vjp(dy, a, "relu")], [x], tolerance=1e-6)
    assert rep.passed, rep


def test_linear_gradient_exactly_one():
    x = np.random.default_rng(8).standard_normal((2, 3))
    dy = np.ones_like(x)
    np.testing.assert_array_equal(T.activate_vjp(dy, x, "linear"), 1.0)


def test_grad_check_catches_a_wrong_adjoint():
    x = np.random.default_rng(9).standard_normal((3, 3))
    rep = T.grad_check(np.tanh, lambda dy, a: [dy], [x])
    assert not rep.passed and rep.worst is not None


def _conv_case(rng):
    s = int(rng.integers(1, 3))
    pad = ["same", "valid", int(rng.integers(0, 2))][int(rng.integers(0, 3))]
    x = rng.standard_normal((2, int(rng.integers(4, 7)), int(rng.integers(4, 7)), 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    return ((lambda x, w, b: T.conv2d(x, w, b, s, pad)),
            (lambda dy, x, w, b: T.conv2d_vjp(dy, x, w, s, pad)), [x, w, b])


def _tconv_case(rng):
    x, w, b = (rng.standard_normal((1, 3, 2, 2)), rng.standard_normal((2, 2, 2, 3)),
               rng.standard_normal(3))
    return ((lambda x, w, b: T.conv_transpose2d(x, w, b, 2)),
            (lambda dy, x, w, b: T.conv_transpose2d_vjp(dy, x, w, 2)), [x, w, b])


def _maxpool_case(rng):
    x = rng.permutation(64).reshape(1, 4, 4, 4) * 0.1 + rng.standard_normal((1, 4, 4, 4)) * 1e-3
    _, sw = T.pool2d(x, 2, 2, "max")
    return ((lambda a: T.pool2d(a, 2, 2, "max")[0]),
            (lambda dy, a: [T.pool2d_vjp(dy, a.shape, 2, 2, "max", sw)]), [x])


def _avgpool_case(rng):
    x = rng.standard_normal((2, 4, 6, 2))
    return ((lambda a: T.pool2d(a, 2, 2, "avg")[0]),
            (lambda dy, a: [T.pool2d_vjp(dy, a.shape, 2, 2, "avg")]), [x])


def _unpool_case(rng):
    v = rng.standard_normal((1, 2, 3, 2))
    sw = rng.integers(0, 4, v.shape)
    return ((lambda a: T.unpool(a, sw, (1, 4, 6, 2))),
            (lambda dy, a: [T.unpool_vjp(dy, sw)]), [v])


def _nearest_case(rng):
    x = rng.standard_normal((1, 3, 2, 2))
    return ((lambda a: T.nearest_upsample(a, 2)),
            (lambda dy, a: [T.nearest_upsample_vjp(dy, 2)]), [x])


def _shuffle_case(rng):
    x = rng.standard_normal((1, 2, 3, 8))
    return ((lambda a: T.depth_to_space(a, 2)),
            (lambda dy, a: [T.space_to_depth(dy, 2)]), [x])


def _bn_case(rng):
    mode = ["train", "infer"][int(rng.integers(0, 2))]
    run = (rng.standard_normal(3), rng.uniform(0.5, 2, 3))
    x = rng.standard_normal((3, 2, 2, 3))
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    return ((lambda x, g, b: T.batchnorm(x, g, b, mode, running=run)[0]),
            (lambda dy, x, g, b: T.batchnorm_vjp(dy, x, g, mode, running=run)), [x, g, b])


def _act_case(kind):
    def case(rng):
        x = rng.standard_normal((2, 3, 4))
        if kind == "relu":
            x = np.where(np.abs(x) < 0.05, 0.5, x)
        return ((lambda a: T.activate(a, kind)),
                (lambda dy, a: [T.activate_vjp(dy, a, kind)]), [x])
    return case


CASES = {
    "conv": _conv_case, "transpose": _tconv_case, "maxpool": _maxpool_case,
    "avgpool": _avgpool_case, "unpool": _unpool_case, "nearest": _nearest_case,
    "pixel_shuffle": _shuffle_case, "batchnorm": _bn_case,
    **{k: _act_case(k) for k in T.ACTIVATIONS},
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_adjoints_over_100_seeds(name):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        fn, vjp, inputs = CASES[name](rng)
        rep = T.grad_check(fn, vjp, inputs, tolerance=1e-4, seed=seed)
        worst = max(worst, rep.max_rel_error)
        assert rep.passed, (name, seed, rep)
    assert worst <= 1e-4
