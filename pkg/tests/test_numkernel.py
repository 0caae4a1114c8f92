import numpy as np
import pytest

from pcdefense import numkernel as nk
from pcdefense.errors import ShapeError, ValidationError


# --- independent oracles -----------------------------------------------------


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def naive_conv2d(x, kernels, stride, padding):
    c_in, h, w = x.shape
    c_out, _, k, _ = kernels.shape
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            out[o, i, j] += xp[c, i * stride + di, j * stride + dj] * kernels[o, c, di, dj]
    return out


def naive_maxpool2(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ch, i, j] = x[ch, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    return out


# --- matmul ------------------------------------------------------------------


def test_matmul_identity():
    out = nk.matmul(np.eye(2), np.array([[3.0], [4.0]]))
    assert np.array_equal(out, [[3.0], [4.0]])


def test_matmul_hand():
    out = nk.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
    assert np.array_equal(out, [[17.0], [39.0]])


def test_matmul_vs_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(7, 5))
    b = rng.normal(size=(5, 3))
    assert np.abs(nk.matmul(a, b) - naive_matmul(a, b)).max() <= 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nk.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


# --- conv2d ------------------------------------------------------------------


def test_conv2d_ones_times_two():
    x = np.ones((1, 3, 3))
    k = np.full((1, 1, 1, 1), 2.0)
    out = nk.conv2d(x, k, stride=1, padding=0)
    assert out.shape == (1, 3, 3)
    assert np.array_equal(out, np.full((1, 3, 3), 2.0))


def test_conv2d_spatial_size_preserved_k5_s1_p2():
    # 28x28 stays 28x28 under kernel 5, stride 1, padding 2
    x = np.random.default_rng(1).random((1, 28, 28))
    k = np.random.default_rng(2).normal(size=(4, 1, 5, 5))
    assert nk.conv2d(x, k, stride=1, padding=2).shape == (4, 28, 28)


@pytest.mark.parametrize("side,stride,padding", [(8, 1, 0), (8, 1, 1), (9, 2, 1), (8, 1, 2)])
def test_conv2d_vs_nested_loop_oracle(side, stride, padding):
    rng = np.random.default_rng(side + stride * 10 + padding)
    x = rng.normal(size=(2, side, side))
    k = rng.normal(size=(3, 2, 3, 3))
    got = nk.conv2d(x, k, stride=stride, padding=padding)
    assert np.abs(got - naive_conv2d(x, k, stride, padding)).max() <= 1e-12


def test_conv2d_batched_matches_per_image():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    full = nk.conv2d(x, k, stride=1, padding=1)
    for i in range(4):
        assert np.allclose(full[i], nk.conv2d(x[i], k, stride=1, padding=1), atol=1e-12)


def test_conv2d_non_integer_output_raises():
    with pytest.raises(ShapeError, match="output size"):
        nk.conv2d(np.zeros((1, 5, 5)), np.zeros((1, 1, 2, 2)), stride=2, padding=0)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        nk.conv2d(np.zeros((2, 5, 5)), np.zeros((1, 3, 3, 3)), 1, 0)


def test_conv2d_backward_finite_difference():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    w = rng.normal(size=(3, 6, 6))  # fixed projection makes the loss scalar
    gx, gk = nk.conv2d_backward(x, k, w, stride=1, padding=1)
    err_x = nk.grad_check(lambda t: float((nk.conv2d(t, k, 1, 1) * w).sum()), x, gx)
    err_k = nk.grad_check(lambda t: float((nk.conv2d(x, t, 1, 1) * w).sum()), k, gk)
    assert err_x <= 1e-4 and err_k <= 1e-4


# --- maxpool -----------------------------------------------------------------


def test_maxpool_hand():
    out, idx = nk.maxpool2(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4.0
    assert idx[0, 0, 0] == 3  # flat position of the 4 inside the window


def test_maxpool_tie_breaks_to_first_cell():
    out, idx = nk.maxpool2(np.full((2, 4, 4), 0.5))
    assert np.all(out == 0.5)
    assert np.all(idx == 0)


def test_maxpool_vs_window_oracle():
    x = np.random.default_rng(5).normal(size=(3, 6, 6))
    out, _ = nk.maxpool2(x)
    assert np.array_equal(out, naive_maxpool2(x))


def test_maxpool_odd_dims_raise():
    with pytest.raises(ShapeError, match="even"):
        nk.maxpool2(np.zeros((1, 5, 4)))


def test_maxpool_backward_finite_difference():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 4, 4))  # continuous values, ties have measure zero
    w = rng.normal(size=(2, 2, 2))

    def loss(t):
        return float((nk.maxpool2(t)[0] * w).sum())

    _, idx = nk.maxpool2(x)
    gx = nk.maxpool2_backward(w, idx, x.shape)
    assert nk.grad_check(loss, x, gx) <= 1e-4


def test_maxpool_backward_routes_to_argmax():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    _, idx = nk.maxpool2(x)
    gx = nk.maxpool2_backward(np.array([[[5.0]]]), idx, x.shape)
    assert np.array_equal(gx, [[[0.0, 0.0], [0.0, 5.0]]])


# --- softmax cross-entropy -----------------------------------------------------


def test_xent_uniform_logits():
    loss, grad = nk.softmax_xent(np.zeros(10), nk.onehot([3], 10)[0])
    assert abs(loss - np.log(10.0)) <= 1e-12
    assert abs(grad[3] - (0.1 - 1.0)) <= 1e-12


def test_xent_saturated_correct_class():
    t = nk.onehot([2], 10)[0]
    loss, grad = nk.softmax_xent(t * 1e6, t)
    assert loss <= 1e-12
    assert np.abs(grad).max() <= 1e-12


def test_xent_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=7)
    t = nk.onehot([4], 7)[0]
    _, grad = nk.softmax_xent(logits, t)
    step = 1e-6
    for i in range(7):
        e = np.zeros(7)
        e[i] = step
        lp, _ = nk.softmax_xent(logits + e, t)
        lm, _ = nk.softmax_xent(logits - e, t)
        numeric = (lp - lm) / (2 * step)
        assert abs(grad[i] - numeric) / max(1.0, abs(numeric)) <= 1e-6


@pytest.mark.parametrize("bad", [np.zeros(5), np.ones(5), np.array([0.5, 0.5, 0, 0, 0])])
def test_xent_rejects_malformed_onehot(bad):
    with pytest.raises(ValidationError):
        nk.softmax_xent(np.zeros(5), bad)


def test_softmax_rows_sum_to_one():
    p = nk.softmax(np.random.default_rng(8).normal(size=(9, 10)) * 50)
    assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-9
    assert np.isfinite(p).all()


# --- grad_check itself ---------------------------------------------------------


def test_grad_check_on_sum():
    x = np.random.default_rng(9).normal(size=(4, 3))
    assert nk.grad_check(lambda t: float(t.sum()), x, np.ones_like(x)) <= 1e-9


def test_grad_check_on_half_square():
    x = np.random.default_rng(10).normal(size=6)
    assert nk.grad_check(lambda t: float(0.5 * (t * t).sum()), x, x) <= 1e-6


def test_grad_check_detects_wrong_gradient():
    x = np.random.default_rng(11).normal(size=5)
    assert nk.grad_check(lambda t: float(t.sum()), x, 2 * np.ones_like(x)) > 0.5


# --- determinism ----------------------------------------------------------------


def test_kernels_are_deterministic():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    a = nk.conv2d(x, k, 1, 1)
    b = nk.conv2d(x.copy(), k.copy(), 1, 1)
    assert np.array_equal(a, b)
