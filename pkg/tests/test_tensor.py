import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from seisbayes.errors import ConfigError, NonFiniteError, ShapeError, UsageError
from seisbayes.gradcheck import check_gradients
from seisbayes.tensor import (
    Adam,
    AdamState,
    Tensor,
    adam_step,
    conv1d,
    conv2d,
    conv_transpose1d,
    group_norm,
    gru,
    is_grad_enabled,
    log,
    matmul,
    maxpool2d,
    no_grad,
    pointwise,
    softplus,
    sqrt,
    tsum,
)

TOL = 1e-4


def param(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def weighted_sum(y, rng_seed=99):
    """Scalar probe with random weights so no gradient is trivially symmetric."""
    w = np.random.default_rng(rng_seed).standard_normal(y.shape)
    return tsum(y * Tensor(w))


# -- matmul ----------------------------------------------------------------


def test_matmul_identity():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_one_hot_row():
    assert matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [3.0]])).data.tolist() == [[2.0]]


def test_matmul_sum_gradient_is_row_sums(rng):
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    tsum(matmul(a, b)).backward()
    assert np.allclose(a.grad, np.broadcast_to(b.data.sum(axis=1), (3, 4)))
    assert check_gradients(lambda: tsum(matmul(a, b)), [a, b]) < 1e-6


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- conv1d ----------------------------------------------------------------


def test_conv1d_identity_kernel(rng):
    x = Tensor(rng.standard_normal((1, 17)))
    k = Tensor(np.array([[[0.0, 1.0, 0.0]]]))
    assert np.array_equal(conv1d(x, k).data, x.data)


def test_conv1d_constant_input_interior():
    k = np.array([[[0.5, 2.0, -1.0, 0.25, 1.25]]])
    y = conv1d(Tensor(np.full((1, 20), 3.0)), Tensor(k), dilation=2).data
    assert np.allclose(y[0, 4:-4], 3.0 * k.sum())


def test_conv1d_matches_numpy_correlate(rng):
    x = rng.standard_normal(30)
    k = rng.standard_normal(5)
    y = conv1d(Tensor(x[None, None]), Tensor(k[None, None])).data[0, 0]
    assert np.allclose(y, np.correlate(np.pad(x, 2), k, mode="valid"))


def test_conv1d_even_kernel_rejected():
    with pytest.raises(ConfigError):
        conv1d(Tensor(np.ones((1, 8))), Tensor(np.ones((1, 1, 4))))


@pytest.mark.parametrize("dilation,stride", [(1, 1), (3, 1), (1, 4)])
def test_conv1d_gradients(rng, dilation, stride):
    x, k, b = param(rng, 2, 3, 16), param(rng, 4, 3, 5), param(rng, 4)
    fn = lambda: weighted_sum(conv1d(x, k, b, dilation=dilation, stride=stride))
    assert check_gradients(fn, [x, k, b]) < TOL


def test_conv1d_against_torch(rng):
    torch = pytest.importorskip("torch")
    x, k = rng.standard_normal((2, 3, 40)), rng.standard_normal((4, 3, 5))
    ref = torch.nn.functional.conv1d(torch.tensor(x), torch.tensor(k), padding=6, dilation=3).numpy()
    assert np.allclose(conv1d(Tensor(x), Tensor(k), dilation=3).data, ref, atol=1e-12)


# -- conv2d ----------------------------------------------------------------


def test_conv2d_delta_kernel(rng):
    x = Tensor(rng.standard_normal((2, 9, 5)))
    k = np.zeros((2, 2, 5, 3))
    k[0, 0, 2, 1] = k[1, 1, 2, 1] = 1.0
    assert np.array_equal(conv2d(x, Tensor(k)).data, x.data)


def test_conv2d_separable_equals_two_1d_convs(rng):
    x = rng.standard_normal((1, 1, 20, 9))
    kt, kw = rng.standard_normal(5), rng.standard_normal(3)
    y = conv2d(Tensor(x), Tensor(np.outer(kt, kw)[None, None]), dilation=(2, 1)).data[0, 0]
    # time pass then width pass with conv1d as the oracle
    tmp = conv1d(Tensor(x[0, 0].T[:, None, :]), Tensor(kt[None, None]), dilation=2).data[:, 0, :].T
    ref = conv1d(Tensor(tmp[:, None, :]), Tensor(kw[None, None])).data[:, 0, :]
    assert np.allclose(y[4:-4, 1:-1], ref[4:-4, 1:-1], atol=1e-12)


def test_conv2d_gradients(rng):
    x, k, b = param(rng, 2, 2, 12, 5), param(rng, 3, 2, 5, 3), param(rng, 3)
    fn = lambda: weighted_sum(conv2d(x, k, b, dilation=(3, 1)))
    assert check_gradients(fn, [x, k, b]) < TOL


def test_conv2d_against_torch(rng):
    torch = pytest.importorskip("torch")
    x, k = rng.standard_normal((2, 3, 20, 5)), rng.standard_normal((4, 3, 5, 3))
    ref = torch.nn.functional.conv2d(torch.tensor(x), torch.tensor(k), padding=(12, 1), dilation=(6, 1)).numpy()
    assert np.allclose(conv2d(Tensor(x), Tensor(k), dilation=(6, 1)).data, ref, atol=1e-12)


# -- transposed conv -------------------------------------------------------


def test_conv_transpose_zero_input():
    y = conv_transpose1d(Tensor(np.zeros((1, 2, 7))), Tensor(np.ones((2, 3, 5))))
    assert y.shape == (1, 3, 14) and not y.data.any()


@given(st.integers(1, 40))
def test_conv_transpose_doubles_length(t):
    y = conv_transpose1d(Tensor(np.ones((1, 1, t))), Tensor(np.ones((1, 1, 5))))
    assert y.shape == (1, 1, 2 * t)


@pytest.mark.parametrize("kernel", [3, 5, 7])
def test_conv_transpose_is_adjoint_of_strided_conv(rng, kernel):
    w = rng.standard_normal((3, 2, kernel))
    x = rng.standard_normal((2, 3, 11))
    y = rng.standard_normal((2, 2, 22))
    up = conv_transpose1d(Tensor(x), Tensor(w)).data
    # the strided conv with the same kernel (in/out swapped) is its adjoint
    down = conv1d(Tensor(y), Tensor(w), stride=2).data
    assert abs(np.vdot(up, y) - np.vdot(x, down)) < 1e-10 * max(1.0, abs(np.vdot(up, y)))


def test_conv_transpose_gradients(rng):
    x, k, b = param(rng, 2, 3, 9), param(rng, 3, 2, 5), param(rng, 2)
    assert check_gradients(lambda: weighted_sum(conv_transpose1d(x, k, b)), [x, k, b]) < TOL


# -- maxpool ---------------------------------------------------------------


def test_maxpool_constant():
    y = maxpool2d(Tensor(np.full((1, 1, 4, 6), 2.5)), (2, 2))
    assert np.all(y.data == 2.5) and y.shape == (1, 1, 2, 3)


def test_maxpool_single_window():
    assert maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), (2, 2)).data.item() == 4.0


def test_maxpool_tie_goes_to_first_index():
    x = Tensor(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
    tsum(maxpool2d(x, (2, 2))).backward()
    assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(np.ones((1, 1, 3, 2))), (1, 3))


def test_maxpool_gradients(rng):
    x = param(rng, 2, 3, 8, 5)
    assert check_gradients(lambda: weighted_sum(maxpool2d(x, (1, 2), (1, 2))), [x]) < TOL


# -- group norm ------------------------------------------------------------


def test_group_norm_fixed_point(rng):
    x = rng.standard_normal((1, 4, 50))
    x = x.reshape(1, 2, -1)
    x = ((x - x.mean(axis=2, keepdims=True)) / x.std(axis=2, keepdims=True)).reshape(1, 4, 50)
    y = group_norm(Tensor(x), 2, eps=1e-12, gain=Tensor(np.ones(4)), bias=Tensor(np.zeros(4)))
    assert np.allclose(y.data, x, atol=1e-9)


def test_group_norm_moments(rng):
    x = Tensor(5.0 + 3.0 * rng.standard_normal((2, 4, 30)))
    gain, bias = np.array([2.0, 2.0, 0.5, 0.5]), np.array([1.0, 1.0, -3.0, -3.0])
    y = group_norm(x, 2, eps=0.0, gain=Tensor(gain), bias=Tensor(bias)).data.reshape(2, 2, -1)
    assert np.allclose(y.mean(axis=2), bias[::2], atol=1e-12)
    assert np.allclose(y.var(axis=2), gain[::2] ** 2, atol=1e-12)


def test_group_norm_indivisible():
    with pytest.raises(ConfigError):
        group_norm(Tensor(np.ones((1, 3, 4))), 2)


def test_group_norm_gradients(rng):
    x, g, b = param(rng, 2, 4, 6, 3), param(rng, 4), param(rng, 4)
    assert check_gradients(lambda: weighted_sum(group_norm(x, 2, gain=g, bias=b)), [x, g, b]) < TOL


# -- pointwise -------------------------------------------------------------


def test_softplus_values():
    assert softplus(Tensor(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-15)
    # high-precision reference: log1p(exp(-10))
    assert softplus(Tensor(-10.0)).item() == pytest.approx(4.5398899216870535e-05, rel=1e-12)


@given(hnp.arrays(np.float64, 8, elements=st.floats(-700, 700)))
def test_softplus_positive(x):
    assert np.all(softplus(Tensor(x)).data > 0)


@pytest.mark.parametrize("kind", ["tanh", "sigmoid", "relu", "softplus"])
def test_pointwise_gradients(rng, kind):
    x = param(rng, 5, 4)
    x.data[np.abs(x.data) < 1e-3] = 0.5  # keep relu away from its kink
    assert check_gradients(lambda: weighted_sum(pointwise(x, kind)), [x]) < TOL


def test_pointwise_unknown():
    with pytest.raises(ConfigError):
        pointwise(Tensor(1.0), "gelu")


# -- GRU -------------------------------------------------------------------


def _gru_params(rng, f, h, scale=0.5):
    return [param(rng, f, 3 * h, scale=scale), param(rng, h, 3 * h, scale=scale), param(rng, 3 * h, scale=scale), param(rng, 3 * h, scale=scale)]


def test_gru_zero_everything():
    f, h = 2, 3
    ps = [Tensor(np.zeros(s)) for s in [(f, 3 * h), (h, 3 * h), (3 * h,), (3 * h,)]]
    assert not gru(Tensor(np.zeros((1, 4, f))), *ps).data.any()


def test_gru_single_step_hand_computed():
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    x, h0 = 0.7, 0.3
    wr, wz, wn, ur, uz, un = 0.2, -0.4, 0.9, 0.5, 0.1, -0.3
    bir, biz, bin_, bhr, bhz, bhn = 0.05, -0.1, 0.2, 0.0, 0.3, -0.2
    r = sig(wr * x + bir + ur * h0 + bhr)
    z = sig(wz * x + biz + uz * h0 + bhz)
    n = np.tanh(wn * x + bin_ + r * (un * h0 + bhn))
    expected = (1 - z) * n + z * h0
    out = gru(
        Tensor([[[x]]]),
        Tensor([[wr, wz, wn]]),
        Tensor([[ur, uz, un]]),
        Tensor([bir, biz, bin_]),
        Tensor([bhr, bhz, bhn]),
        Tensor([[h0]]),
    )
    assert out.item() == pytest.approx(expected, abs=1e-14)


def test_gru_gradients_five_steps(rng):
    x, h0 = param(rng, 2, 5, 3), param(rng, 2, 4)
    ps = _gru_params(rng, 3, 4)
    assert check_gradients(lambda: weighted_sum(gru(x, *ps, h0)), [x, h0, *ps]) < TOL


def test_gru_against_torch(rng):
    torch = pytest.importorskip("torch")
    f, h = 3, 4
    ps = _gru_params(rng, f, h)
    x = rng.standard_normal((2, 7, f))
    net = torch.nn.GRU(f, h, batch_first=True).double()
    with torch.no_grad():
        net.weight_ih_l0.copy_(torch.tensor(ps[0].data.T))
        net.weight_hh_l0.copy_(torch.tensor(ps[1].data.T))
        net.bias_ih_l0.copy_(torch.tensor(ps[2].data))
        net.bias_hh_l0.copy_(torch.tensor(ps[3].data))
        ref = net(torch.tensor(x))[0].numpy()
    assert np.allclose(gru(Tensor(x), *ps).data, ref, atol=1e-12)


# -- backward --------------------------------------------------------------


def test_backward_sum_gives_ones(rng):
    w = param(rng, 3, 2)
    tsum(w).backward()
    assert np.array_equal(w.grad, np.ones((3, 2)))


def test_backward_inner_product(rng):
    w = param(rng, 6)
    tsum(w * w).backward()
    assert np.allclose(w.grad, 2 * w.data)


def test_backward_composite_graph(rng):
    a, b = param(rng, 4, 3), param(rng, 3, 2)

    def fn():
        y = matmul(a, b)
        return tsum(log(softplus(y) + 1.0) * sqrt(y * y + 1.0)) + tsum(pointwise(y, "tanh") * y)

    assert check_gradients(fn, [a, b]) < TOL


def test_backward_unreachable_untouched(rng):
    a, b = param(rng, 3), param(rng, 3)
    tsum(a * 2.0).backward()
    assert b.grad is None


def test_backward_nonscalar_root(rng):
    with pytest.raises(UsageError):
        (param(rng, 3) * 2.0).backward()


def test_backward_bit_identical_on_rerun():
    def run():
        rng = np.random.default_rng(5)
        x, k = param(rng, 2, 3, 20), param(rng, 4, 3, 5)
        tsum(pointwise(conv1d(x, k, dilation=2), "tanh") * 3.0).backward()
        return x.grad.tobytes(), k.grad.tobytes()

    assert run() == run()


def test_nan_surfaces_at_op_boundary():
    with pytest.raises(NonFiniteError):
        log(Tensor([-1.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_no_grad_is_thread_local():
    seen = []

    def worker():
        seen.append(is_grad_enabled())

    with no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert not is_grad_enabled()
    assert seen == [True] and is_grad_enabled()


# -- adam ------------------------------------------------------------------


def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    new, _ = adam_step(p, [np.zeros(2)], AdamState())
    assert np.array_equal(new[0], p[0])


def test_adam_first_step_is_lr_sign():
    p = [np.array([1.0, -2.0, 0.5])]
    g = [np.array([3.0, -0.2, 1e-3])]
    new, _ = adam_step(p, g, AdamState(), lr=0.01)
    assert np.allclose(new[0] - p[0], -0.01 * np.sign(g[0]), rtol=1e-4)


def test_adam_quadratic_bowl():
    target = np.array([1.5, -0.5, 2.0])
    w = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([w], lr=0.05)
    for _ in range(500):
        opt.zero_grad()
        d = w - Tensor(target)
        tsum(d * d).backward()
        opt.step()
    assert np.max(np.abs(w.data - target)) < 1e-3
