import mpmath
import numpy as np
import pytest

from more import tensor as T
from more.tensor import DimensionError, Tensor, grad_check


def rnd(seed, *shape):
    return np.random.default_rng(seed).normal(size=shape)


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


# -- matmul ---------------------------------------------------------------------------
def test_matmul_identity_and_zero():
    a = t([[1, 2], [3, 4]])
    assert np.array_equal((t(np.eye(2)) @ a).data, a.data)
    assert np.array_equal((a @ t(np.zeros((2, 2)))).data, np.zeros((2, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


def test_matmul_gradcheck():
    b = t(rnd(1, 4, 2))
    assert grad_check(lambda a: T.tsum(a @ b), t(rnd(0, 3, 4))) < 1e-6
    a = t(rnd(0, 3, 4))
    assert grad_check(lambda b: T.tsum(T.exp(a @ b)), t(rnd(1, 4, 2))) < 1e-6


# -- softmax ---------------------------------------------------------------------------
def test_softmax_uniform_and_stable():
    assert np.allclose(T.softmax(t([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    out = T.softmax(t([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert abs(out[0] - 1) < 1e-12 and abs(out[1]) < 1e-12


def test_softmax_matches_high_precision():
    mpmath.mp.dps = 50
    es = [mpmath.e ** k for k in (1, 2, 3)]
    ref = [float(e / sum(es)) for e in es]
    out = T.softmax(t([1.0, 2.0, 3.0])).data
    assert np.max(np.abs(out - ref)) < 1e-15


def test_softmax_rows_sum_to_one():
    for seed in range(10):
        out = T.softmax(t(rnd(seed, 5, 7) * 30), axis=1).data
        assert np.all(out >= 0)
        assert np.max(np.abs(out.sum(axis=1) - 1)) < 1e-9


def test_softmax_nan_propagates():
    assert np.all(np.isnan(T.softmax(t([1.0, np.nan])).data))


# -- conv1d -----------------------------------------------------------------------------
def test_conv1d_examples():
    assert np.array_equal(T.conv1d(t([[1, 2, 3, 4]]), t([[[1]]])).data, [[1, 2, 3, 4]])
    assert np.array_equal(T.conv1d(t([[1, 1, 1, 1]]), t([[[1, 1]]]), stride=2).data, [[2, 2]])


def test_conv1d_kernel_too_long():
    with pytest.raises(DimensionError):
        T.conv1d(t(np.ones((1, 3))), t(np.ones((1, 1, 4))))


def test_conv1d_matches_direct_loop():
    x, w, b = rnd(0, 2, 3, 20), rnd(1, 4, 3, 5), rnd(2, 4)
    out = T.conv1d(t(x), t(w), t(b), stride=3).data
    Lout = (20 - 5) // 3 + 1
    ref = np.zeros((2, 4, Lout))
    for n in range(2):
        for o in range(4):
            for i in range(Lout):
                ref[n, o, i] = np.sum(x[n, :, i * 3 : i * 3 + 5] * w[o]) + b[o]
    assert np.max(np.abs(out - ref)) < 1e-12


def test_conv1d_gradcheck():
    w, b = t(rnd(1, 4, 3, 5)), t(rnd(2, 4))
    assert grad_check(lambda x: T.tsum(T.conv1d(x, w, b, 2) ** 2), t(rnd(0, 2, 3, 17))) < 1e-6
    x = t(rnd(0, 2, 3, 17))
    assert grad_check(lambda w: T.tsum(T.conv1d(x, w, b, 2) ** 2), t(rnd(1, 4, 3, 5))) < 1e-6
    assert grad_check(lambda b: T.tsum(T.conv1d(x, w, b, 2) ** 2), t(rnd(2, 4))) < 1e-6


# -- normalisation and pointwise ---------------------------------------------------------
def test_batch_norm_constant_batch():
    gamma, beta = t([2.0, 3.0]), t([0.5, -1.0])
    out = T.batch_norm(t(np.full((4, 2), 7.0)), gamma, beta, np.zeros(2), np.ones(2), True, channel_axis=-1)
    assert np.array_equal(out.data, np.tile([0.5, -1.0], (4, 1)))


def test_batch_norm_eval_uses_running_stats():
    rm, rv = np.array([1.0, 2.0]), np.array([4.0, 9.0])
    x = rnd(0, 5, 2)
    out = T.batch_norm(t(x), t([1.0, 1.0]), t([0.0, 0.0]), rm.copy(), rv.copy(), False, eps=0.0, channel_axis=-1)
    assert np.allclose(out.data, (x - rm) / np.sqrt(rv), atol=1e-14)


def test_relu_example():
    assert np.array_equal(T.relu(t([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_layer_norm_forward():
    x = rnd(3, 4, 6)
    out = T.layer_norm(t(x), None, None, eps=0.0).data
    ref = (x - x.mean(-1, keepdims=True)) / x.std(-1, keepdims=True)
    assert np.max(np.abs(out - ref)) < 1e-12


UNARY = {
    "exp": lambda x: T.exp(x),
    "log": lambda x: T.log(T.exp(x) + 1.0),
    "sqrt": lambda x: T.sqrt(x * x + 1.0),
    "power": lambda x: T.power(x * x + 1.0, 1.5),
    "neg": lambda x: -x,
    "relu": lambda x: T.relu(x),
    "gelu": lambda x: T.gelu(x),
    "div": lambda x: x / (x * x + 2.0),
    "sub": lambda x: 3.0 - x,
    "mean": lambda x: T.mean(x, axis=1, keepdims=True) * x,
    "reshape_transpose": lambda x: T.transpose(x.reshape(3, 4), (1, 0)) @ x.reshape(3, 4),
    "getitem": lambda x: x[1:, ::2] * x[:2, 1::2],
    "take_rows": lambda x: T.take_rows(x, np.array([0, 2, 2, 1])) * 2.0,
    "concat": lambda x: T.concat([x, x * x], axis=0),
    "masked_fill": lambda x: T.softmax(T.masked_fill(x, np.eye(3, 4, dtype=bool), -np.inf), axis=1),
    "softmax": lambda x: T.softmax(x, axis=0),
    "log_softmax": lambda x: T.log_softmax(x, axis=1),
    "layer_norm": lambda x: T.layer_norm(x, t(np.arange(1.0, 5.0)), t(np.ones(4)), 1e-5),
    "batch_norm": lambda x: T.batch_norm(x, t(np.arange(1.0, 5.0)), t(np.ones(4)), np.zeros(4), np.ones(4), True, channel_axis=1),
    "l2_normalize": lambda x: T.l2_normalize(x, axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_op_gradcheck_ten_seeds(name):
    f = UNARY[name]
    for seed in range(10):
        x = t(rnd(seed, 3, 4))
        w = rnd(100 + seed, *f(x).shape)  # random weights so the scalar sees every output
        assert grad_check(lambda x: T.tsum(f(x) * w), x) < 1e-4, seed


def test_composite_mlp_gradcheck():
    from more.nn import Mlp

    mlp = Mlp(4, 8, np.random.default_rng(0))
    assert grad_check(lambda x: T.tsum(mlp(x) ** 2), t(rnd(0, 3, 4))) < 1e-6
    assert grad_check(lambda w: T.tsum(T.gelu(t(rnd(0, 3, 4)) @ w) ** 2), t(rnd(1, 4, 8))) < 1e-6


# -- grad_check itself ------------------------------------------------------------------
def test_grad_check_linear_exact_zero():
    # dyadic entries keep every partial sum exact
    for seed in range(5):
        x = np.round(rnd(seed, 3, 5) * 64) / 64
        assert grad_check(lambda x: T.tsum(x), t(x), eps=2.0**-10) == 0.0
    # arbitrary reals: only the rounding of the remaining summands is left
    for seed in range(5):
        assert grad_check(lambda x: T.tsum(x), t(rnd(seed, 3, 5))) < 1e-9


def test_grad_check_square():
    x = t([3.0])
    x.requires_grad = True
    (x * x).sum().backward()
    assert x.grad[0] == 6.0
    assert grad_check(lambda x: T.tsum(x * x), t([3.0])) < 1e-9


def test_grad_check_symmetric_pair_loss():
    from more.objective import symmetric_pair_loss

    zb = T.l2_normalize(t(rnd(1, 4, 8)), axis=1)
    f = lambda za: symmetric_pair_loss(T.l2_normalize(za, axis=1), zb, 0.1)
    assert grad_check(f, t(rnd(0, 4, 8))) < 1e-4


# -- tape behaviour ----------------------------------------------------------------------
def test_backward_reaches_every_leaf_and_shapes_match():
    a, b = Tensor(rnd(0, 3, 4), requires_grad=True), Tensor(rnd(1, 4), requires_grad=True)
    c = Tensor(rnd(2, 4, 2), requires_grad=True)
    T.tsum(T.relu(a + b) @ c).backward()
    for p in (a, b, c):
        assert p.grad is not None and p.grad.shape == p.shape


def test_backward_is_bit_stable():
    def run():
        a = Tensor(rnd(0, 5, 6), requires_grad=True)
        y = T.softmax(a @ T.transpose(a), axis=1)
        T.tsum(T.log(y + 1.0) * T.gelu(a @ T.transpose(a))).backward()
        return a.grad

    assert np.array_equal(run(), run())


def test_no_grad_records_nothing():
    a = Tensor(rnd(0, 2, 2), requires_grad=True)
    with T.no_grad():
        y = a * 2.0
    assert not y.requires_grad
