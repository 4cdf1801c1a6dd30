import math

import numpy as np
import pytest

from more import objective as O
from more import tensor as T
from more.tensor import DimensionError, Tensor, grad_check


def unit(seed, n=4, d=8):
    x = np.random.default_rng(seed).normal(size=(n, d))
    return Tensor(x / np.linalg.norm(x, axis=1, keepdims=True))


def nce_reference(S, tau):
    # plain-python evaluation of the directional term, row by row
    n = len(S)
    total = 0.0
    for i in range(n):
        denom = math.fsum(math.exp(S[i][k] / tau) for k in range(n))
        total += -math.log(math.exp(S[i][i] / tau) / denom)
    return total / n


# -- directional InfoNCE -----------------------------------------------------------------
def test_single_row_is_zero():
    assert O.info_nce_directional(np.array([[0.3]]), 0.1).item() == 0.0


@pytest.mark.parametrize("n", [2, 4, 8])
def test_constant_matrix_gives_log_n(n):
    assert abs(O.info_nce_directional(np.full((n, n), 0.37), 0.1).item() - math.log(n)) < 1e-9


def test_closed_form_identity():
    got = O.info_nce_directional(np.eye(2), 0.1).item()
    assert abs(got - math.log1p(math.exp(-10))) < 1e-15
    assert abs(got - 4.5399e-5) < 1e-8


def test_tau_must_be_positive():
    with pytest.raises(O.ParameterError):
        O.info_nce_directional(np.eye(2), 0.0)


def test_directional_matches_reference():
    S = np.random.default_rng(0).uniform(-1, 1, (5, 5))
    assert abs(O.info_nce_directional(S, 0.07).item() - nce_reference(S.tolist(), 0.07)) < 1e-12


def test_increasing_diagonal_lowers_loss():
    S = np.random.default_rng(1).uniform(-1, 1, (4, 4))
    base = O.info_nce_directional(S, 0.1).item()
    S2 = S.copy()
    S2[2, 2] += 0.1
    assert O.info_nce_directional(S2, 0.1).item() < base


def test_nonnegative_and_vanishing_limit():
    S = np.random.default_rng(2).uniform(-1, 1, (6, 6))
    assert O.info_nce_directional(S, 0.5).item() >= 0
    D = np.full((3, 3), -0.5) + 1.5 * np.eye(3)
    assert O.info_nce_directional(D, 1e-3).item() < 1e-12
    assert np.all(np.argmax(D, axis=1) == np.arange(3))


def test_tau_gradient():
    za, zb = unit(0), unit(1)
    tau = Tensor(np.array(0.2))
    assert grad_check(lambda t: O.symmetric_pair_loss(za, zb, t), tau) < 1e-4


# -- cosine matrix --------------------------------------------------------------------------
def test_cosine_examples():
    q = np.linalg.qr(np.random.default_rng(0).normal(size=(8, 8)))[0][:4]
    assert np.allclose(O.cosine_sim_matrix(Tensor(q), Tensor(q)).data, np.eye(4), atol=1e-15)
    a = unit(3, 1)
    assert abs(O.cosine_sim_matrix(a, Tensor(-a.data)).data[0, 0] + 1) < 1e-15


def test_cosine_brute_force():
    a, b = np.random.default_rng(0).normal(size=(2, 4, 8))
    za = a / np.linalg.norm(a, axis=1, keepdims=True)
    zb = b / np.linalg.norm(b, axis=1, keepdims=True)
    S = O.cosine_sim_matrix(Tensor(za), Tensor(zb)).data
    for i in range(4):
        for j in range(4):
            assert abs(S[i, j] - a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]))) < 1e-10
    assert np.all(np.abs(S) <= 1 + 1e-6)
    with pytest.raises(DimensionError):
        O.cosine_sim_matrix(Tensor(za), Tensor(zb[:, :4]))


# -- symmetric and total -------------------------------------------------------------------
def test_symmetric_swap_bitwise():
    za, zb = unit(0), unit(1)
    assert O.symmetric_pair_loss(za, zb, 0.1).item() == O.symmetric_pair_loss(zb, za, 0.1).item()


def test_symmetric_closed_form():
    z = Tensor(np.eye(2))
    assert abs(O.symmetric_pair_loss(z, z, 1.0).item() - math.log1p(math.exp(-1))) < 1e-15
    assert abs(math.log1p(math.exp(-1)) - 0.313262) < 1e-6


def test_symmetric_is_mean_of_directions():
    za, zb = unit(4), unit(5)
    S = za.data @ zb.data.T
    ref = 0.5 * (O.info_nce_directional(S, 0.1).item() + O.info_nce_directional(S.T, 0.1).item())
    assert abs(O.symmetric_pair_loss(za, zb, 0.1).item() - ref) < 1e-12


def test_total_equal_halves():
    zt, zx = unit(0), unit(1)
    assert O.total_loss(zt, zx, zx, 0.1).item() == O.symmetric_pair_loss(zt, zx, 0.1).item()


def test_total_permutation_invariant():
    zt, zx, ze = unit(0), unit(1), unit(2)
    p = np.array([2, 0, 3, 1])
    a = O.total_loss(zt, zx, ze, 0.1).item()
    b = O.total_loss(Tensor(zt.data[p]), Tensor(zx.data[p]), Tensor(ze.data[p]), 0.1).item()
    assert abs(a - b) < 1e-12


def test_total_matches_four_term_reference():
    zt, zx, ze = unit(0), unit(1), unit(2)
    tau = 0.1

    def sim(a, b):
        return [[float(np.dot(a[i], b[j])) for j in range(4)] for i in range(4)]

    Stx, Ste = sim(zt.data, zx.data), sim(zt.data, ze.data)
    T_ = lambda S: [list(r) for r in zip(*S)]
    ref = 0.5 * (
        0.5 * (nce_reference(Stx, tau) + nce_reference(T_(Stx), tau))
        + 0.5 * (nce_reference(Ste, tau) + nce_reference(T_(Ste), tau))
    )
    assert abs(O.total_loss(zt, zx, ze, tau).item() - ref) < 1e-12


def test_batch_size_mismatch():
    with pytest.raises(DimensionError):
        O.total_loss(unit(0, 4), unit(1, 3), unit(2, 4), 0.1)


# -- projection head and temperature -------------------------------------------------------
def test_project_unit_norm_and_gradcheck():
    head = O.ProjectionHead(16, 32, 8, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(5, 16)))
    z = O.project(head, x)
    assert np.max(np.abs(np.linalg.norm(z.data, axis=1) - 1)) < 1e-9
    assert head.fc1.bias is None and head.fc2.bias is not None
    w = np.random.default_rng(2).normal(size=(5, 8))
    assert grad_check(lambda x: T.tsum(O.project(head, x) * w), x) < 1e-4
    z2 = O.project(head, Tensor(x.data * 2))
    assert np.all(np.abs(z2.data @ z.data.T) <= 1 + 1e-12)


def test_temperature_init_and_clamp():
    t = O.Temperature()
    assert abs(t.value - 0.1) < 1e-15
    t.log_tau.data = np.array(50.0)
    t.clamp_()
    assert abs(t.value - O.TAU_MAX) < 1e-12
    t.log_tau.data = np.array(-50.0)
    t.clamp_()
    assert abs(t.value - O.TAU_MIN) < 1e-15
