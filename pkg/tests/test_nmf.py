import numpy as np
import pytest

from swvae.nmf import NmfState, is_divergence, posterior_power, update_h, update_w
from swvae.numerics import ShapeError, make_rng


def random_state(rng, F=12, T=15, K=3):
    return NmfState(rng.uniform(0.1, 2, (F, K)), rng.uniform(0.1, 2, (K, T)))


def test_fixed_point(rng):
    st = random_state(rng)
    V = st.W @ st.H
    np.testing.assert_allclose(update_h(st, V).H, st.H, rtol=1e-12)
    np.testing.assert_allclose(update_w(st, V).W, st.W, rtol=1e-12)


def test_updates_touch_only_their_factor(rng):
    st = random_state(rng)
    V = rng.uniform(0.1, 3, (12, 15))
    assert update_h(st, V).W is st.W
    assert update_w(st, V).H is st.H


def test_rank_one_recovery(rng):
    w, h = rng.uniform(0.5, 2, (20, 1)), rng.uniform(0.5, 2, (1, 25))
    V = w @ h
    st = NmfState(rng.uniform(0.5, 1.5, (20, 1)), rng.uniform(0.5, 1.5, (1, 25)))
    for _ in range(500):
        st = update_w(update_h(st, V), V)
    assert is_divergence(V, st.wh()) < 1e-8


def test_scale_equivariance(rng):
    V = rng.gamma(2.0, size=(10, 12))
    for c in (1e-3, 1e3):
        st = NmfState.init_random(c * V, 2, make_rng(1))
        for _ in range(300):
            st = update_w(update_h(st, c * V), c * V)
        assert np.mean(st.wh()) / np.mean(c * V) == pytest.approx(1.0, abs=0.05)


def test_divergence_monotone(rng):
    for trial in range(20):
        V = rng.gamma(1.0, size=(8, 9))
        st = random_state(rng, 8, 9, 2)
        d = is_divergence(V, st.wh())
        for _ in range(50):
            st = update_h(st, V)
            d_new = is_divergence(V, st.wh())
            assert d_new <= d + 1e-10
            st = update_w(st, V)
            d = is_divergence(V, st.wh())
            assert d <= d_new + 1e-10


def test_floor_preserved(rng):
    st = random_state(rng, 6, 7, 2)
    V = np.full((6, 7), 1e-30)
    for _ in range(50):
        st = update_w(update_h(st, V), V)
        assert st.W.min() >= st.floor and st.H.min() >= st.floor


def test_is_divergence_values(rng):
    U = rng.uniform(0.1, 2, (4, 5))
    assert is_divergence(U, U) == 0.0
    assert is_divergence(np.e * U, U) == pytest.approx(20 * (np.e - 2), rel=1e-12)
    V = rng.uniform(0.1, 2, (4, 5))
    assert is_divergence(V, U) != pytest.approx(is_divergence(U, V))
    with pytest.raises(ValueError):
        is_divergence(np.zeros((2, 2)), np.ones((2, 2)))


def test_posterior_power_cases(rng):
    T, F = 5, 4
    x = rng.normal(size=(T, F)) + 1j * rng.normal(size=(T, F))
    one = np.ones((T, 1))
    np.testing.assert_array_equal(posterior_power(x, one, x[None], np.zeros((1, T, F))), 0.0)
    nu = rng.uniform(size=(1, T, F))
    np.testing.assert_allclose(
        posterior_power(x, one, np.zeros((1, T, F)), nu), (np.abs(x) ** 2 + nu[0]).T, rtol=1e-14
    )


def test_posterior_power_loop_oracle(rng):
    T, F, M = 6, 5, 2
    x = rng.normal(size=(T, F)) + 1j * rng.normal(size=(T, F))
    r = rng.dirichlet(np.ones(M), size=T)
    eta = rng.normal(size=(M, T, F)) + 1j * rng.normal(size=(M, T, F))
    nu = rng.uniform(size=(M, T, F))
    V = posterior_power(x, r, eta, nu)
    for f in range(F):
        for t in range(T):
            ref = sum(r[t, m] * (abs(x[t, f] - eta[m, t, f]) ** 2 + nu[m, t, f]) for m in range(M))
            assert V[f, t] == pytest.approx(ref, abs=1e-12)


def test_shape_checks(rng):
    st = random_state(rng)
    with pytest.raises(ShapeError):
        update_h(st, np.ones((3, 3)))
    with pytest.raises(ShapeError):
        NmfState(np.ones((4, 2)), np.ones((3, 5)))
