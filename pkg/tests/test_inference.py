import numpy as np
import pytest

from swvae.hmm import HmmParams, brute_force_posterior, forward_backward
from swvae.inference import (
    EnhancerConfig,
    ModelPosterior,
    PosteriorState,
    e_m_step,
    e_s_step,
    e_z_objective,
    e_z_step,
    emission_costs,
    enhance,
    g_t,
    gamma_mc,
    init_posterior,
    m_step,
    uniform_switch,
    wiener_violations,
)
from swvae.metrics import sdr
from swvae.nmf import NmfState, is_divergence
from swvae.numerics import AdamState, adam_step, finite_diff_check, make_rng
from swvae.signal import istft, make_noise, mix_at_snr, stft, synth_clean
from swvae.vae import AUDIO, AUDIOVISUAL, Mlp, VaeModel, gaussian_kl

F, L, V = 10, 3, 4


def linear_decoder_model(F=F, L=1):
    """sigma^2_f(z) = exp(sum_l z_l): decoder with identity activation."""
    rng = make_rng(0)
    dec = Mlp([L, F], act="identity")
    dec.weights[0][...] = 1.0
    return VaeModel(AUDIO, F, L, Mlp.init([F, 2 * L], rng), dec)


def constant_model(log_shape, kind=AUDIO, rng=None):
    """Decoder ignores z: sigma^2 = exp(log_shape)."""
    rng = rng or make_rng(1)
    Fm = log_shape.size
    m = VaeModel.create(kind, Fm, rng, latent_dim=L, hidden=5, visual_dim=V)
    m.decoder.theta[...] = 0.0
    m.decoder.biases[-1][...] = log_shape
    return m


def random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


# gamma -----------------------------------------------------------------


def test_gamma_two_sample_harmonic_mean():
    model = linear_decoder_model()
    samples = np.array([[[0.0]], [[np.log(3.0)]]])  # D=2, T=1, L=1
    gamma, mean_log = gamma_mc(model, samples)
    np.testing.assert_allclose(gamma, 1.5, rtol=0, atol=1e-12)
    np.testing.assert_allclose(mean_log, np.log(3.0) / 2, atol=1e-12)


def test_gamma_single_and_identical_samples(rng):
    model = VaeModel.create(AUDIOVISUAL, F, rng, latent_dim=L, hidden=6, visual_dim=V)
    z = rng.standard_normal((1, 4, L))
    v = rng.standard_normal((4, V))
    from swvae.vae import decode_variance

    direct = decode_variance(model, z[0], v)
    np.testing.assert_allclose(gamma_mc(model, z, v)[0], direct, rtol=1e-14)
    same = np.repeat(z, 5, axis=0)
    np.testing.assert_allclose(gamma_mc(model, same, v)[0], direct, rtol=1e-13)


def test_gamma_is_at_most_arithmetic_mean(rng):
    model = VaeModel.create(AUDIO, F, rng, latent_dim=L, hidden=6)
    z = 2 * rng.standard_normal((20, 3, L))
    from swvae.vae import decode_variance

    gamma, _ = gamma_mc(model, z)
    assert np.all(gamma <= decode_variance(model, z).mean(axis=0) * (1 + 1e-12))


# E-s -------------------------------------------------------------------


def test_e_s_equal_power_point(rng):
    x = random_complex(rng, 4, F)
    g = rng.uniform(0.5, 2.0, size=(4, F))
    eta, nu = e_s_step(x, g, g)
    np.testing.assert_allclose(eta, x / 2, rtol=1e-15)
    np.testing.assert_allclose(nu, g / 2, rtol=1e-15)


def test_e_s_limits(rng):
    x = random_complex(rng, 4, F)
    g = rng.uniform(0.5, 2.0, size=(4, F))
    eta, nu = e_s_step(x, g, 1e-12 * g, floor=1e-300)
    np.testing.assert_allclose(eta, x, atol=1e-6)
    np.testing.assert_allclose(nu, 0.0, atol=1e-6)
    eta, nu = e_s_step(x, 1e-12 * g, g, floor=1e-300)
    np.testing.assert_allclose(eta, 0.0, atol=1e-6)
    np.testing.assert_allclose(nu, 0.0, atol=1e-6)


def test_e_s_shrinkage(rng):
    x = random_complex(rng, 50, F)
    g = np.exp(3 * rng.standard_normal((50, F)))
    n = np.exp(3 * rng.standard_normal((50, F)))
    eta, nu = e_s_step(x, g, n)
    assert np.all(np.abs(eta) <= np.abs(x))
    assert np.all((nu > 0) & (nu < np.minimum(g, n)))


def test_wiener_violations_counts_bad_entries(rng):
    T = 3
    x = random_complex(rng, T, F)
    g = rng.uniform(0.5, 2.0, size=(T, F))
    wh = rng.uniform(0.5, 2.0, size=(T, F))
    eta, nu = e_s_step(x, g, wh)
    z = np.zeros((T, L))
    state = hand_state(x, g, eta, nu, z, z, z, z)
    nmf = NmfState(wh.T.copy(), np.eye(T))
    assert wiener_violations(state, x, nmf) == 0
    state.models[0].eta = 2 * x  # every magnitude too large
    state.models[0].nu = nu.copy()
    state.models[0].nu[0, :2] = -1.0
    assert wiener_violations(state, x, nmf) == T * F + 2


# E-z objective -----------------------------------------------------------


def test_ez_zero_weight(rng):
    model = VaeModel.create(AUDIO, F, rng, latent_dim=L, hidden=6)
    c, lo, eps = rng.standard_normal((3, L)), rng.standard_normal((3, L)), rng.standard_normal((3, L))
    obj, gc, glo = e_z_objective(c, lo, eps, model, None, rng.uniform(size=(3, F)), np.zeros(3))
    assert np.all(obj == 0) and np.all(gc == 0) and np.all(glo == 0)


def test_ez_at_prior_with_constant_decoder(rng):
    model = constant_model(rng.standard_normal(F))
    power = rng.uniform(0.1, 2.0, size=F)
    eps = rng.standard_normal(L)
    obj, gc, glo = e_z_objective(np.zeros(L), np.zeros(L), eps, model, None, power, 1.0)
    var = np.exp(model.decoder.biases[-1])
    assert obj == pytest.approx(-np.sum(np.log(var) + power / var), rel=1e-14)
    np.testing.assert_allclose(gc, 0.0, atol=1e-15)


@pytest.mark.parametrize("kind", [AUDIO, AUDIOVISUAL])
def test_ez_gradients_finite_differences(kind):
    for trial in range(5):
        r = make_rng(100 + trial)
        model = VaeModel.create(kind, F, r, latent_dim=L, hidden=6, visual_dim=V)
        v = r.standard_normal(V) if kind == AUDIOVISUAL else None
        c, lo, eps = r.standard_normal(L), 0.5 * r.standard_normal(L), r.standard_normal(L)
        power = r.uniform(0.1, 3.0, size=F)
        w = r.uniform(0.2, 1.0)
        _, gc, glo = e_z_objective(c, lo, eps, model, v, power, w)
        fc = lambda cc: float(e_z_objective(cc, lo, eps, model, v, power, w)[0])
        flo = lambda ll: float(e_z_objective(c, ll, eps, model, v, power, w)[0])
        assert finite_diff_check(fc, c.copy(), gc) < 1e-4
        assert finite_diff_check(flo, lo.copy(), glo) < 1e-4


def test_adam_ascent_on_frozen_sample(rng):
    model = VaeModel.create(AUDIO, F, rng, latent_dim=L, hidden=6)
    power = rng.uniform(0.1, 3.0, size=F)
    eps = rng.standard_normal(L)
    params = np.concatenate([rng.standard_normal(L), np.zeros(L)])
    f = lambda p: e_z_objective(p[:L], p[L:], eps, model, None, power, 1.0)
    before = float(f(params)[0])
    opt = AdamState.like(params, 0.05)
    for _ in range(10):
        _, gc, glo = f(params)
        params = adam_step(params, -np.concatenate([gc, glo]), opt)
    assert float(f(params)[0]) >= before


# state helpers -------------------------------------------------------------


def make_state(x, models, nmf, rng, cfg=None, v=None):
    cfg = cfg or EnhancerConfig(n_samples=5)
    return init_posterior(x, v, models, nmf, cfg, rng)


def flat_nmf(F, T, level):
    return NmfState(np.full((F, 1), level), np.ones((1, T)))


def test_init_uniform_switch_and_wiener(rng):
    T = 6
    x = random_complex(rng, T, F)
    sig2, n = 2.0, 0.5
    models = [constant_model(np.full(F, np.log(sig2))), constant_model(np.full(F, 0.0))]
    state = make_state(x, models, flat_nmf(F, T, n), rng)
    np.testing.assert_array_equal(state.switch.marginals, 0.5)
    np.testing.assert_allclose(state.models[0].eta, sig2 / (sig2 + n) * x, rtol=1e-12)
    np.testing.assert_allclose(state.models[1].eta, 1 / (1 + n) * x, rtol=1e-12)


def test_init_reseed_identical(toy_models):
    a, av = toy_models
    clean, vis, _ = synth_clean(2, 0.5, make_rng(3))
    x = stft(clean).values
    nmf = NmfState.init_random(np.abs(x.T) ** 2, 4, make_rng(1))
    s1 = make_state(x, [a, av], nmf, make_rng(5), v=vis.values)
    s2 = make_state(x, [a, av], nmf, make_rng(5), v=vis.values)
    for m1, m2 in zip(s1.models, s2.models):
        np.testing.assert_array_equal(m1.samples, m2.samples)
        np.testing.assert_array_equal(m1.eta, m2.eta)


def test_init_shape_errors(rng):
    x = random_complex(rng, 4, F)
    with pytest.raises(ValueError):
        make_state(x, [constant_model(np.zeros(F + 1))], flat_nmf(F + 1, 4, 1.0), rng)
    with pytest.raises(ValueError):
        make_state(x, [constant_model(np.zeros(F))], flat_nmf(F, 5, 1.0), rng)
    with pytest.raises(ValueError):
        make_state(x, [constant_model(np.zeros(F), AUDIOVISUAL)], flat_nmf(F, 4, 1.0), rng)


def test_e_z_zero_iterations_keeps_params(rng):
    T = 5
    x = random_complex(rng, T, F)
    model = VaeModel.create(AUDIO, F, rng, latent_dim=L, hidden=6)
    cfg = EnhancerConfig(n_samples=4, ez_iterations=0)
    state = make_state(x, [model], flat_nmf(F, T, 1.0), rng, cfg)
    c0, s0 = state.models[0].c.copy(), state.models[0].samples.copy()
    state = e_z_step(state, [model], None, cfg, rng)
    np.testing.assert_array_equal(state.models[0].c, c0)
    assert not np.array_equal(state.models[0].samples, s0)


def test_e_z_skips_negligible_weight(rng):
    T = 4
    x = random_complex(rng, T, F)
    models = [VaeModel.create(AUDIO, F, rng, latent_dim=L, hidden=6) for _ in range(2)]
    cfg = EnhancerConfig(n_samples=3)
    state = make_state(x, models, flat_nmf(F, T, 1.0), rng, cfg)
    r = np.zeros((T, 2))
    r[:, 0] = 1.0
    state.switch = forward_backward(HmmParams.uniform(2), np.log(np.maximum(r, 1e-300)))
    c1 = state.models[1].c.copy()
    c0 = state.models[0].c.copy()
    state = e_z_step(state, models, None, cfg, rng)
    np.testing.assert_array_equal(state.models[1].c, c1)
    assert not np.array_equal(state.models[0].c, c0)


# g_t -------------------------------------------------------------------------


def hand_state(x, sig2, eta, nu, c, lo, xi, llam):
    """Single-model state with D identical samples of variance sig2."""
    mp = ModelPosterior(c, lo, xi, llam)
    mp.gamma = sig2
    mp.mean_log_var = np.log(sig2)
    mp.eta, mp.nu = eta, nu
    return PosteriorState([mp], uniform_switch(x.shape[0], 1))


def test_g_first_term_zero_when_posterior_equals_prior(rng):
    T = 3
    x = random_complex(rng, T, F)
    sig2 = rng.uniform(0.5, 2.0, size=(T, F))
    wh = rng.uniform(0.5, 2.0, size=(T, F))
    z = np.zeros((T, L))
    state = hand_state(x, sig2, np.zeros((T, F), complex), sig2.copy(), z, z, z, z)
    nmf = NmfState(wh.T.copy(), np.eye(T))
    # what remains is the likelihood term alone
    expected = np.sum(np.log(np.pi * wh) + (np.abs(x) ** 2 + sig2) / wh, axis=1)
    for t in range(T):
        assert g_t(state, x, nmf, t, 0) == pytest.approx(expected[t], rel=1e-12)


def test_g_second_term_limit(rng):
    T = 2
    x = random_complex(rng, T, F)
    sig2 = rng.uniform(0.5, 2.0, size=(T, F))
    nu = np.full((T, F), 1e-9)
    wh = rng.uniform(0.5, 2.0, size=(T, F))
    c, lo = rng.standard_normal((T, L)), rng.standard_normal((T, L))
    state = hand_state(x, sig2, x.copy(), nu, c, lo, np.zeros((T, L)), np.zeros((T, L)))
    nmf = NmfState(wh.T.copy(), np.eye(T))
    kl_s = np.sum(np.log(sig2) - np.log(nu) + (nu + np.abs(x) ** 2) / sig2 - 1, axis=1)
    kl_z = gaussian_kl(c, lo, 0 * c, 0 * lo)
    second = np.array([g_t(state, x, nmf, t, 0) for t in range(T)]) - kl_s - kl_z
    np.testing.assert_allclose(second, np.sum(np.log(np.pi * wh), axis=1), rtol=1e-6)


def test_g_prefers_matching_model():
    Fb = 64
    shapes = np.stack(
        [np.log(np.linspace(3.0, 0.05, Fb)), np.log(np.linspace(0.05, 3.0, Fb))]
    )
    models = [constant_model(shapes[0], rng=make_rng(2)), constant_model(shapes[1], rng=make_rng(3))]
    wins = 0
    for trial in range(100):
        r = make_rng(500 + trial)
        k = trial % 2
        s = np.sqrt(np.exp(shapes[k]) / 2) * random_complex(r, 1, Fb)
        n = np.sqrt(0.1 / 2) * random_complex(r, 1, Fb)
        x = s + n
        state = make_state(x, models, flat_nmf(Fb, 1, 0.1), r)
        wins += g_t(state, x, flat_nmf(Fb, 1, 0.1), 0, k) < g_t(state, x, flat_nmf(Fb, 1, 0.1), 0, 1 - k)
    assert wins >= 95


# E-m ---------------------------------------------------------------------------


def two_model_state(rng, T=4):
    x = random_complex(rng, T, F)
    models = [
        constant_model(rng.standard_normal(F), rng=make_rng(7)),
        constant_model(rng.standard_normal(F), rng=make_rng(8)),
    ]
    nmf = NmfState(rng.uniform(0.5, 1.5, size=(F, 2)), rng.uniform(0.5, 1.5, size=(2, T)))
    return x, models, nmf, make_state(x, models, nmf, rng)


def test_e_m_matches_brute_force(rng):
    x, _, nmf, state = two_model_state(rng)
    hmm = HmmParams.random(2, rng)
    state, costs = e_m_step(state, x, nmf, hmm)
    ref = brute_force_posterior(hmm, -costs)
    np.testing.assert_allclose(state.switch.marginals, ref.marginals, atol=1e-10)
    np.testing.assert_allclose(state.switch.joints, ref.joints, atol=1e-10)
    assert state.switch.log_normalizer == pytest.approx(ref.log_normalizer, abs=1e-10)


def test_e_m_shift_invariance(rng):
    x, _, nmf, state = two_model_state(rng)
    hmm = HmmParams.random(2, rng)
    costs = emission_costs(state, x, nmf)
    shift = rng.standard_normal((costs.shape[0], 1)) * 100
    a = forward_backward(hmm, -costs).marginals
    b = forward_backward(hmm, -(costs + shift)).marginals
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_e_m_equal_costs_give_smoothed_prior(rng):
    T = 5
    x = random_complex(rng, T, F)
    same = constant_model(rng.standard_normal(F))
    nmf = flat_nmf(F, T, 1.0)
    state = make_state(x, [same, same], nmf, rng, EnhancerConfig(n_samples=1))
    # give both models identical posteriors so the costs tie exactly
    state.models[1] = state.models[0]
    hmm = HmmParams.random(2, rng)
    state, _ = e_m_step(state, x, nmf, hmm)
    prior = hmm.lam.copy()
    for t in range(T):
        np.testing.assert_allclose(state.switch.marginals[t], prior, atol=1e-12)
        prior = prior @ hmm.tau


def test_e_m_single_model(rng):
    T = 6
    x = random_complex(rng, T, F)
    nmf = flat_nmf(F, T, 1.0)
    state = make_state(x, [constant_model(np.zeros(F))], nmf, rng)
    state, _ = e_m_step(state, x, nmf, HmmParams.uniform(1))
    assert np.all(state.switch.marginals == 1.0)


# M -------------------------------------------------------------------------------


def test_m_step_monotone_and_stochastic(rng):
    x, _, nmf, state = two_model_state(rng, T=6)
    hmm = HmmParams.random(2, rng)
    state, _ = e_m_step(state, x, nmf, hmm)
    new_nmf, new_hmm, V = m_step(state, x, nmf, hmm)
    V = np.maximum(V, 1e-10)
    assert is_divergence(V, new_nmf.wh()) <= is_divergence(V, nmf.wh()) + 1e-10
    assert new_hmm.lam.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(new_hmm.tau.sum(axis=1), 1.0, atol=1e-12)


def test_m_step_perfect_fit_collapses_noise(rng):
    T = 5
    x = random_complex(rng, T, F)
    nmf = flat_nmf(F, T, 1.0)
    state = make_state(x, [constant_model(np.zeros(F))], nmf, rng)
    mp = state.models[0]
    mp.eta, mp.nu = x.copy(), np.full((T, F), 1e-10)
    hmm = HmmParams.uniform(1)
    start = nmf.wh().mean()
    levels = []
    for _ in range(30):
        nmf, hmm, _ = m_step(state, x, nmf, hmm)
        levels.append(nmf.wh().mean())
    assert np.all(np.diff(levels) <= 0)
    assert levels[-1] < 1e-3 * start


# enhance -------------------------------------------------------------------------


def short_mixture(seed, snr, duration=0.6, kind="white"):
    r = make_rng(seed)
    clean, vis, labels = synth_clean(2, duration, r)
    noise = make_noise(kind, len(clean), r)
    mix = mix_at_snr(clean, noise, snr)
    return clean, mix, vis, labels


def test_single_model_output_is_eta(toy_models):
    clean, mix, vis, _ = short_mixture(1, 5.0)
    X = stft(mix)
    res = enhance(X.values, vis.values, [toy_models[1]], EnhancerConfig(em_iterations=3, n_samples=4))
    np.testing.assert_array_equal(res.s_hat, res.state.models[0].eta)
    assert np.all(res.state.switch.marginals == 1.0)


def test_output_is_convex_combination(toy_models):
    clean, mix, vis, _ = short_mixture(2, 5.0)
    X = stft(mix)
    res = enhance(X.values, vis.values, list(toy_models), EnhancerConfig(em_iterations=3, n_samples=4))
    r = res.state.switch.marginals
    expected = r[:, :1] * res.state.models[0].eta + r[:, 1:] * res.state.models[1].eta
    np.testing.assert_allclose(res.s_hat, expected, rtol=1e-12)
    assert res.diagnostics.violations == 0


def test_enhance_deterministic(toy_models):
    clean, mix, vis, _ = short_mixture(3, 0.0)
    X = stft(mix)
    cfg = EnhancerConfig(em_iterations=4, n_samples=4, seed=9)
    r1 = enhance(X.values, vis.values, list(toy_models), cfg)
    r2 = enhance(X.values, vis.values, list(toy_models), cfg)
    assert r1.diagnostics.to_jsonl() == r2.diagnostics.to_jsonl()
    np.testing.assert_array_equal(r1.s_hat, r2.s_hat)
    r3 = enhance(X.values, vis.values, list(toy_models), EnhancerConfig(em_iterations=4, n_samples=4, seed=10))
    assert r3.diagnostics.to_jsonl() != r1.diagnostics.to_jsonl()


def test_diagnostics_records(toy_models):
    clean, mix, vis, _ = short_mixture(4, 5.0)
    X = stft(mix)
    res = enhance(X.values, vis.values, list(toy_models), EnhancerConfig(em_iterations=5, n_samples=3), keep_trajectory=True)
    recs = res.diagnostics.records
    assert [r["iteration"] for r in recs] == list(range(5))
    for r in recs:
        assert np.isfinite(r["elbo"]) and np.isfinite(r["is_divergence"])
        assert sum(r["mean_r"]) == pytest.approx(1.0)
    assert len(res.r_trajectory) == 5
    lines = res.diagnostics.to_jsonl().splitlines()
    assert len(lines) == 6 and '"tau"' in lines[-1]


def test_early_stop(toy_models):
    clean, mix, vis, _ = short_mixture(4, 5.0)
    X = stft(mix)
    cfg = EnhancerConfig(em_iterations=50, n_samples=2, early_stop=True, early_stop_tol=1.0, early_stop_window=3)
    res = enhance(X.values, vis.values, list(toy_models), cfg)
    assert len(res.diagnostics.records) == 4


@pytest.mark.slow
def test_no_harm_at_high_snr(trained_pair):
    clean, mix, vis, _ = short_mixture(5, 60.0, duration=3.0)
    X = stft(mix)
    res = enhance(X.values, vis.values, list(trained_pair), EnhancerConfig(em_iterations=30))
    out = istft(X.replace(res.s_hat))
    assert sdr(clean, out) >= sdr(clean, mix) - 1.0


def test_enhance_input_errors(toy_models):
    with pytest.raises(ValueError):
        enhance(np.zeros(5, complex), None, list(toy_models))
    with pytest.raises(ValueError):
        enhance(np.zeros((5, 513), complex), None, [])
    with pytest.raises(ValueError):
        EnhancerConfig(n_samples=0)
    with pytest.raises(ValueError):
        EnhancerConfig(ez_lr=0.0)
