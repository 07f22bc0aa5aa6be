import pytest

from swvae.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(20240611)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


@pytest.fixture(scope="session")
def toy_models():
    """Quickly trained (A-VAE, AV-VAE) pair on a short synthetic corpus."""
    from swvae.signal import stft, synth_clean
    from swvae.vae import AUDIO, AUDIOVISUAL, VaeModel, train_vae

    clean, vis, _ = synth_clean(2, 12.0, make_rng(11))
    power = stft(clean).power()
    a = VaeModel.create(AUDIO, power.shape[1], make_rng(12), model_id=0)
    av = VaeModel.create(AUDIOVISUAL, power.shape[1], make_rng(13), model_id=1)
    a = train_vae(a, power, None, 30, make_rng(14)).model
    av = train_vae(av, power, vis.values, 30, make_rng(15)).model
    return a, av


@pytest.fixture(scope="session")
def trained_pair():
    """Full-size (A-VAE, AV-VAE) pair, trained once and cached on disk."""
    from swvae.experiments import ExperimentConfig, default_cache_dir, train_pair

    models, _ = train_pair(ExperimentConfig(), default_cache_dir())
    return models
