"""Experiment harness shared by the CLI, the pilot script and the acceptance tests.

Builds synthetic corpora and test utterances, trains model sets (with an
on-disk cache keyed by configuration and source revision) and runs
enhancement over SNR x visual-condition grids.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

import swvae
from swvae.inference import EnhancerConfig, enhance
from swvae.metrics import EvalReport, evaluate_run
from swvae.numerics import make_rng
from swvae.signal import StftConfig, VisualSequence, Waveform, istft, make_noise, mix_at_snr, occlude, stft, synth_clean
from swvae.signal.synth import signal_power
from swvae.vae import AUDIO, AUDIOVISUAL, VaeModel, load_model, save_model, train_vae

log = logging.getLogger(__name__)

CACHE_ENV = "SWVAE_CACHE"
# modules whose source determines trained weights
_TRAINING_SOURCES = ("signal/synth.py", "signal/visual.py", "signal/stft.py", "vae.py", "numerics.py")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    regimes: int = 2
    visual_dim: int = 8
    visual_noise: float = 0.1
    level_rms: float = 0.05
    train_duration: float = 120.0
    epochs: int = 400
    latent_dim: int = 16
    hidden: int = 128
    lr: float = 1e-3
    batch_size: int = 64
    test_duration: float = 3.0
    occlusion_fraction: float = 1.0 / 3.0
    occlusion_burst: int = 20
    stft: StftConfig = StftConfig()
    # regime-matched models for switching recovery are deliberately small
    toy_latent_dim: int = 2
    toy_hidden: int = 64
    toy_epochs: int = 200

    def training_key(self, toy: bool = False) -> str:
        """Hash of everything that affects trained weights."""
        fields = asdict(self)
        for k in ("test_duration", "occlusion_fraction", "occlusion_burst"):
            fields.pop(k)
        if not toy:
            fields.pop("toy_latent_dim")
            fields.pop("toy_hidden")
            fields.pop("toy_epochs")
        h = hashlib.sha256(json.dumps(fields, sort_keys=True).encode())
        root = Path(swvae.__file__).parent
        for rel in _TRAINING_SOURCES:
            h.update((root / rel).read_bytes())
        return h.hexdigest()[:16]


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.cwd() / ".cache" / "swvae")


# --------------------------------------------------------------------------
# data


def training_corpus(cfg: ExperimentConfig):
    """(clean, visual, labels) for model training."""
    return synth_clean(
        cfg.regimes, cfg.train_duration, make_rng(cfg.seed), cfg.stft, cfg.visual_dim,
        cfg.level_rms, visual_noise=cfg.visual_noise,
    )


@dataclass(frozen=True)
class TestUtterance:
    __test__ = False  # not a pytest class

    clean: Waveform
    noise: Waveform  # at the clean level (0 dB)
    visual: VisualSequence
    occluded: VisualSequence
    labels: np.ndarray
    noise_kind: str
    stft: StftConfig = StftConfig()

    def mixture(self, snr_db: float) -> Waveform:
        return mix_at_snr(self.clean, self.noise, snr_db)

    def visual_for(self, condition: str) -> VisualSequence:
        if condition not in ("clean", "occluded"):
            raise ValueError(f"unknown visual condition {condition!r}")
        return self.visual if condition == "clean" else self.occluded


def make_utterance(cfg: ExperimentConfig, rng: np.random.Generator, noise_kind: str) -> TestUtterance:
    clean, vis, labels = synth_clean(
        cfg.regimes, cfg.test_duration, rng, cfg.stft, cfg.visual_dim, cfg.level_rms,
        visual_noise=cfg.visual_noise,
    )
    noise = make_noise(noise_kind, len(clean), rng, cfg.stft.sample_rate)
    noise = Waveform(noise.samples * np.sqrt(signal_power(clean.samples)), clean.sample_rate)
    occ = occlude(vis, cfg.occlusion_fraction, rng, cfg.occlusion_burst)
    return TestUtterance(clean, noise, vis, occ, labels, noise_kind, cfg.stft)


def utterance_set(cfg: ExperimentConfig, n: int, base_seed: int, noise_kinds=("white", "pink")) -> list[TestUtterance]:
    """``n`` utterances; noise kinds alternate, utterance i uses seed base_seed + i."""
    return [make_utterance(cfg, make_rng(base_seed + i), noise_kinds[i % len(noise_kinds)]) for i in range(n)]


# --------------------------------------------------------------------------
# training with cache


def _train(kind, power, vis, cfg: ExperimentConfig, seed: int, model_id: int, toy: bool = False):
    init_rng, train_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    if toy:
        latent, hidden, epochs = cfg.toy_latent_dim, cfg.toy_hidden, cfg.toy_epochs
    else:
        latent, hidden, epochs = cfg.latent_dim, cfg.hidden, cfg.epochs
    model = VaeModel.create(kind, power.shape[1], init_rng, latent, hidden, cfg.visual_dim, model_id)
    res = train_vae(model, power, vis, epochs, train_rng, cfg.lr, cfg.batch_size)
    return res.model, res.losses


def _cached(cache_dir, name: str, build):
    """Load ``name`` checkpoints from cache or build and store them."""
    if cache_dir is None:
        return build()
    path = Path(cache_dir) / name
    index = path / "models.json"
    if index.exists():
        meta = json.loads(index.read_text())
        log.info("loading cached models from %s", path)
        return [load_model(path / f) for f in meta["files"]], meta["losses"]
    models, losses = build()
    files = []
    for i, m in enumerate(models):
        f = f"model{i}_{m.kind}.ckpt"
        save_model(path / f, m)
        files.append(f)
    index.write_text(json.dumps({"files": files, "losses": losses}, indent=1))
    return models, losses


def train_pair(cfg: ExperimentConfig, cache_dir=None):
    """Trained [A-VAE, AV-VAE] on the training corpus, plus their loss curves."""

    def build():
        t0 = time.time()
        clean, vis, _ = training_corpus(cfg)
        power = stft(clean, cfg.stft).power()
        a, la = _train(AUDIO, power, None, cfg, cfg.seed + 1, 0)
        av, lav = _train(AUDIOVISUAL, power, vis.values, cfg, cfg.seed + 2, 1)
        log.info("trained A/AV pair in %.0f s", time.time() - t0)
        return [a, av], [la, lav]

    return _cached(cache_dir, f"pair-{cfg.training_key()}", build)


def train_regime_models(cfg: ExperimentConfig, cache_dir=None):
    """One small audio-only VAE per regime, each fit to that regime's frames only."""

    def build():
        clean, _, labels = training_corpus(cfg)
        power = stft(clean, cfg.stft).power()
        models, curves = [], []
        for k in range(cfg.regimes):
            m, losses = _train(AUDIO, power[labels == k], None, cfg, cfg.seed + 10 + k, k, toy=True)
            models.append(m)
            curves.append(losses)
        return models, curves

    return _cached(cache_dir, f"regimes-{cfg.training_key(toy=True)}", build)


# --------------------------------------------------------------------------
# runs


def run_enhancement(models, utt: TestUtterance, snr_db: float, visual: str, enh: EnhancerConfig, condition=None):
    """Enhance one mixture; returns (metrics record, EnhanceResult, enhanced waveform)."""
    mix = utt.mixture(snr_db)
    X = stft(mix, utt.stft)
    t0 = time.perf_counter()
    res = enhance(X.values, utt.visual_for(visual).values, models, enh)
    elapsed = time.perf_counter() - t0
    out = istft(X.replace(res.s_hat))
    cond = {"noise": utt.noise_kind, "snr": float(snr_db), "visual": visual, **(condition or {})}
    rec = evaluate_run(utt.clean, mix, out, utt.labels, res.state.switch, cond)
    rec["wiener_violations"] = res.diagnostics.violations
    rec["seconds"] = elapsed
    return rec, res, out


def run_grid(models, utts, snrs, visuals, enh: EnhancerConfig, progress=None) -> EvalReport:
    """Every utterance x SNR x visual condition, each with its own seed."""
    report = EvalReport()
    for i, utt in enumerate(utts):
        for j, snr in enumerate(snrs):
            for k, vis in enumerate(visuals):
                seed = int(np.random.SeedSequence([enh.seed, i, j, k]).generate_state(1)[0])
                rec, _, _ = run_enhancement(models, utt, snr, vis, replace(enh, seed=seed), {"utt": i})
                report.add(rec)
                if progress:
                    progress(rec)
    return report
