"""Synthetic piecewise-stationary "speech", noise generators, SNR mixing.

Regimes alternate between two spectrally distinct source types: voiced
(harmonic, low formants, random pitch) and fricative (resonator-filtered
noise, high formants). Regime k >= 2 reuses the type of k % 2 with its
formants shifted so every regime has its own envelope.
"""

from __future__ import annotations

import numpy as np
from scipy import signal as sps

from swvae.signal.stft import StftConfig, Waveform, n_frames_for
from swvae.signal.visual import visual_from_power

VOICED_FORMANTS = (500.0, 1500.0)
FRICATIVE_FORMANTS = (2500.0, 4500.0)
NOISE_KINDS = ("white", "pink", "brown")


def _resonator(freq: float, bandwidth: float, sr: int):
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2 * np.pi * freq / sr
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    b = np.array([1.0 - r])
    return b, a


def _formants(regime: int) -> tuple[float, ...]:
    base = VOICED_FORMANTS if regime % 2 == 0 else FRICATIVE_FORMANTS
    shift = 1.0 + 0.25 * (regime // 2)
    return tuple(min(f * shift, 7000.0) for f in base)


def regime_envelope(regime: int, n_bins: int, sample_rate: int) -> np.ndarray:
    """Nominal power envelope of a regime over ``n_bins`` STFT bins."""
    f = np.linspace(0.0, sample_rate / 2, n_bins)
    fcs = _formants(regime)
    if regime % 2 == 0:
        amp = sum(1.0 / (1.0 + ((f - fc) / 200.0) ** 2) for fc in fcs) + 0.05
        # harmonic amplitudes fall as h^-1/2 and stop at 4 kHz
        amp = amp / np.sqrt(np.maximum(f, 150.0) / 150.0)
        amp[f > 4000.0] = 1e-3 * amp[f <= 4000.0].min()
        return amp**2
    w = np.exp(2j * np.pi * f / sample_rate)
    env = np.zeros(n_bins)
    for fc in fcs:
        b, a = _resonator(fc, 400.0, sample_rate)
        env += np.abs(b[0] / (a[0] + a[1] / w + a[2] / w**2)) ** 2
    return env


def _voiced(n: int, regime: int, rng: np.random.Generator, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    dur = n / sr
    # pitch glides by up to half an octave over the segment, plus vibrato
    glide = rng.uniform(-0.5, 0.5) * t / max(dur, 1e-3)
    vibrato = 0.04 * np.sin(2 * np.pi * rng.uniform(4, 7) * t + rng.uniform(0, 2 * np.pi))
    f0 = rng.uniform(110.0, 200.0) * 2.0 ** (glide + vibrato)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    # each segment is a different "vowel" of the regime
    formants = [fc * rng.uniform(0.8, 1.25) for fc in _formants(regime)]
    out = np.zeros(n)
    for h in range(1, int(4000.0 / f0.max()) + 1):
        fh = h * f0
        env = sum(1.0 / (1.0 + ((fh - fc) / 200.0) ** 2) for fc in formants)
        out += (env + 0.05) / h**0.5 * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    return out


def _fricative(n: int, regime: int, rng: np.random.Generator, sr: int, block: int = 128) -> np.ndarray:
    # resonators whose centre frequencies drift by up to +-20% over the segment
    src = rng.standard_normal(n)
    out = np.zeros(n)
    drift = rng.uniform(-0.2, 0.2, size=len(_formants(regime)))
    centres = [fc * rng.uniform(0.85, 1.15) for fc in _formants(regime)]
    for fc, d in zip(centres, drift):
        zi = np.zeros(2)
        for start in range(0, n, block):
            frac = start / max(n, 1)
            b, a = _resonator(fc * (1 + d * frac), 400.0, sr)
            y, zi = sps.lfilter(b, a, src[start : start + block], zi=zi)
            out[start : start + block] += y
    return out


def _segment(n: int, regime: int, rng: np.random.Generator, sr: int) -> np.ndarray:
    gen = _voiced if regime % 2 == 0 else _fricative
    x = gen(n, regime, rng, sr)
    t = np.arange(n) / sr
    x *= 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(3, 5) * t + rng.uniform(0, 2 * np.pi))
    x /= np.sqrt(np.mean(x**2)) + 1e-300
    fade = min(int(0.008 * sr), n // 4)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    return x


def synth_clean(
    regimes: int,
    duration: float,
    rng: np.random.Generator,
    config: StftConfig | None = None,
    visual_dim: int = 8,
    level_rms: float = 0.05,
    segment_range: tuple[float, float] = (0.15, 0.45),
    visual_noise: float = 0.1,
):
    """Generate (clean waveform, aligned visual sequence, per-frame regime labels)."""
    if regimes < 1:
        raise ValueError("regimes must be >= 1")
    config = config or StftConfig()
    sr = config.sample_rate
    n = int(round(duration * sr))
    if n <= config.win_length:
        raise ValueError(f"duration {duration}s is shorter than one STFT window")
    x = np.zeros(n)
    sample_regime = np.zeros(n, dtype=np.int64)
    pos = 0
    regime = int(rng.integers(regimes))
    while pos < n:
        seg = int(rng.uniform(*segment_range) * sr)
        seg = min(seg, n - pos)
        gain = level_rms * 10 ** (rng.uniform(-3.0, 3.0) / 20)
        x[pos : pos + seg] = gain * _segment(seg, regime, rng, sr)
        sample_regime[pos : pos + seg] = regime
        pos += seg
        if regimes > 1:
            regime = int((regime + rng.integers(1, regimes)) % regimes)
    clean = Waveform(x, sr)
    T = n_frames_for(n, config)
    labels = sample_regime[np.minimum(np.arange(T) * config.hop, n - 1)]
    envelopes = np.stack([regime_envelope(k, config.n_bins, sr) for k in range(regimes)])
    vis = visual_from_power(envelopes[labels], sr, visual_dim, rng, visual_noise)
    return clean, vis, labels


def make_noise(kind: str, n: int, rng: np.random.Generator, sample_rate: int = 16000) -> Waveform:
    """Unit-RMS stationary noise: white, pink (1/f power) or brown (1/f^2)."""
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    x = rng.standard_normal(n)
    if kind != "white":
        spec = np.fft.rfft(x)
        f = np.fft.rfftfreq(n, 1.0 / sample_rate)
        f[0] = f[1]
        exponent = 0.5 if kind == "pink" else 1.0
        x = np.fft.irfft(spec / f**exponent, n=n)
    x = x - x.mean()
    return Waveform(x / np.sqrt(np.mean(x**2)), sample_rate)


def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """``clean + a * noise`` with ``a`` chosen so the SNR is exactly ``snr_db``."""
    if len(clean) != len(noise):
        raise ValueError(f"length mismatch: clean {len(clean)}, noise {len(noise)}")
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("sample rate mismatch between clean and noise")
    p_clean = signal_power(clean.samples)
    p_noise = signal_power(noise.samples)
    if p_clean == 0.0:
        raise ValueError("clean signal is silent")
    if p_noise == 0.0:
        raise ValueError("noise signal is silent")
    alpha = np.sqrt(p_clean / (p_noise * 10 ** (snr_db / 10)))
    return Waveform(clean.samples + alpha * noise.samples, clean.sample_rate)
