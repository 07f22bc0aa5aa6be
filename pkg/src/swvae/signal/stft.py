"""STFT analysis and weighted overlap-add synthesis."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from swvae.numerics import check_finite


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    win_length: int = 1024
    hop: int = 256
    window: str = "hann"

    @property
    def n_bins(self) -> int:
        return self.win_length // 2 + 1

    def window_array(self) -> np.ndarray:
        return _window(self.window, self.win_length)


@lru_cache(maxsize=16)
def _window(kind: str, n: int) -> np.ndarray:
    k = np.arange(n)
    if kind == "hann":
        # periodic Hann
        w = 0.5 - 0.5 * np.cos(2 * np.pi * k / n)
    elif kind == "rect":
        w = np.ones(n)
    elif kind == "sqrt_hann":
        w = np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * k / n))
    else:
        raise ValueError(f"unknown window {kind!r}")
    w.setflags(write=False)
    return w


def is_cola(config: StftConfig, tol: float = 1e-10) -> bool:
    """True if the squared window overlap-adds to a constant at ``hop``."""
    w2 = config.window_array() ** 2
    n, hop = config.win_length, config.hop
    if hop > n or n % hop:
        return False
    acc = w2.reshape(n // hop, hop).sum(axis=0)
    return bool(np.ptp(acc) <= tol * max(acc.max(), 1e-300) and acc.min() > 0)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        check_finite("waveform", s)
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    """T x F complex STFT plus what is needed to invert it."""

    values: np.ndarray
    config: StftConfig
    length: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim != 2 or v.shape[1] != self.config.n_bins:
            raise ValueError(
                f"spectrogram must be T x {self.config.n_bins}, got {v.shape}"
            )
        check_finite("spectrogram", v)
        object.__setattr__(self, "values", v)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def power(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def replace(self, values: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(values, self.config, self.length)


def n_frames_for(length: int, config: StftConfig) -> int:
    return 1 + length // config.hop


def _frames(x: np.ndarray, config: StftConfig) -> np.ndarray:
    n, hop = config.win_length, config.hop
    T = n_frames_for(x.size, config)
    pad_left = n // 2
    total = (T - 1) * hop + n
    padded = np.zeros(total)
    padded[pad_left : pad_left + x.size] = x
    idx = np.arange(n)[None, :] + hop * np.arange(T)[:, None]
    return padded[idx]


def stft(w: Waveform, config: StftConfig | None = None) -> ComplexSpectrogram:
    """Centered STFT: frame t is the window centred on sample ``t * hop``.

    The signal is zero-padded by half a window on the left and as needed on
    the right, so every sample is covered by the full overlap-add sum.
    """
    config = config or StftConfig(sample_rate=w.sample_rate)
    if w.sample_rate != config.sample_rate:
        raise ValueError(
            f"waveform rate {w.sample_rate} != STFT config rate {config.sample_rate}"
        )
    if len(w) <= config.win_length:
        raise ValueError(
            f"signal of {len(w)} samples is too short for a {config.win_length}-sample window"
        )
    frames = _frames(w.samples, config) * config.window_array()
    return ComplexSpectrogram(np.fft.rfft(frames, axis=1), config, len(w))


def istft(spec: ComplexSpectrogram) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft` (exact for COLA configs)."""
    config = spec.config
    if not is_cola(config):
        raise ValueError(
            f"window {config.window!r} with length {config.win_length} and hop "
            f"{config.hop} does not satisfy the constant-overlap-add condition"
        )
    n, hop = config.win_length, config.hop
    win = config.window_array()
    frames = np.fft.irfft(spec.values, n=n, axis=1) * win
    T = spec.n_frames
    total = (T - 1) * hop + n
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(T):
        out[t * hop : t * hop + n] += frames[t]
        norm[t * hop : t * hop + n] += win**2
    pad_left = n // 2
    out = out[pad_left : pad_left + spec.length]
    norm = norm[pad_left : pad_left + spec.length]
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-10)
    return Waveform(out, config.sample_rate)
