"""Audio-side plumbing: STFT, WAV I/O, synthetic data, visual features."""

from swvae.signal.stft import ComplexSpectrogram, StftConfig, Waveform, istft, stft
from swvae.signal.synth import make_noise, mix_at_snr, synth_clean
from swvae.signal.visual import VisualSequence, occlude
from swvae.signal.wavio import read_wav, write_wav

__all__ = [
    "ComplexSpectrogram",
    "StftConfig",
    "VisualSequence",
    "Waveform",
    "istft",
    "make_noise",
    "mix_at_snr",
    "occlude",
    "read_wav",
    "stft",
    "synth_clean",
    "write_wav",
]
