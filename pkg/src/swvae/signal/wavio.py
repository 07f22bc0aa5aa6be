"""Mono WAV read/write (16-bit PCM or 32-bit float)."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from swvae.signal.stft import Waveform

log = logging.getLogger(__name__)

FORMATS = ("pcm16", "float32")


def write_wav(path, w: Waveform, fmt: str = "pcm16") -> None:
    """Write ``w`` to ``path``. Samples outside [-1, 1] are clipped."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown WAV format {fmt!r}; expected one of {FORMATS}")
    x = w.samples
    n_clip = int(np.count_nonzero(np.abs(x) > 1.0))
    if n_clip:
        log.warning("%s: clipping %d samples outside [-1, 1]", path, n_clip)
        x = np.clip(x, -1.0, 1.0)
    if fmt == "pcm16":
        data = np.round(x * 32767.0).astype("<i2")
    else:
        data = x.astype("<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(w.sample_rate), data)


def read_wav(path) -> Waveform:
    """Read a mono WAV file into a float64 waveform in [-1, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"WAV file not found: {path}")
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32767.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483647.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 127.0
    elif data.dtype.kind == "f":
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample type {data.dtype}")
    return Waveform(x, int(rate))
