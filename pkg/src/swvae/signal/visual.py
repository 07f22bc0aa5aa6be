"""Visual embeddings aligned to STFT frames, occlusion, and their file format.

A visual vector is a log band-energy shape (mean removed, so
loudness-independent) plus small Gaussian jitter. The synthetic corpus feeds
it the nominal envelope of the active regime, so like a lip embedding it
says what kind of sound is being made but not its exact spectrum.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from swvae.numerics import check_finite

VISUAL_MAGIC = b"SWVV"
LABEL_MAGIC = b"SWVL"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class VisualSequence:
    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"visual values must be T x V, got shape {v.shape}")
        check_finite("visual values", v)
        mask = (
            np.zeros(v.shape[0], dtype=bool)
            if self.mask is None
            else np.asarray(self.mask, dtype=bool)
        )
        if mask.shape != (v.shape[0],):
            raise ValueError("occlusion mask must have one entry per frame")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", mask)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def band_edges(n_bins: int, sample_rate: int, n_bands: int) -> np.ndarray:
    """Log-spaced bin edges from 60 Hz to Nyquist."""
    nyq = sample_rate / 2
    hz = np.geomspace(60.0, nyq, n_bands + 1)
    edges = np.round(hz / nyq * (n_bins - 1)).astype(int)
    edges[0] = 0
    edges[-1] = n_bins
    return np.maximum.accumulate(np.maximum(edges, np.arange(n_bands + 1)))


def visual_from_power(power: np.ndarray, sample_rate: int, dim: int, rng: np.random.Generator, noise_std: float = 0.1) -> VisualSequence:
    """Log band-energy shape of each row of a T x F power array, plus jitter."""
    power = np.asarray(power, dtype=np.float64)
    edges = band_edges(power.shape[1], sample_rate, dim)
    bands = np.stack(
        [power[:, a:b].sum(axis=1) for a, b in zip(edges[:-1], edges[1:])], axis=1
    )
    # floor at 40 dB below the frame total so empty bands stay bounded
    floor = 1e-4 * bands.sum(axis=1, keepdims=True) + 1e-12
    logb = np.log(bands + floor)
    shape = (logb - logb.mean(axis=1, keepdims=True)) / 4.0
    return VisualSequence(shape + noise_std * rng.standard_normal(shape.shape))


def visual_from_spectrogram(spec, dim: int, rng: np.random.Generator, noise_std: float = 0.1) -> VisualSequence:
    return visual_from_power(spec.power(), spec.config.sample_rate, dim, rng, noise_std)


def occlude(
    vis: VisualSequence, fraction: float, rng: np.random.Generator, burst: int = 20
) -> VisualSequence:
    """Replace about ``fraction`` of the frames by N(0, 1) noise in bursts.

    Bursts are exactly ``burst`` frames long and separated by at least one
    clean frame. Previously occluded frames stay occluded.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    if burst < 1:
        raise ValueError("burst must be >= 1")
    T = vis.n_frames
    n_bursts = int(round(fraction * T / burst))
    # bursts need burst + 1 frames each except the last
    n_bursts = min(n_bursts, (T + 1) // (burst + 1))
    values = vis.values.copy()
    mask = vis.mask.copy()
    if n_bursts == 0:
        return VisualSequence(values, mask)
    free = T - n_bursts * burst - (n_bursts - 1)
    offsets = np.sort(rng.integers(0, free + 1, size=n_bursts))
    starts = offsets + np.arange(n_bursts) * (burst + 1)
    for s in starts:
        values[s : s + burst] = rng.standard_normal((burst, vis.dim))
        mask[s : s + burst] = True
    return VisualSequence(values, mask)


# --------------------------------------------------------------------------
# file I/O: little-endian float32 with a (magic, T, V) header


def _write_block(path, magic: bytes, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def _read_block(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    got, T, V = _HEADER.unpack_from(raw)
    if got != magic:
        raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
    body = raw[_HEADER.size :]
    if len(body) != 4 * T * V:
        raise ValueError(f"{path}: expected {T}x{V} float32 payload, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(T, V).astype(np.float64)


def save_visual(path, vis: VisualSequence) -> None:
    """Values and mask as one T x (V + 1) block; the last column is the mask."""
    _write_block(path, VISUAL_MAGIC, np.column_stack([vis.values, vis.mask]))


def load_visual(path) -> VisualSequence:
    block = _read_block(path, VISUAL_MAGIC)
    return VisualSequence(block[:, :-1], block[:, -1] > 0.5)


def save_labels(path, labels) -> None:
    _write_block(path, LABEL_MAGIC, np.asarray(labels).reshape(-1, 1))


def load_labels(path) -> np.ndarray:
    return _read_block(path, LABEL_MAGIC)[:, 0].astype(np.int64)


def export_visual_json(path, vis: VisualSequence, labels=None) -> None:
    doc = {
        "T": vis.n_frames,
        "V": vis.dim,
        "values": np.asarray(vis.values, dtype=np.float32).tolist(),
        "mask": vis.mask.astype(int).tolist(),
    }
    if labels is not None:
        doc["labels"] = np.asarray(labels).astype(int).tolist()
    Path(path).write_text(json.dumps(doc))
