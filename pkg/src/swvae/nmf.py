"""Itakura-Saito NMF noise variance model, var(noise_ft) = (W H)_ft."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from swvae.numerics import ShapeError, check_finite

NMF_FLOOR = 1e-10


@dataclass(frozen=True)
class NmfState:
    W: np.ndarray  # F x K
    H: np.ndarray  # K x T
    floor: float = NMF_FLOOR

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        H = np.asarray(self.H, dtype=np.float64)
        if W.ndim != 2 or H.ndim != 2 or W.shape[1] != H.shape[0]:
            raise ShapeError(f"W {W.shape} and H {H.shape} are not conformable")
        check_finite("W", W)
        check_finite("H", H)
        if np.any(W < 0) or np.any(H < 0):
            raise ValueError("NMF factors must be nonnegative")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "H", H)

    @property
    def rank(self) -> int:
        return self.W.shape[1]

    def wh(self) -> np.ndarray:
        """Floored noise variance, F x T."""
        return np.maximum(self.W @ self.H, self.floor)

    @classmethod
    def init_random(
        cls, power: np.ndarray, rank: int, rng: np.random.Generator, floor: float = NMF_FLOOR
    ) -> "NmfState":
        """U(0.5, 1.5) factors scaled so mean(WH) is about mean(power).

        ``power`` is the F x T mixture power spectrogram.
        """
        F, T = power.shape
        scale = np.sqrt(max(float(np.mean(power)), floor) / rank)
        W = scale * rng.uniform(0.5, 1.5, size=(F, rank))
        H = scale * rng.uniform(0.5, 1.5, size=(rank, T))
        return cls(W, H, floor)


def is_divergence(V: np.ndarray, U: np.ndarray) -> float:
    """Itakura-Saito divergence sum_ft [V/U - log(V/U) - 1]."""
    V = np.asarray(V, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    if V.shape != U.shape:
        raise ShapeError(f"V {V.shape} and U {U.shape} differ")
    if np.any(V <= 0) or np.any(U <= 0):
        raise ValueError("IS divergence needs strictly positive entries")
    q = V / U
    return float(np.sum(q - np.log(q) - 1.0))


def _check_v(state: NmfState, V: np.ndarray) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    shape = (state.W.shape[0], state.H.shape[1])
    if V.shape != shape:
        raise ShapeError(f"V has shape {V.shape}, expected {shape}")
    return V


def update_h(state: NmfState, V: np.ndarray) -> NmfState:
    """H <- H * W^T (V (WH)^-2) / W^T (WH)^-1, floored."""
    V = _check_v(state, V)
    W, H = state.W, state.H
    wh = state.wh()
    num = W.T @ (V * wh**-2)
    den = np.maximum(W.T @ wh**-1, state.floor)
    return NmfState(W, np.maximum(H * num / den, state.floor), state.floor)


def update_w(state: NmfState, V: np.ndarray) -> NmfState:
    """W <- W * (V (WH)^-2) H^T / (WH)^-1 H^T, floored."""
    V = _check_v(state, V)
    W, H = state.W, state.H
    wh = state.wh()
    num = (V * wh**-2) @ H.T
    den = np.maximum(wh**-1 @ H.T, state.floor)
    return NmfState(np.maximum(W * num / den, state.floor), H, state.floor)


def posterior_power(x: np.ndarray, marginals: np.ndarray, eta: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Expected noise power V_ft = sum_m r_tm (|x_ft - eta^m_ft|^2 + nu^m_ft).

    ``x`` is T x F, ``marginals`` T x M, ``eta``/``nu`` M x T x F.
    Returned transposed to F x T to match the NMF layout.
    """
    x = np.asarray(x)
    T, F = x.shape
    M = marginals.shape[1]
    if marginals.shape != (T, M) or eta.shape != (M, T, F) or nu.shape != (M, T, F):
        raise ShapeError(
            f"posterior_power: x {x.shape}, r {marginals.shape}, "
            f"eta {eta.shape}, nu {nu.shape}"
        )
    resid = np.abs(x[None] - eta) ** 2 + nu
    V = np.einsum("tm,mtf->ft", marginals, resid)
    return V
