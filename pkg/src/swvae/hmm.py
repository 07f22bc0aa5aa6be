"""Scaled forward-backward over the model switch, and Baum-Welch updates."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from swvae.numerics import ShapeError, check_finite

PROB_FLOOR = 1e-12


def _floor_rows(p: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    p = np.maximum(p, floor)
    return p / p.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class HmmParams:
    lam: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=np.float64)
        tau = np.asarray(self.tau, dtype=np.float64)
        M = lam.size
        if lam.shape != (M,) or tau.shape != (M, M):
            raise ShapeError(f"lambda {lam.shape} and tau {tau.shape} disagree")
        if np.any(lam < 0) or abs(lam.sum() - 1) > 1e-9:
            raise ValueError("lambda must be a probability vector")
        if np.any(tau < 0) or np.any(np.abs(tau.sum(axis=1) - 1) > 1e-9):
            raise ValueError("tau must be row-stochastic")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "tau", tau)

    @property
    def n_states(self) -> int:
        return self.lam.size

    @classmethod
    def uniform(cls, M: int) -> "HmmParams":
        return cls(np.full(M, 1.0 / M), np.full((M, M), 1.0 / M))

    @classmethod
    def random(cls, M: int, rng: np.random.Generator, stickiness: float = 0.0) -> "HmmParams":
        """Random lambda and tau; ``stickiness`` adds mass to the diagonal."""
        lam = rng.dirichlet(np.ones(M))
        tau = rng.uniform(size=(M, M)) + stickiness * np.eye(M)
        return cls(_floor_rows(lam), _floor_rows(tau))


@dataclass(frozen=True)
class SwitchPosterior:
    marginals: np.ndarray  # T x M
    joints: np.ndarray  # (T-1) x M x M, joints[t-1, i, j] = q(m_{t-1}=i, m_t=j)
    log_normalizer: float

    @property
    def n_frames(self) -> int:
        return self.marginals.shape[0]


def forward_backward(params: HmmParams, logits: np.ndarray) -> SwitchPosterior:
    """Smoothed marginals and pairwise joints with emissions exp(logits).

    Each row of ``logits`` is shifted by its max before exponentiation; the
    shift is added back into ``log_normalizer``, which is therefore the log
    of sum over paths of p(path) * prod_t exp(logits[t, m_t]).
    """
    logits = np.asarray(logits, dtype=np.float64)
    M = params.n_states
    if logits.ndim != 2 or logits.shape[1] != M:
        raise ShapeError(f"logits must be T x {M}, got {logits.shape}")
    check_finite("emission logits", logits)
    T = logits.shape[0]
    if T == 0:
        raise ShapeError("need at least one frame")
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    tau = params.tau

    alpha = np.empty((T, M))
    scale = np.empty(T)
    a = params.lam * e[0]
    for t in range(T):
        if t > 0:
            a = (alpha[t - 1] @ tau) * e[t]
        c = max(a.sum(), np.finfo(float).tiny)
        scale[t] = c
        alpha[t] = a / c

    beta = np.empty((T, M))
    beta[-1] = 1.0
    for t in range(T - 2, -1, -1):
        beta[t] = tau @ (e[t + 1] * beta[t + 1]) / scale[t + 1]

    r = alpha * beta
    r /= r.sum(axis=1, keepdims=True)
    if T > 1:
        joints = (
            alpha[:-1, :, None]
            * tau[None, :, :]
            * (e[1:] * beta[1:])[:, None, :]
            / scale[1:, None, None]
        )
        joints /= joints.sum(axis=(1, 2), keepdims=True)
    else:
        joints = np.zeros((0, M, M))
    log_z = float(np.sum(np.log(scale)) + shift.sum())
    return SwitchPosterior(r, joints, log_z)


def brute_force_posterior(params: HmmParams, logits: np.ndarray) -> SwitchPosterior:
    """Exhaustive enumeration over all M^T paths. Reference only."""
    logits = np.asarray(logits, dtype=np.float64)
    T, M = logits.shape
    r = np.zeros((T, M))
    joints = np.zeros((max(T - 1, 0), M, M))
    log_w = []
    paths = list(itertools.product(range(M), repeat=T))
    for path in paths:
        lw = np.log(params.lam[path[0]]) + logits[0, path[0]]
        for t in range(1, T):
            lw += np.log(params.tau[path[t - 1], path[t]]) + logits[t, path[t]]
        log_w.append(lw)
    log_w = np.array(log_w)
    top = log_w.max()
    w = np.exp(log_w - top)
    total = w.sum()
    for path, wi in zip(paths, w / total):
        for t in range(T):
            r[t, path[t]] += wi
            if t > 0:
                joints[t - 1, path[t - 1], path[t]] += wi
    return SwitchPosterior(r, joints, float(top + np.log(total)))


def update_hmm(post: SwitchPosterior, prev: HmmParams | None = None) -> HmmParams:
    """Baum-Welch re-estimation of (lambda, tau) from a switch posterior.

    With a single frame there is no transition evidence; ``prev.tau`` is
    kept (uniform if ``prev`` is None).
    """
    r = post.marginals
    M = r.shape[1]
    lam = _floor_rows(r[0])
    if post.joints.shape[0] == 0:
        tau = prev.tau if prev is not None else np.full((M, M), 1.0 / M)
    else:
        counts = post.joints.sum(axis=0)
        occupancy = r[:-1].sum(axis=0)
        tau = counts / np.maximum(occupancy, PROB_FLOOR)[:, None]
        tau = _floor_rows(tau)
    return HmmParams(lam, tau)
